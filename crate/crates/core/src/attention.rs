//! Candidate-aware aggregation of a user's clicked titles and the click predictor.
//!
//! The attention network scores each clicked title against the candidate from the
//! concatenation `[clicked, candidate]`; a softmax over the history turns the
//! scores into weights and the user vector is the weighted sum of the clicked
//! title embeddings. The predictor maps `[user, candidate]` to a click logit.

use crate::error::{Error, Result};
use crate::kcnn::text_enum;
use crate::nn::{ops, Init, Matrix, Mlp, MlpVars, Tape, Var};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Longest click history fed to the aggregator; older clicks are dropped.
pub const HISTORY_CAP: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserMode {
    /// Plain mean of the clicked title embeddings.
    Average,
    /// Softmax-weighted sum scored against the candidate.
    Attention,
}

text_enum!(UserMode, "user mode",
    "average" => UserMode::Average,
    "attention" => UserMode::Attention,
);

/// Scores one clicked title against a candidate: `2m -> hidden (tanh) -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub net: Mlp,
}

/// Click logit from `[user, candidate]`: `2m -> 100 (tanh) -> 50 (tanh) -> 1` by default.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub net: Mlp,
}

impl AttentionParams {
    pub fn new(title_dim: usize, hidden: usize, init: Init, rng: &mut Rng) -> Self {
        Self {
            net: Mlp::new(&[2 * title_dim, hidden, 1], init, rng),
        }
    }

    fn title_dim(&self) -> usize {
        self.net.input_dim() / 2
    }
}

impl PredictorParams {
    pub fn new(title_dim: usize, hidden: &[usize], init: Init, rng: &mut Rng) -> Self {
        let mut widths = vec![2 * title_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            net: Mlp::new(&widths, init, rng),
        }
    }
}

fn pair_rows(history: &Matrix, candidate: &[f64]) -> Matrix {
    let m = candidate.len();
    let mut x = Matrix::zeros(history.rows(), 2 * m);
    for r in 0..history.rows() {
        x.row_mut(r)[..m].copy_from_slice(history.row(r));
        x.row_mut(r)[m..].copy_from_slice(candidate);
    }
    x
}

fn check_history(history: &Matrix, candidate: &[f64], m: usize) -> Result<()> {
    if history.rows() == 0 {
        return Err(Error::Contract("attention over an empty click history".into()));
    }
    if history.cols() != m || candidate.len() != m {
        return Err(Error::dim("attention inputs", history.shape(), (1, candidate.len())));
    }
    Ok(())
}

/// Raw attention scores, one per clicked title (`history` is `N x m`).
pub fn attention_scores(history: &Matrix, candidate: &[f64], params: &AttentionParams) -> Result<Vec<f64>> {
    check_history(history, candidate, params.title_dim())?;
    Ok(params.net.forward(&pair_rows(history, candidate))?.into_data())
}

/// Normalised impact of each clicked title on the candidate.
pub fn attention_weights(history: &Matrix, candidate: &[f64], params: &AttentionParams) -> Result<Vec<f64>> {
    ops::softmax(&attention_scores(history, candidate, params)?)
}

/// User vector for one candidate; `history` must be non-empty.
pub fn user_embedding(
    history: &Matrix,
    candidate: &[f64],
    params: &AttentionParams,
    mode: UserMode,
) -> Result<Vec<f64>> {
    check_history(history, candidate, params.title_dim())?;
    let n = history.rows();
    let weights = match mode {
        UserMode::Average => vec![1.0 / n as f64; n],
        UserMode::Attention => attention_weights(history, candidate, params)?,
    };
    let mut out = vec![0.0; history.cols()];
    for (r, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(history.row(r)) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn predict_logit(user: &[f64], candidate: &[f64], params: &PredictorParams) -> Result<f64> {
    if user.len() != candidate.len() || 2 * user.len() != params.net.input_dim() {
        return Err(Error::dim(
            "predictor inputs",
            (1, user.len() + candidate.len()),
            (1, params.net.input_dim()),
        ));
    }
    let mut x = user.to_vec();
    x.extend_from_slice(candidate);
    Ok(params.net.forward(&Matrix::row_vector(&x))?.get(0, 0))
}

/// Click probability in `(0, 1)`.
pub fn predict_ctr(user: &[f64], candidate: &[f64], params: &PredictorParams) -> Result<f64> {
    Ok(ops::sigmoid(predict_logit(user, candidate, params)?))
}

/// Attention weights on the tape: `history` is `N x m`, `candidate` is `1 x m`; returns `1 x N`.
pub fn attention_weights_on_tape(tape: &mut Tape, net: &MlpVars, history: Var, candidate: Var) -> Result<Var> {
    let n = tape.value(history).rows();
    let cand = tape.repeat_rows(candidate, n)?;
    let pairs = tape.concat_cols(&[history, cand])?;
    let scores = net.forward(tape, pairs)?;
    let row = tape.transpose(scores);
    tape.softmax(row)
}

/// `1 x m` user vector on the tape.
pub fn user_embedding_on_tape(
    tape: &mut Tape,
    net: &MlpVars,
    history: Var,
    candidate: Var,
    mode: UserMode,
) -> Result<Var> {
    match mode {
        UserMode::Average => tape.mean_rows(history),
        UserMode::Attention => {
            let w = attention_weights_on_tape(tape, net, history, candidate)?;
            tape.matmul(w, history)
        }
    }
}
