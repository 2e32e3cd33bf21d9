//! Central finite-difference gradient checking.

use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-parameter relative error `|a - n| / max(|a|, |n|, floor)` using L2 norms.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the tape's analytic gradients of `build` against central differences.
///
/// `build` receives a fresh tape and one parameter [`Var`] per entry of `params`
/// and must return a scalar loss node.
pub fn check_gradients<F>(params: &[Matrix], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut relative_errors = Vec::with_capacity(params.len());
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.take_or_zeros(var, &tape);
        let mut numeric = Matrix::zeros(analytic.rows(), analytic.cols());
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            numeric.data_mut()[k] = (up - down) / (2.0 * step);
        }
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {pi}")));
        }
        let diff = analytic.sub(&numeric)?.norm();
        let scale = analytic.norm().max(numeric.norm()).max(1e-8);
        relative_errors.push(diff / scale);
    }
    Ok(GradCheckReport { relative_errors })
}
