use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// How freshly built parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Random,
    Zero,
}

/// Fully connected network on row vectors: `tanh` on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `(weight in x out, bias 1 x out)` per layer.
    pub layers: Vec<(Matrix, Matrix)>,
}

/// Tape handles for one [`Mlp`], in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    pub fn new(widths: &[usize], init: Init, rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| match init {
                Init::Random => (Matrix::xavier(w[0], w[1], rng), Matrix::zeros(1, w[1])),
                Init::Zero => (Matrix::zeros(w[0], w[1]), Matrix::zeros(1, w[1])),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.cols())
    }

    /// Direct evaluation on a batch of row vectors.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?;
            for r in 0..h.rows() {
                for (v, bias) in h.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bias;
                    if i < last {
                        *v = v.tanh();
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|m| tape.param(m.clone())).collect();
        MlpVars::from_vars(&vars)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }
}

impl MlpVars {
    /// Handles over existing leaves laid out as `w0, b0, w1, b1, ...`.
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            layers: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().checked_sub(1).ok_or_else(|| Error::Contract("empty network".into()))?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::SeedTree;

    #[test]
    fn matches_layer_by_layer_loops() {
        let mut rng = SeedTree::new(4).rng();
        let mut net = Mlp::new(&[5, 4, 3, 1], Init::Random, &mut rng);
        for (_, b) in &mut net.layers {
            *b = Matrix::uniform(1, b.cols(), 0.5, &mut rng);
        }
        let x = Matrix::uniform(2, 5, 1.0, &mut rng);
        let out = net.forward(&x).unwrap();
        for r in 0..2 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for (i, (w, b)) in net.layers.iter().enumerate() {
                let mut next = vec![0.0; w.cols()];
                for (j, n) in next.iter_mut().enumerate() {
                    let mut s = b.get(0, j);
                    for (k, hk) in h.iter().enumerate() {
                        s += hk * w.get(k, j);
                    }
                    *n = if i + 1 < net.layers.len() { s.tanh() } else { s };
                }
                h = next;
            }
            assert!((out.get(r, 0) - h[0]).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&out) < 1e-15);
    }

    #[test]
    fn zero_init_outputs_zero() {
        let mut rng = SeedTree::new(0).rng();
        let net = Mlp::new(&[3, 2, 1], Init::Zero, &mut rng);
        let out = net.forward(&Matrix::filled(1, 3, 7.0)).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeedTree::new(5).rng();
        let net = Mlp::new(&[3, 4, 2], Init::Random, &mut rng);
        let x = Matrix::uniform(3, 3, 1.0, &mut rng);
        let params: Vec<Matrix> = net.tensors().into_iter().cloned().collect();
        let report = check_gradients(&params, 1e-5, |tape, v| {
            let xv = tape.constant(x.clone());
            let h = MlpVars::from_vars(v).forward(tape, xv)?;
            let sq = tape.mul(h, h)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-6, "{report:?}");
    }
}
