//! Forward kernels shared by the tape and by the frozen-parameter inference paths.

use super::Matrix;
use crate::error::{Error, Result};

/// Valid (unpadded) multi-channel convolution over positions.
///
/// Each channel is `n x d` with one row per sequence position. `filters` is
/// `m x (window * channels * d)`; a filter row is laid out position-major, then
/// channel, then embedding dimension. Returns the `(n - window + 1) x m`
/// pre-activation feature maps, one column per filter.
pub fn conv_valid(channels: &[&Matrix], filters: &Matrix, bias: &Matrix, window: usize) -> Result<Matrix> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Contract("conv_valid needs at least one channel".into()))?;
    let (n, d) = first.shape();
    for ch in channels {
        if ch.shape() != (n, d) {
            return Err(Error::dim("conv_valid channels", (n, d), ch.shape()));
        }
    }
    if window == 0 || window > n {
        return Err(Error::Config(format!(
            "window {window} does not fit sequence length {n}; pad titles before encoding"
        )));
    }
    let c = channels.len();
    let patch = window * c * d;
    if filters.cols() != patch {
        return Err(Error::dim("conv_valid filters", filters.shape(), (filters.rows(), patch)));
    }
    let m = filters.rows();
    if bias.shape() != (1, m) {
        return Err(Error::dim("conv_valid bias", bias.shape(), (1, m)));
    }
    let positions = n - window + 1;
    let mut out = Matrix::zeros(positions, m);
    let mut buf = vec![0.0; patch];
    for i in 0..positions {
        fill_patch(channels, i, window, &mut buf);
        let row = out.row_mut(i);
        for (f, o) in row.iter_mut().enumerate() {
            *o = dot(filters.row(f), &buf) + bias.get(0, f);
        }
    }
    Ok(out)
}

pub(crate) fn fill_patch(channels: &[&Matrix], pos: usize, window: usize, buf: &mut [f64]) {
    let d = channels[0].cols();
    let mut at = 0;
    for j in 0..window {
        for ch in channels {
            buf[at..at + d].copy_from_slice(ch.row(pos + j));
            at += d;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-over-time pooling. Ties resolve to the first occurrence.
pub fn max_over_time(features: &[f64]) -> Result<(f64, usize)> {
    let mut iter = features.iter().copied().enumerate();
    let (mut best_idx, mut best) = iter
        .next()
        .ok_or_else(|| Error::Contract("max_over_time on an empty feature map".into()))?;
    for (i, v) in iter {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    Ok((best, best_idx))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
