//! Metrics, the diagnostic experiments and the method comparison.
//!
//! Every experiment is a pure function of its inputs: generation is greedy,
//! random draws are seeded per episode, and results are reduced in episode
//! order. Wall-clock timings are reported separately from the metrics.

mod experiments;
mod svg;

pub use experiments::*;
pub use svg::curves_svg;

use crate::numkernel::cosine_distance;
use crate::{Error, Result};
use crate::numkernel::Tensor;

/// Fraction of positions where the prediction equals the ground truth.
pub fn token_accuracy(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "accuracy between {} and {} tokens",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("accuracy of an empty sequence"));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-position cosine distance between predicted and ground-truth rows.
pub fn position_distance_curve(e_pred: &Tensor, e_star: &Tensor) -> Result<Vec<f64>> {
    if e_pred.dims() != e_star.dims() {
        return Err(Error::shape(format!(
            "distance curve between {:?} and {:?}",
            e_pred.dims(),
            e_star.dims()
        )));
    }
    (0..e_pred.rows())
        .map(|t| cosine_distance(e_pred.row(t), e_star.row(t)))
        .collect()
}

/// Trapezoidal integral of the curve over unit-spaced positions, divided by
/// `T - 1`, so a constant curve has its constant as AUC. A single point is
/// its own AUC.
pub fn auc(curve: &[f64]) -> f64 {
    match curve.len() {
        0 => 0.0,
        1 => curve[0],
        n => curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / (n - 1) as f64,
    }
}

/// Element-wise mean of equal-length curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let n = curves.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
