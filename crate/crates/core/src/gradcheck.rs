//! Finite-difference gradient verification (64-bit, five-point central stencil).
//!
//! Independent of the analytic backward passes: only forward evaluations are
//! used here.

use ndarray::Array2;

use crate::contrastive::{ntxent_loss, DenominatorMode};
use crate::error::Result;
use crate::pooling::PoolerParams;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Five-point estimate of `d/dt eval(t)` at `t = 0`.
fn stencil(step: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1) = (eval(2.0 * step)?, eval(step)?);
    let (m1, m2) = (eval(-step)?, eval(-2.0 * step)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step))
}

/// Relative error `|a - b| / max(|a|, |b|)` of two gradient vectors, measured
/// with the Euclidean norm. Zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Numerical gradient of `params -> dot(pool(frames), grad_out)`.
pub fn pooler_numeric_grad(
    params: &PoolerParams<f64>,
    frames: &Array2<f64>,
    grad_out: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let objective = |p: &PoolerParams<f64>| -> Result<f64> {
        let (out, _) = p.forward(frames.view())?;
        Ok(out.iter().zip(grad_out).map(|(a, b)| a * b).sum())
    };
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values[i];
        let d = stencil(step, |t| {
            probe.values[i] = orig + t;
            objective(&probe)
        });
        probe.values[i] = orig;
        grad.push(d?);
    }
    Ok(grad)
}

/// Smallest gap between the winning frame and the runner-up over all output
/// dimensions. Finite differences are only meaningful away from max-pool ties.
pub fn max_pool_margin(params: &PoolerParams<f64>, frames: &Array2<f64>) -> Result<f64> {
    let (_, tape) = params.forward(frames.view())?;
    let mut margin = f64::INFINITY;
    for col in tape.frame_outputs.columns() {
        if col.len() < 2 {
            continue;
        }
        let mut vals: Vec<f64> = col.to_vec();
        vals.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(vals[0] - vals[1]);
    }
    Ok(margin)
}

/// Numerical gradient of the contrastive loss with respect to each input
/// vector, in the order anchor, positive, negatives.
pub fn ntxent_numeric_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
    mode: DenominatorMode,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(negatives.len() + 2);
    vecs.push(anchor.to_vec());
    vecs.push(positive.to_vec());
    vecs.extend(negatives.iter().cloned());
    let loss = |v: &[Vec<f64>]| -> Result<f64> {
        let negs: Vec<&[f64]> = v[2..].iter().map(|n| n.as_slice()).collect();
        ntxent_loss(&v[0], &v[1], &negs, temperature, mode)
    };
    let mut out = Vec::with_capacity(vecs.len());
    for which in 0..vecs.len() {
        let mut g = Vec::with_capacity(vecs[which].len());
        for j in 0..vecs[which].len() {
            let orig = vecs[which][j];
            let d = stencil(step, |t| {
                vecs[which][j] = orig + t;
                loss(&vecs)
            });
            vecs[which][j] = orig;
            g.push(d?);
        }
        out.push(g);
    }
    Ok(out)
}
