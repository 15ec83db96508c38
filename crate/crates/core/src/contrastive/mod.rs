//! Cosine similarity, the NT-Xent contrastive loss and its gradient, and
//! the training loop for the learned pooler.

use crate::error::{Error, Result};

pub mod batch;
pub mod train;

pub use batch::{build_batches, ContrastiveBatch, Slot};
pub use train::{train_pooler, Adam, TrainConfig, TrainLog, TrainStep};

/// Norms below this are treated as zero vectors.
pub const NORM_FLOOR: f64 = 1e-12;

/// Which terms the loss denominator sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Positive plus negatives (the usual SimCLR form).
    Standard,
    /// Negatives only.
    Literal,
}

impl std::str::FromStr for DenominatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(Error::invalid(format!("unknown denominator mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        })
    }
}

fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into() * x.into()).sum::<f64>().sqrt()
}

/// `a.b / (|a| |b|)`, or 0 when either norm is below [`NORM_FLOOR`].
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InconsistentDimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Ok(0.0);
    }
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum();
    // + 0.0 folds -0.0 into 0.0 so equal scores compare equal under total_cmp
    Ok((d / (na * nb)).clamp(-1.0, 1.0) + 0.0)
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let c = d / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (c, ga, gb)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_inputs(temperature: f64, n_negatives: usize) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if n_negatives == 0 {
        return Err(Error::invalid("empty negative set"));
    }
    Ok(())
}

/// NT-Xent loss of `anchor` against `positive` and `negatives`:
/// `-log(exp(s+) / Z)` with `s = cos / temperature` and `Z` summing
/// `exp(s)` over the negatives, plus the positive in standard mode.
pub fn ntxent_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64, mode: DenominatorMode) -> Result<f64> {
    check_inputs(temperature, negatives.len())?;
    let sp = cosine(anchor, positive)? / temperature;
    let sn: Vec<f64> = negatives
        .iter()
        .map(|n| cosine(anchor, n).map(|c| c / temperature))
        .collect::<Result<_>>()?;
    let lse = match mode {
        DenominatorMode::Standard => log_sum_exp(std::iter::once(sp).chain(sn.iter().copied())),
        DenominatorMode::Literal => log_sum_exp(sn.iter().copied()),
    };
    Ok(lse - sp)
}

/// Loss value and gradients with respect to every input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NtxentGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Analytic gradient of [`ntxent_loss`].
pub fn ntxent_grad(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64, mode: DenominatorMode) -> Result<NtxentGrad> {
    check_inputs(temperature, negatives.len())?;
    for n in std::iter::once(&positive).chain(negatives.iter()) {
        if n.len() != anchor.len() {
            return Err(Error::InconsistentDimension {
                expected: anchor.len(),
                found: n.len(),
            });
        }
    }
    let (cp, ga_p, gp) = cosine_grads(anchor, positive);
    let neg: Vec<(f64, Vec<f64>, Vec<f64>)> = negatives.iter().map(|n| cosine_grads(anchor, n)).collect();
    let sp = cp / temperature;
    let sn: Vec<f64> = neg.iter().map(|(c, _, _)| c / temperature).collect();

    let include_pos = mode == DenominatorMode::Standard;
    let lse = if include_pos {
        log_sum_exp(std::iter::once(sp).chain(sn.iter().copied()))
    } else {
        log_sum_exp(sn.iter().copied())
    };
    let loss = lse - sp;
    // dL/ds for each logit
    let w_pos = if include_pos { (sp - lse).exp() - 1.0 } else { -1.0 };
    let w_neg: Vec<f64> = sn.iter().map(|s| (s - lse).exp()).collect();

    let inv_t = 1.0 / temperature;
    let mut g_anchor: Vec<f64> = ga_p.iter().map(|g| w_pos * inv_t * g).collect();
    let g_positive: Vec<f64> = gp.iter().map(|g| w_pos * inv_t * g).collect();
    let mut g_negatives = Vec::with_capacity(neg.len());
    for ((_, ga, gn), w) in neg.iter().zip(&w_neg) {
        for (acc, g) in g_anchor.iter_mut().zip(ga) {
            *acc += w * inv_t * g;
        }
        g_negatives.push(gn.iter().map(|g| w * inv_t * g).collect());
    }
    Ok(NtxentGrad {
        loss,
        anchor: g_anchor,
        positive: g_positive,
        negatives: g_negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let v = [0.3f32, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let w: Vec<f32> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine(&v, &w).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0f32, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let a = [1.0, 0.0];
        let p = [2.0, 0.0];
        let n = [0.0, 1.0];
        let l = ntxent_loss(&a, &p, &[&n], 1.0, DenominatorMode::Standard).unwrap();
        // -log(e / (e + 1))
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);

        // literal mode with N = {c+}: numerator equals denominator
        let l = ntxent_loss(&a, &p, &[&p], 0.5, DenominatorMode::Literal).unwrap();
        assert!(l.abs() < 1e-12);

        // k negatives all as similar as the positive -> log(k + 1)
        let negs: Vec<&[f64]> = vec![&p; 4];
        let l = ntxent_loss(&a, &p, &negs, 0.07, DenominatorMode::Standard).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        assert!(ntxent_loss(&a, &p, &[], 1.0, DenominatorMode::Standard).is_err());
        assert!(ntxent_loss(&a, &p, &[&n], 0.0, DenominatorMode::Standard).is_err());
    }

    #[test]
    fn loss_is_finite_at_low_temperature() {
        let a = [1.0, 0.0];
        let far = [-1.0, 0.0];
        let l = ntxent_loss(&a, &far, &[&a], 1e-3, DenominatorMode::Standard).unwrap();
        assert!(l.is_finite());
        assert!((l - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_point_gradients() {
        let a = [1.0, 0.5, -0.2];
        let p = [0.9, 0.1, 0.3];
        // negatives with identical cosine to the anchor: same vector
        let negs: Vec<&[f64]> = vec![&p, &p, &p];
        let g = ntxent_grad(&a, &p, &negs, 0.1, DenominatorMode::Standard).unwrap();
        assert!(g.positive.iter().any(|v| v.abs() > 1e-6));
        for n in &g.negatives[1..] {
            assert_eq!(n, &g.negatives[0]);
        }
    }

    #[test]
    fn grad_loss_matches_loss() {
        let a = [0.2, -0.4, 1.0];
        let p = [0.1, -0.5, 0.8];
        let n1 = [1.0, 0.0, 0.0];
        let n2 = [-0.3, 0.2, 0.1];
        for mode in [DenominatorMode::Standard, DenominatorMode::Literal] {
            let l = ntxent_loss(&a, &p, &[&n1, &n2], 0.3, mode).unwrap();
            let g = ntxent_grad(&a, &p, &[&n1, &n2], 0.3, mode).unwrap();
            assert!((l - g.loss).abs() < 1e-12);
        }
    }
}
