use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::batch::{build_batches, ContrastiveBatch};
use super::{ntxent_grad, DenominatorMode};
use crate::error::{Error, Result};
use crate::featurestore::FeatureStore;
use crate::mining::PairSet;
use crate::pooling::{ForwardTape, ParamGrads, PoolerParams};
use crate::rng::derive_seed;

/// Segments per parallel backward chunk. Fixed so the summation order, and
/// therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iterations_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub denominator_mode: DenominatorMode,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 150,
            epochs: 5,
            max_iterations_per_epoch: 1000,
            learning_rate: 1e-4,
            seed: 0,
            denominator_mode: DenominatorMode::Standard,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be a non-negative number"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        if self.learning_rate == 0.0 {
            return;
        }
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g as f64;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Per-step loss record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    /// Pairs dropped because a segment cannot pass through the pooler.
    pub dropped_pairs: usize,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean loss of each epoch that took at least one step.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((e, sum, n)) if *e == s.epoch => {
                    *sum += s.loss;
                    *n += 1;
                }
                _ => out.push((s.epoch, s.loss, 1)),
            }
        }
        out.into_iter().map(|(_, sum, n)| sum / n as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for st in &self.steps {
            s.push_str(&format!("{},{},{}\n", st.step, st.epoch, st.loss));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn poolable(params: &PoolerParams<f32>, len: usize) -> bool {
    let cfg = &params.config;
    len >= cfg.conv_kernel && len <= cfg.max_input_frames()
}

/// Loss and per-segment embedding gradients for one batch.
///
/// Every slot contributes two terms, anchor against positive and positive
/// against anchor, sharing the slot's negative set. The loss is the mean
/// over terms that have at least one negative.
fn batch_objective(
    batch: &ContrastiveBatch,
    embeddings: &HashMap<u32, Vec<f64>>,
    cfg: &TrainConfig,
) -> Result<(f64, HashMap<u32, Vec<f64>>)> {
    let dim = embeddings.values().next().map_or(0, Vec::len);
    let mut grads: HashMap<u32, Vec<f64>> = embeddings.keys().map(|&k| (k, vec![0.0; dim])).collect();
    let mut terms: Vec<(u32, u32, Vec<u32>)> = Vec::with_capacity(batch.len() * 2);
    for (i, slot) in batch.slots.iter().enumerate() {
        let negatives: Vec<u32> = batch
            .negative_slots(i)
            .flat_map(|j| [batch.slots[j].anchor, batch.slots[j].positive])
            .filter(|&s| s != slot.anchor && s != slot.positive)
            .collect();
        if negatives.is_empty() {
            continue;
        }
        terms.push((slot.anchor, slot.positive, negatives.clone()));
        terms.push((slot.positive, slot.anchor, negatives));
    }
    if terms.is_empty() {
        return Ok((0.0, grads));
    }
    let weight = 1.0 / terms.len() as f64;
    let mut loss = 0.0;
    for (c, p, negs) in &terms {
        let neg_refs: Vec<&[f64]> = negs.iter().map(|n| embeddings[n].as_slice()).collect();
        let g = ntxent_grad(&embeddings[c], &embeddings[p], &neg_refs, cfg.temperature, cfg.denominator_mode)?;
        loss += g.loss * weight;
        axpy(grads.get_mut(c).expect("segment embedded"), &g.anchor, weight);
        axpy(grads.get_mut(p).expect("segment embedded"), &g.positive, weight);
        for (n, gn) in negs.iter().zip(&g.negatives) {
            axpy(grads.get_mut(n).expect("segment embedded"), gn, weight);
        }
    }
    Ok((loss, grads))
}

fn axpy(acc: &mut [f64], x: &[f64], w: f64) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

/// Trains `pooler` on `pairs` with in-batch negatives and returns the final
/// parameters plus one loss entry per optimizer step.
pub fn train_pooler(
    store: &FeatureStore,
    pairs: &PairSet,
    pooler: PoolerParams<f32>,
    cfg: &TrainConfig,
) -> Result<(PoolerParams<f32>, TrainLog)> {
    cfg.validate()?;
    if store.dim() != pooler.config.input_dim {
        return Err(Error::InconsistentDimension {
            expected: pooler.config.input_dim,
            found: store.dim(),
        });
    }
    for seg in pairs.segments() {
        store.check_segment(seg)?;
    }
    let usable = pairs.filter(|a, b, _| poolable(&pooler, a.len()) && poolable(&pooler, b.len()));
    let dropped = pairs.len() - usable.len();
    if dropped > 0 {
        log::warn!("dropping {dropped} pairs with segments the pooler cannot embed");
    }
    let mut log = TrainLog {
        steps: Vec::new(),
        dropped_pairs: dropped,
    };
    if usable.is_empty() {
        return Err(Error::NoPositivePairs);
    }

    let mut params = pooler;
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = build_batches(&usable, cfg.batch_size, derive_seed(cfg.seed, epoch as u64))?;
        for (b, batch) in batches.iter().take(cfg.max_iterations_per_epoch).enumerate() {
            let (loss, grads) = batch_gradient(store, &usable, &params, batch, cfg)?;
            if !loss.is_finite() || !grads.values.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, epoch, batch: b });
            }
            let mut g = grads.values;
            if let Some(max_norm) = cfg.clip_norm {
                let n = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if n > max_norm {
                    let s = (max_norm / n) as f32;
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
            adam.step(&mut params.values, &g);
            log.steps.push(TrainStep { step, epoch, loss });
            step += 1;
        }
        if let Some(mean) = log.epoch_means().last() {
            log::info!("epoch {epoch}: mean loss {mean:.5}");
        }
    }
    Ok((params, log))
}

fn batch_gradient(
    store: &FeatureStore,
    pairs: &PairSet,
    params: &PoolerParams<f32>,
    batch: &ContrastiveBatch,
    cfg: &TrainConfig,
) -> Result<(f64, ParamGrads<f32>)> {
    let mut segs: Vec<u32> = batch.slots.iter().flat_map(|s| [s.anchor, s.positive]).collect();
    segs.sort_unstable();
    segs.dedup();

    let forwards: Vec<(Vec<f32>, ForwardTape<f32>)> = segs
        .par_iter()
        .map(|&s| {
            let frames = store.get_frames(pairs.segment(s))?;
            params.forward(frames.view())
        })
        .collect::<Result<_>>()?;
    let embeddings: HashMap<u32, Vec<f64>> = segs
        .iter()
        .zip(&forwards)
        .map(|(&s, (e, _))| (s, e.iter().map(|&v| v as f64).collect()))
        .collect();
    let (loss, emb_grads) = batch_objective(batch, &embeddings, cfg)?;

    let n = params.len();
    let partials: Vec<ParamGrads<f32>> = segs
        .par_chunks(GRAD_CHUNK)
        .zip(forwards.par_chunks(GRAD_CHUNK))
        .map(|(ids, fw)| {
            let mut acc = ParamGrads::zeros(n);
            for (s, (_, tape)) in ids.iter().zip(fw) {
                let g: Vec<f32> = emb_grads[s].iter().map(|&v| v as f32).collect();
                params.backward_into(tape, &g, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros(n);
    for p in &partials {
        total.add_assign(p);
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(3, 0.01);
        let mut p = vec![1.0f32, -2.0, 0.5];
        adam.step(&mut p, &[0.3, -4.0, 0.0]);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut adam = Adam::new(2, 0.0);
        let mut p = vec![0.123f32, -7.5];
        let before = p.clone();
        for _ in 0..5 {
            adam.step(&mut p, &[1.0, -1.0]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn log_csv_and_epoch_means() {
        let log = TrainLog {
            steps: vec![
                TrainStep { step: 0, epoch: 0, loss: 2.0 },
                TrainStep { step: 1, epoch: 0, loss: 1.0 },
                TrainStep { step: 2, epoch: 1, loss: 0.5 },
            ],
            dropped_pairs: 0,
        };
        assert_eq!(log.epoch_means(), vec![1.5, 0.5]);
        assert!(log.to_csv().starts_with("step,epoch,loss\n0,0,2\n"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
