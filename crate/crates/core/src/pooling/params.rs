use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Real;
use crate::error::{Error, Result};

/// Shape hyperparameters of the learned pooler.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolerConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl PoolerConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("pooler dimensions must be positive"));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "head divisibility: hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.conv_kernel == 0 || self.conv_stride == 0 {
            return Err(Error::invalid("conv_kernel and conv_stride must be at least 1"));
        }
        if self.max_positions == 0 {
            return Err(Error::invalid("max_positions must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Sequence length after the convolution, `None` if the input is shorter
    /// than the kernel.
    pub fn conv_output_len(&self, frames: usize) -> Option<usize> {
        (frames >= self.conv_kernel).then(|| (frames - self.conv_kernel) / self.conv_stride + 1)
    }

    /// Longest input (in frames) whose convolved length fits the position table.
    pub fn max_input_frames(&self) -> usize {
        (self.max_positions - 1) * self.conv_stride + self.conv_kernel
    }
}

impl Default for PoolerConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            hidden_dim: 256,
            conv_kernel: 4,
            conv_stride: 2,
            n_heads: 4,
            max_positions: 128,
            seed: 0,
        }
    }
}

/// Offsets of every tensor inside the flat parameter vector.
///
/// Serialization order is the field order below. Matrices are row-major;
/// projection matrices are stored `(in, out)` so that `y = x W + b`, the
/// convolution weight is `(out_channels, in_channels, kernel)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub ln_in_gain: Range<usize>,
    pub ln_in_bias: Range<usize>,
    pub conv_weight: Range<usize>,
    pub conv_bias: Range<usize>,
    pub pos_emb: Range<usize>,
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub ff1_weight: Range<usize>,
    pub ff1_bias: Range<usize>,
    pub ff2_weight: Range<usize>,
    pub ff2_bias: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &PoolerConfig) -> Self {
        let (d, h, k, p, f) = (cfg.input_dim, cfg.hidden_dim, cfg.conv_kernel, cfg.max_positions, cfg.ff_dim());
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let ln_in_gain = next(d);
        let ln_in_bias = next(d);
        let conv_weight = next(h * d * k);
        let conv_bias = next(h);
        let pos_emb = next(p * h);
        let ln1_gain = next(h);
        let ln1_bias = next(h);
        let wq = next(h * h);
        let bq = next(h);
        let wk = next(h * h);
        let bk = next(h);
        let wv = next(h * h);
        let bv = next(h);
        let wo = next(h * h);
        let bo = next(h);
        let ln2_gain = next(h);
        let ln2_bias = next(h);
        let ff1_weight = next(h * f);
        let ff1_bias = next(f);
        let ff2_weight = next(f * h);
        let ff2_bias = next(h);
        Self {
            ln_in_gain,
            ln_in_bias,
            conv_weight,
            conv_bias,
            pos_emb,
            ln1_gain,
            ln1_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            ff1_weight,
            ff1_bias,
            ff2_weight,
            ff2_bias,
            total: at,
        }
    }

    /// Named tensors in serialization order.
    pub fn tensors(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("ln_in.gain", self.ln_in_gain.clone()),
            ("ln_in.bias", self.ln_in_bias.clone()),
            ("conv.weight", self.conv_weight.clone()),
            ("conv.bias", self.conv_bias.clone()),
            ("pos_emb", self.pos_emb.clone()),
            ("ln1.gain", self.ln1_gain.clone()),
            ("ln1.bias", self.ln1_bias.clone()),
            ("attn.wq", self.wq.clone()),
            ("attn.bq", self.bq.clone()),
            ("attn.wk", self.wk.clone()),
            ("attn.bk", self.bk.clone()),
            ("attn.wv", self.wv.clone()),
            ("attn.bv", self.bv.clone()),
            ("attn.wo", self.wo.clone()),
            ("attn.bo", self.bo.clone()),
            ("ln2.gain", self.ln2_gain.clone()),
            ("ln2.bias", self.ln2_bias.clone()),
            ("ff1.weight", self.ff1_weight.clone()),
            ("ff1.bias", self.ff1_bias.clone()),
            ("ff2.weight", self.ff2_weight.clone()),
            ("ff2.bias", self.ff2_bias.clone()),
        ]
    }
}

/// All trainable weights of the pooler, stored flat in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolerParams<T = f32> {
    pub config: PoolerConfig,
    pub layout: ParamLayout,
    pub values: Vec<T>,
}

impl<T: Real> PoolerParams<T> {
    pub fn from_values(config: PoolerConfig, values: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self { config, layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Converts to another precision (e.g. `f64` for gradient checks).
    pub fn cast<U: Real>(&self) -> PoolerParams<U> {
        PoolerParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::from(*v).expect("finite")).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Deterministic initialization: Glorot-uniform weights, zero biases, unit
/// LayerNorm gains, and `N(0, 0.02^2)` position embeddings.
pub fn init_pooler(config: &PoolerConfig) -> Result<PoolerParams<f32>> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut values = vec![0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, h, k, f) = (config.input_dim, config.hidden_dim, config.conv_kernel, config.ff_dim());

    let mut glorot = |range: Range<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        for v in &mut values[range] {
            *v = dist.sample(rng);
        }
    };
    glorot(layout.conv_weight.clone(), d * k, h * k, &mut rng);
    glorot(layout.wq.clone(), h, h, &mut rng);
    glorot(layout.wk.clone(), h, h, &mut rng);
    glorot(layout.wv.clone(), h, h, &mut rng);
    glorot(layout.wo.clone(), h, h, &mut rng);
    glorot(layout.ff1_weight.clone(), h, f, &mut rng);
    glorot(layout.ff2_weight.clone(), f, h, &mut rng);

    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    for v in &mut values[layout.pos_emb.clone()] {
        *v = normal.sample(&mut rng);
    }
    for r in [&layout.ln_in_gain, &layout.ln1_gain, &layout.ln2_gain] {
        values[r.clone()].fill(1.0);
    }
    Ok(PoolerParams {
        config: config.clone(),
        layout,
        values,
    })
}
