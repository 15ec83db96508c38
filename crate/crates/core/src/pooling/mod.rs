//! Pooling functions mapping a frame sequence to a fixed-size embedding.
//!
//! [`mean_pool`] averages frames. [`PoolerParams`] holds a small learned
//! pooling network (input LayerNorm, strided 1D convolution, learned
//! position embeddings, one pre-norm transformer layer, max over time)
//! whose backward pass is derived by hand in [`network`].

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, Deref};

use ndarray::{ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod network;
pub mod params;

pub use checkpoint::{load_pooler, save_pooler};
pub use network::{ForwardTape, ParamGrads};
pub use params::{init_pooler, ParamLayout, PoolerConfig, PoolerParams};

/// Floating-point type the pooling network can run in. Training uses `f32`;
/// gradient verification runs the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + AddAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A fixed-dimensional acoustic word embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AweVector(pub Vec<f32>);

impl AweVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for AweVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl From<Vec<f32>> for AweVector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

/// Component-wise mean over frames.
pub fn mean_pool(frames: ArrayView2<'_, f32>) -> Result<AweVector> {
    let t = frames.nrows();
    if t == 0 {
        return Err(Error::invalid("cannot pool an empty segment"));
    }
    let mut acc = vec![0f64; frames.ncols()];
    for row in frames.rows() {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v as f64;
        }
    }
    Ok(AweVector(acc.into_iter().map(|a| (a / t as f64) as f32).collect()))
}
