//! Forward and hand-derived backward pass of the learned pooler.
//!
//! ```text
//! frames (T x D)
//!   -> LayerNorm over D
//!   -> Conv1d(kernel K, stride S, no padding)            (L x H)
//!   -> + position embeddings[0..L]
//!   -> x + MHSA(LN1(x))                                  pre-norm attention
//!   -> x + FF(LN2(x)),  FF = W2 GELU(W1 . + b1) + b2     width 4H
//!   -> max over time                                     (H)
//! ```
//!
//! GELU uses the tanh approximation. Max-pool gradients go to the first
//! frame attaining the maximum.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Zip};

use super::{AweVector, PoolerConfig, PoolerParams, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn mat<'a, T>(v: &'a [T], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((rows, cols), &v[r.clone()]).expect("layout matches config")
}

fn mat_mut<'a, T>(v: &'a mut [T], r: &Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'a, T> {
    ArrayViewMut2::from_shape((rows, cols), &mut v[r.clone()]).expect("layout matches config")
}

fn vec1<'a, T>(v: &'a [T], r: &Range<usize>) -> ArrayView1<'a, T> {
    ArrayView1::from(&v[r.clone()])
}

fn vec1_mut<'a, T>(v: &'a mut [T], r: &Range<usize>) -> ArrayViewMut1<'a, T> {
    ArrayViewMut1::from(&mut v[r.clone()])
}

/// `c += a . b`
fn gemm_acc<T: Real>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>, c: &mut ArrayViewMut2<'_, T>) {
    general_mat_mul(T::one(), a, b, T::one(), c);
}

fn add_row_sums<T: Real>(x: &Array2<T>, mut out: ArrayViewMut1<'_, T>) {
    for row in x.rows() {
        out += &row;
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Real>(x: ArrayView2<'_, T>, gain: ArrayView1<'_, T>, bias: ArrayView1<'_, T>) -> (Array2<T>, NormCache<T>) {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = &xhat * &gain + &bias;
    (y, NormCache { xhat, rstd })
}

/// Accumulates gain/bias gradients; returns the input gradient when asked.
fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    gain: ArrayView1<'_, T>,
    mut dgain: ArrayViewMut1<'_, T>,
    mut dbias: ArrayViewMut1<'_, T>,
    want_input: bool,
) -> Option<Array2<T>> {
    for (dyr, xr) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        Zip::from(&mut dgain).and(&dyr).and(&xr).for_each(|g, &d, &x| *g += d * x);
        dbias += &dyr;
    }
    if !want_input {
        return None;
    }
    let n = T::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let xr = cache.xhat.row(i);
        let dxhat = &dy.row(i) * &gain;
        let m1 = dxhat.sum() / n;
        let m2 = dxhat.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        let r = cache.rstd[i];
        for (o, (&g, &x)) in dx.row_mut(i).iter_mut().zip(dxhat.iter().zip(xr.iter())) {
            *o = r * (g - m1 - x * m2);
        }
    }
    Some(dx)
}

fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Intermediates of one forward pass, consumed by [`PoolerParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    config: PoolerConfig,
    n_params: usize,
    input_frames: usize,
    seq_len: usize,
    norm_in: NormCache<T>,
    patches: Array2<T>,
    norm1: NormCache<T>,
    attn_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    context: Array2<T>,
    norm2: NormCache<T>,
    ff_in: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
    argmax: Vec<usize>,
    /// Frame-level outputs of the transformer layer, before max pooling.
    pub frame_outputs: Array2<T>,
}

impl<T> ForwardTape<T> {
    /// Length of the sequence after the convolution.
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Frame index selected by the max pool for each output dimension.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Gradients laid out exactly like [`PoolerParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub values: Vec<T>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.values {
            *a = *a * factor;
        }
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

impl<T: Real> PoolerParams<T> {
    /// Runs the network on one segment, returning the embedding and the tape
    /// needed for the backward pass.
    pub fn forward(&self, frames: ArrayView2<'_, T>) -> Result<(Vec<T>, ForwardTape<T>)> {
        let cfg = &self.config;
        let l = &self.layout;
        let w = &self.values;
        let (d, h, kk, stride) = (cfg.input_dim, cfg.hidden_dim, cfg.conv_kernel, cfg.conv_stride);
        let n_frames = frames.nrows();
        if frames.ncols() != d {
            return Err(Error::InconsistentDimension {
                expected: d,
                found: frames.ncols(),
            });
        }
        let seq = cfg.conv_output_len(n_frames).ok_or_else(|| {
            Error::invalid(format!("segment of {n_frames} frames is shorter than the conv kernel ({kk})"))
        })?;
        if seq > cfg.max_positions {
            return Err(Error::invalid(format!(
                "overlong segment: {n_frames} frames give {seq} positions (max {})",
                cfg.max_positions
            )));
        }

        let (normed, norm_in) = layer_norm(frames, vec1(w, &l.ln_in_gain), vec1(w, &l.ln_in_bias));

        // im2col: patch column index is d * K + k, matching the (H, D, K) weight.
        let mut patches = Array2::zeros((seq, d * kk));
        for p in 0..seq {
            let mut row = patches.row_mut(p);
            for k in 0..kk {
                let frame = normed.row(p * stride + k);
                for c in 0..d {
                    row[c * kk + k] = frame[c];
                }
            }
        }
        let conv_w = mat(w, &l.conv_weight, h, d * kk);
        let mut x = patches.dot(&conv_w.t()) + &vec1(w, &l.conv_bias);
        x += &mat(w, &l.pos_emb, cfg.max_positions, h).slice(s![..seq, ..]);

        // attention block
        let (attn_in, norm1) = layer_norm(x.view(), vec1(w, &l.ln1_gain), vec1(w, &l.ln1_bias));
        let q = attn_in.dot(&mat(w, &l.wq, h, h)) + &vec1(w, &l.bq);
        let k = attn_in.dot(&mat(w, &l.wk, h, h)) + &vec1(w, &l.bk);
        let v = attn_in.dot(&mat(w, &l.wv, h, h)) + &vec1(w, &l.bv);
        let dh = cfg.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut context = Array2::zeros((seq, h));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in p.rows_mut() {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                let mut z = T::zero();
                for e in row.iter_mut() {
                    *e = (*e * scale - m).exp();
                    z += *e;
                }
                row.mapv_inplace(|e| e / z);
            }
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        x = x + context.dot(&mat(w, &l.wo, h, h)) + &vec1(w, &l.bo);

        // feed-forward block
        let f = cfg.ff_dim();
        let (ff_in, norm2) = layer_norm(x.view(), vec1(w, &l.ln2_gain), vec1(w, &l.ln2_bias));
        let pre_act = ff_in.dot(&mat(w, &l.ff1_weight, h, f)) + &vec1(w, &l.ff1_bias);
        let act = pre_act.mapv(gelu);
        x = x + act.dot(&mat(w, &l.ff2_weight, f, h)) + &vec1(w, &l.ff2_bias);

        let mut out = Vec::with_capacity(h);
        let mut argmax = Vec::with_capacity(h);
        for col in x.columns() {
            let (mut best, mut at) = (col[0], 0);
            for (i, &v) in col.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            out.push(best);
            argmax.push(at);
        }

        let tape = ForwardTape {
            config: cfg.clone(),
            n_params: self.values.len(),
            input_frames: n_frames,
            seq_len: seq,
            norm_in,
            patches,
            norm1,
            attn_in,
            q,
            k,
            v,
            probs,
            context,
            norm2,
            ff_in,
            pre_act,
            act,
            argmax,
            frame_outputs: x,
        };
        Ok((out, tape))
    }

    /// Gradient of `dot(embedding, grad_out)` with respect to every parameter.
    pub fn backward(&self, tape: &ForwardTape<T>, grad_out: &[T]) -> Result<ParamGrads<T>> {
        let mut grads = ParamGrads::zeros(self.values.len());
        self.backward_into(tape, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but adds into `grads`.
    pub fn backward_into(&self, tape: &ForwardTape<T>, grad_out: &[T], grads: &mut ParamGrads<T>) -> Result<()> {
        let cfg = &self.config;
        if tape.config != *cfg || tape.n_params != self.values.len() || grads.values.len() != self.values.len() {
            return Err(Error::invalid("tape/params mismatch"));
        }
        if grad_out.len() != cfg.hidden_dim {
            return Err(Error::InconsistentDimension {
                expected: cfg.hidden_dim,
                found: grad_out.len(),
            });
        }
        let l = &self.layout;
        let w = &self.values;
        let g = &mut grads.values;
        let (d, h, kk, stride, f) = (cfg.input_dim, cfg.hidden_dim, cfg.conv_kernel, cfg.conv_stride, cfg.ff_dim());
        let seq = tape.seq_len;

        let mut dx = Array2::zeros((seq, h));
        for (j, (&at, &go)) in tape.argmax.iter().zip(grad_out).enumerate() {
            dx[[at, j]] = go;
        }

        // feed-forward block
        gemm_acc(&tape.act.t(), &dx.view(), &mut mat_mut(g, &l.ff2_weight, f, h));
        add_row_sums(&dx, vec1_mut(g, &l.ff2_bias));
        let mut d_pre = dx.dot(&mat(w, &l.ff2_weight, f, h).t());
        Zip::from(&mut d_pre).and(&tape.pre_act).for_each(|dv, &u| *dv = *dv * gelu_grad(u));
        gemm_acc(&tape.ff_in.t(), &d_pre.view(), &mut mat_mut(g, &l.ff1_weight, h, f));
        add_row_sums(&d_pre, vec1_mut(g, &l.ff1_bias));
        let d_ff_in = d_pre.dot(&mat(w, &l.ff1_weight, h, f).t());
        let (gain2, bias2) = split_pair(g, &l.ln2_gain, &l.ln2_bias);
        dx += &layer_norm_backward(&d_ff_in, &tape.norm2, vec1(w, &l.ln2_gain), gain2, bias2, true).expect("input grad");

        // attention block
        gemm_acc(&tape.context.t(), &dx.view(), &mut mat_mut(g, &l.wo, h, h));
        add_row_sums(&dx, vec1_mut(g, &l.bo));
        let d_context = dx.dot(&mat(w, &l.wo, h, h).t());
        let dh = cfg.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Array2::zeros((seq, h));
        let mut dk = Array2::zeros((seq, h));
        let mut dv = Array2::zeros((seq, h));
        for (head, p) in tape.probs.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dctx = d_context.slice(cols);
            let mut dp = dctx.dot(&tape.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            for (mut dr, pr) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = dr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut dr).and(&pr).for_each(|x, &pv| *x = pv * (*x - dot) * scale);
            }
            dq.slice_mut(cols).assign(&dp.dot(&tape.k.slice(cols)));
            dk.slice_mut(cols).assign(&dp.t().dot(&tape.q.slice(cols)));
        }
        let a_t = tape.attn_in.t();
        gemm_acc(&a_t, &dq.view(), &mut mat_mut(g, &l.wq, h, h));
        gemm_acc(&a_t, &dk.view(), &mut mat_mut(g, &l.wk, h, h));
        gemm_acc(&a_t, &dv.view(), &mut mat_mut(g, &l.wv, h, h));
        add_row_sums(&dq, vec1_mut(g, &l.bq));
        add_row_sums(&dk, vec1_mut(g, &l.bk));
        add_row_sums(&dv, vec1_mut(g, &l.bv));
        let mut d_attn_in = dq.dot(&mat(w, &l.wq, h, h).t());
        gemm_acc(&dk.view(), &mat(w, &l.wk, h, h).t(), &mut d_attn_in.view_mut());
        gemm_acc(&dv.view(), &mat(w, &l.wv, h, h).t(), &mut d_attn_in.view_mut());
        let (gain1, bias1) = split_pair(g, &l.ln1_gain, &l.ln1_bias);
        dx += &layer_norm_backward(&d_attn_in, &tape.norm1, vec1(w, &l.ln1_gain), gain1, bias1, true).expect("input grad");

        // position embeddings and convolution
        let mut dpos = mat_mut(g, &l.pos_emb, cfg.max_positions, h);
        dpos.slice_mut(s![..seq, ..]).zip_mut_with(&dx, |a, &b| *a += b);
        add_row_sums(&dx, vec1_mut(g, &l.conv_bias));
        gemm_acc(&dx.t(), &tape.patches.view(), &mut mat_mut(g, &l.conv_weight, h, d * kk));
        let d_patches = dx.dot(&mat(w, &l.conv_weight, h, d * kk));
        let mut d_normed = Array2::zeros((tape.input_frames, d));
        for p in 0..seq {
            let row = d_patches.row(p);
            for k in 0..kk {
                let mut frame = d_normed.row_mut(p * stride + k);
                for c in 0..d {
                    frame[c] += row[c * kk + k];
                }
            }
        }
        let (gain0, bias0) = split_pair(g, &l.ln_in_gain, &l.ln_in_bias);
        layer_norm_backward(&d_normed, &tape.norm_in, vec1(w, &l.ln_in_gain), gain0, bias0, false);
        Ok(())
    }
}

/// Mutable views of two adjacent tensors (gain directly followed by bias).
fn split_pair<'a, T>(g: &'a mut [T], gain: &Range<usize>, bias: &Range<usize>) -> (ArrayViewMut1<'a, T>, ArrayViewMut1<'a, T>) {
    debug_assert_eq!(gain.end, bias.start);
    let (a, b) = g[gain.start..bias.end].split_at_mut(gain.len());
    (ArrayViewMut1::from(a), ArrayViewMut1::from(b))
}

impl PoolerParams<f32> {
    /// Embeds one segment with the learned pooler.
    pub fn embed(&self, frames: ArrayView2<'_, f32>) -> Result<AweVector> {
        let (out, _) = self.forward(frames)?;
        Ok(AweVector(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::init_pooler;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PoolerConfig {
        PoolerConfig {
            input_dim: 5,
            hidden_dim: 8,
            conv_kernel: 2,
            conv_stride: 1,
            n_heads: 2,
            max_positions: 6,
            seed: 3,
        }
    }

    fn frames(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let cfg = PoolerConfig {
            input_dim: 768,
            max_positions: 16,
            ..PoolerConfig::default()
        };
        let p = init_pooler(&cfg).unwrap();
        let x = frames(25, 768, 1).mapv(|v| v as f32);
        let (out, tape) = p.forward(x.view()).unwrap();
        assert_eq!(out.len(), 256);
        assert_eq!(tape.seq_len(), 11);
        assert!(p.forward(x.slice(s![..3, ..])).is_err());
        let long = frames(40, 768, 2).mapv(|v| v as f32);
        assert!(p.forward(long.view()).unwrap_err().to_string().contains("overlong"));
    }

    #[test]
    fn max_pool_dominates_frame_outputs() {
        let p = init_pooler(&cfg()).unwrap().cast::<f64>();
        let (out, tape) = p.forward(frames(6, 5, 4).view()).unwrap();
        for (j, col) in tape.frame_outputs.columns().into_iter().enumerate() {
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out[j], m);
            assert_eq!(col[tape.argmax()[j]], m);
        }
    }

    #[test]
    fn permuted_input_keeps_dimension() {
        let p = init_pooler(&cfg()).unwrap().cast::<f64>();
        let x = frames(5, 5, 9);
        let rev = x.slice(s![..;-1, ..]).to_owned();
        assert_eq!(p.forward(rev.view()).unwrap().0.len(), p.forward(x.view()).unwrap().0.len());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = init_pooler(&cfg()).unwrap();
        let x = frames(6, 5, 5).mapv(|v| v as f32);
        assert_eq!(p.forward(x.view()).unwrap().0, p.forward(x.view()).unwrap().0);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = frames(4, 7, 8).mapv(|v| 3.0 * v + 2.0);
        let ones = Array1::ones(7);
        let zeros = Array1::zeros(7);
        let (y, _) = layer_norm(x.view(), ones.view(), zeros.view());
        for row in y.rows() {
            let mean = row.sum() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_linearity() {
        let p = init_pooler(&cfg()).unwrap().cast::<f64>();
        let (_, tape) = p.forward(frames(6, 5, 6).view()).unwrap();
        let zero = p.backward(&tape, &[0.0; 8]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let go: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 0.8).collect();
        let twice: Vec<f64> = go.iter().map(|v| 2.0 * v).collect();
        let g1 = p.backward(&tape, &go).unwrap();
        let g2 = p.backward(&tape, &twice).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let p = init_pooler(&cfg()).unwrap().cast::<f64>();
        let (_, tape) = p.forward(frames(6, 5, 6).view()).unwrap();
        let other = init_pooler(&PoolerConfig { hidden_dim: 4, ..cfg() }).unwrap().cast::<f64>();
        assert!(other.backward(&tape, &[0.0; 4]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
