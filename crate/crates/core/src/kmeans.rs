//! Lloyd's k-means with k-means++ seeding.
//!
//! Used for frame-level cluster targets and for the coarse quantizer of the
//! ANN index. Centroids are kept in `f64` while fitting; the returned
//! [`Centroids`] hold `f32` values.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurestore::FeatureStore;

pub const AWK_MAGIC: &[u8; 4] = b"AWK1";
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub values: Array2<f32>,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(x: ArrayView1<'_, f32>, c: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(c.iter()).map(|(&a, &b)| (a as f64 - b).powi(2)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(x: ArrayView1<'_, f32>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(data: ArrayView2<'_, f32>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    data.outer_iter()
        .into_par_iter()
        .map(|x| nearest(x, centroids))
        .unzip()
}

/// Moves one point into each empty cluster: the point farthest from its
/// centroid among clusters that keep at least one other member.
fn repair_empty(data: ArrayView2<'_, f32>, centroids: &mut Array2<f64>, labels: &mut [usize], dists: &mut [f64]) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, (&l, &d)) in labels.iter().zip(dists.iter()).enumerate() {
            if counts[l] > 1 && far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        counts[labels[i]] -= 1;
        counts[j] = 1;
        labels[i] = j;
        dists[i] = 0.0;
        for (c, &x) in centroids.row_mut(j).iter_mut().zip(data.row(i)) {
            *c = x as f64;
        }
    }
}

fn update_means(data: ArrayView2<'_, f32>, labels: &[usize], centroids: &mut Array2<f64>) {
    let (k, d) = centroids.dim();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (x, &l) in data.outer_iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(x.iter()) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            for (c, &s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                *c = s / n;
            }
        }
    }
}

fn kmeanspp(data: ArrayView2<'_, f32>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first).mapv(|v| v as f64));
    let mut closest: Vec<f64> = data.outer_iter().map(|x| sq_dist(x, centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &c) in closest.iter().enumerate() {
                acc += c;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&data.row(pick).mapv(|v| v as f64));
        for (c, x) in closest.iter_mut().zip(data.outer_iter()) {
            *c = c.min(sq_dist(x, centroids.row(j)));
        }
    }
    centroids
}

/// Fits `k` centroids with k-means++ seeding followed by Lloyd iterations.
///
/// Stops when the relative centroid shift `||C_new - C_old|| / ||C_old||`
/// drops below `tol` or after `max_iters` iterations.
pub fn fit_kmeans(data: ArrayView2<'_, f32>, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<Centroids> {
    check_fit_args(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeanspp(data, k, &mut rng);
    lloyd(data, init, max_iters, tol)
}

/// Lloyd iterations from explicit initial centroids.
pub fn fit_kmeans_from(data: ArrayView2<'_, f32>, init: ArrayView2<'_, f32>, max_iters: usize, tol: f64) -> Result<Centroids> {
    check_fit_args(data, init.nrows())?;
    if init.ncols() != data.ncols() {
        return Err(Error::InconsistentDimension {
            expected: data.ncols(),
            found: init.ncols(),
        });
    }
    lloyd(data, init.mapv(|v| v as f64), max_iters, tol)
}

fn check_fit_args(data: ArrayView2<'_, f32>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if data.nrows() < k {
        return Err(Error::invalid(format!("need at least k={k} points, got {}", data.nrows())));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    Ok(())
}

fn lloyd(data: ArrayView2<'_, f32>, mut centroids: Array2<f64>, max_iters: usize, tol: f64) -> Result<Centroids> {
    let (mut labels, mut dists) = assign_all(data, &centroids);
    repair_empty(data, &mut centroids, &mut labels, &mut dists);
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let previous = centroids.clone();
        update_means(data, &labels, &mut centroids);
        (labels, dists) = assign_all(data, &centroids);
        repair_empty(data, &mut centroids, &mut labels, &mut dists);
        let inertia: f64 = dists.iter().sum();
        let last = *history.last().expect("non-empty");
        assert!(
            inertia <= last * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased: {last} -> {inertia}"
        );
        history.push(inertia);
        let shift = (&centroids - &previous).mapv(|v| v * v).sum().sqrt();
        let scale = previous.mapv(|v| v * v).sum().sqrt();
        if shift <= tol * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(Centroids {
        values: centroids.mapv(|v| v as f32),
        inertia_history: history,
    })
}

/// Nearest-centroid label per frame (ties go to the lowest index).
pub fn assign(centroids: &Centroids, frames: ArrayView2<'_, f32>) -> Result<Vec<u32>> {
    if frames.ncols() != centroids.dim() {
        return Err(Error::InconsistentDimension {
            expected: centroids.dim(),
            found: frames.ncols(),
        });
    }
    let c = centroids.values.mapv(|v| v as f64);
    Ok(frames
        .outer_iter()
        .into_par_iter()
        .map(|x| nearest(x, &c).0 as u32)
        .collect())
}

/// Sum of squared distances of `frames` to their nearest centroid.
pub fn inertia(centroids: &Centroids, frames: ArrayView2<'_, f32>) -> Result<f64> {
    if frames.ncols() != centroids.dim() {
        return Err(Error::InconsistentDimension {
            expected: centroids.dim(),
            found: frames.ncols(),
        });
    }
    let c = centroids.values.mapv(|v| v as f64);
    Ok(frames.outer_iter().map(|x| nearest(x, &c).1).sum())
}

/// Uniformly samples `ceil(fraction * total_frames)` frames (at least
/// `min_frames`) across the store.
pub fn sample_frames(store: &FeatureStore, fraction: f64, min_frames: usize, seed: u64) -> Result<Array2<f32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("sample fraction {fraction} not in (0, 1]")));
    }
    let ids: Vec<&str> = store.utt_ids().collect();
    let lens: Vec<usize> = ids.iter().map(|u| store.num_frames(u)).collect::<Result<_>>()?;
    let total: usize = lens.iter().sum();
    let n = ((fraction * total as f64).ceil() as usize).max(min_frames).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();

    let mut out = Array2::zeros((n, store.dim()));
    let mut row = 0;
    let mut base = 0;
    let mut p = picks.iter().peekable();
    for (id, len) in ids.iter().zip(&lens) {
        if p.peek().is_some_and(|&&i| i < base + len) {
            let utt = store.utterance(id)?;
            while let Some(&&i) = p.peek() {
                if i >= base + len {
                    break;
                }
                out.row_mut(row).assign(&utt.frames.row(i - base));
                row += 1;
                p.next();
            }
        }
        base += len;
    }
    Ok(out)
}

/// Writes one line per utterance: `utt_id<TAB>label label ...`.
pub fn export_targets(store: &FeatureStore, centroids: &Centroids, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if centroids.dim() != store.dim() {
        return Err(Error::InconsistentDimension {
            expected: store.dim(),
            found: centroids.dim(),
        });
    }
    let mut out = String::new();
    for id in store.utt_ids() {
        let utt = store.utterance(id)?;
        let labels = assign(centroids, utt.frames.view())?;
        out.push_str(id);
        out.push('\t');
        for (i, l) in labels.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{l}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_centroids(centroids: &Centroids, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + centroids.values.len() * 4);
    buf.extend_from_slice(AWK_MAGIC);
    buf.extend_from_slice(&(centroids.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(centroids.dim() as u32).to_le_bytes());
    for v in centroids.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_centroids(path: impl AsRef<Path>) -> Result<Centroids> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != AWK_MAGIC {
        return Err(Error::UnrecognizedFormat(format!("{}: not a centroid file", path.display())));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + k * d * 4 {
        return Err(Error::TruncatedPayload("centroids".into()));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Centroids {
        values: Array2::from_shape_vec((k, d), values).expect("checked length"),
        inertia_history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn square() -> Array2<f32> {
        array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    }

    #[test]
    fn unit_square_symmetric_init() {
        let init = array![[0.0f32, 0.0], [0.0, 1.0]];
        let c = fit_kmeans_from(square().view(), init.view(), 100, 1e-4).unwrap();
        assert_eq!(c.final_inertia(), 1.0);
        let mut rows: Vec<Vec<f32>> = c.values.outer_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.5, 0.0], vec![0.5, 1.0]]);
    }

    #[test]
    fn unit_square_seeded_reaches_a_lloyd_fixed_point() {
        for seed in 0..20 {
            let c = fit_kmeans(square().view(), 2, 100, 1e-4, seed).unwrap();
            let i = c.final_inertia();
            // Either the optimal split (1.0) or the 3+1 split (4/3).
            assert!(i == 1.0 || (i - 4.0 / 3.0).abs() < 1e-12, "seed {seed}: {i}");
        }
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let data = array![[0.0f32, 1.0], [2.0, 3.0], [-1.0, 5.0]];
        let c = fit_kmeans(data.view(), 3, 10, 1e-4, 0).unwrap();
        assert_eq!(c.final_inertia(), 0.0);
        let labels = assign(&c, data.view()).unwrap();
        let mut sorted = labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn assign_rules() {
        let c = Centroids {
            values: array![[0.0f32, 0.0], [1.0, 1.0], [1.0, 1.0]],
            inertia_history: vec![],
        };
        assert_eq!(assign(&c, array![[1.0f32, 1.0], [0.5, 0.5], [0.1, 0.0]].view()).unwrap(), vec![1, 0, 0]);
        let same = Array2::from_elem((5, 2), 0.7f32);
        let l = assign(&c, same.view()).unwrap();
        assert!(l.iter().all(|&x| x == l[0]));
        assert!(assign(&c, Array2::<f32>::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn inertia_monotone_and_no_empty_clusters() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, 1.0).unwrap();
            let n = 50 + (seed as usize * 7) % 100;
            let data = Array2::from_shape_fn((n, 3), |_| normal.sample(&mut rng));
            let k = 2 + (seed as usize % 9);
            let c = fit_kmeans(data.view(), k, 50, 1e-6, seed).unwrap();
            assert!(c.inertia_history.windows(2).all(|w| w[1] <= w[0]));
            let labels = assign(&c, data.view()).unwrap();
            for j in 0..k as u32 {
                assert!(labels.contains(&j), "cluster {j} empty");
            }
            let reassigned = inertia(&c, data.view()).unwrap();
            assert!(reassigned <= c.final_inertia() * (1.0 + 1e-5));
        }
    }

    #[test]
    fn duplicates_still_fill_clusters() {
        let data = array![[1.0f32, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]];
        let c = fit_kmeans(data.view(), 3, 10, 1e-4, 9).unwrap();
        assert_eq!(c.k(), 3);
        assert!(fit_kmeans(data.view(), 5, 10, 1e-4, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((200, 4), |_| rng.random::<f32>());
        let a = fit_kmeans(data.view(), 8, 100, 1e-4, 1).unwrap();
        let b = fit_kmeans(data.view(), 8, 100, 1e-4, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.awk");
        let c = fit_kmeans(square().view(), 2, 10, 1e-4, 3).unwrap();
        save_centroids(&c, &p).unwrap();
        assert_eq!(load_centroids(&p).unwrap().values, c.values);
    }
}
