//! Nearest-neighbour pair mining baseline.
//!
//! Random segments are embedded by mean pooling and indexed in an inverted
//! file: a k-means coarse quantizer partitions the vectors, and a query only
//! scans the `nprobe` partitions whose centroids have the largest dot product
//! with it. Scores are raw dot products.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{PairSet, PairSetBuilder, Provenance};
use crate::error::{Error, Result};
use crate::featurestore::{FeatureStore, SegmentRef};
use crate::kmeans::{fit_kmeans, DEFAULT_MAX_ITERS, DEFAULT_TOL};

pub const KNN_KEY: &str = "knn";

/// Dot product with eight independent accumulators; the summation order is
/// fixed so every caller sees identical scores.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Optionally L2-normalizes rows so dot products become cosines.
pub fn prepare_vectors(vectors: ArrayView2<'_, f32>, cosine: bool) -> Array2<f32> {
    if !cosine {
        return vectors.to_owned();
    }
    let mut out = vectors.to_owned();
    for mut row in out.rows_mut() {
        let u = unit(row.as_slice().expect("standard layout"));
        row.assign(&ndarray::ArrayView1::from(&u));
    }
    out
}

/// Left-to-right random segments: draw a duration uniformly from the frame
/// counts lying within `[min_ms, max_ms]`, place the segment, skip
/// `min_gap_ms`, repeat until the utterance is exhausted.
pub fn sample_segments(store: &FeatureStore, min_ms: f64, max_ms: f64, min_gap_ms: f64, seed: u64) -> Result<Vec<SegmentRef>> {
    if !(min_ms > 0.0 && min_ms <= max_ms && min_gap_ms >= 0.0) {
        return Err(Error::invalid(format!("invalid segment bounds [{min_ms}, {max_ms}] gap {min_gap_ms}")));
    }
    let period = store.frame_period_ms() as f64;
    let snap = |x: f64| if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
    let min_frames = (snap(min_ms / period).ceil() as usize).max(1);
    let max_frames = snap(max_ms / period).floor() as usize;
    let gap = snap(min_gap_ms / period).ceil() as usize;
    if max_frames < min_frames {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in store.utt_ids() {
        let len = store.num_frames(id)?;
        let mut pos = 0;
        loop {
            let dur = rng.random_range(min_frames..=max_frames);
            if pos + dur > len {
                break;
            }
            out.push(SegmentRef::new(id, pos, pos + dur));
            pos += dur + gap;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub score: f32,
}

/// Heap entry ordered so the *worst* kept neighbour sits on top.
#[derive(Debug, Clone, Copy)]
struct Worst(Neighbor);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        // "greater" = worse: lower score, then higher id
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then(self.0.id.cmp(&other.0.id))
    }
}

/// Bounded top-k accumulator with `(score desc, id asc)` ranking.
struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, n: Neighbor) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Worst(n));
        } else if let Some(top) = self.heap.peek() {
            if Worst(n) < *top {
                self.heap.pop();
                self.heap.push(Worst(n));
            }
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        let mut v: Vec<Worst> = self.heap.into_vec();
        v.sort();
        v.into_iter().map(|w| w.0).collect()
    }
}

/// Inverted-file index over dot-product similarity.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    centroids: Array2<f32>,
    lists: Vec<Vec<u32>>,
    vectors: Array2<f32>,
    nprobe: usize,
}

impl AnnIndex {
    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::invalid(format!("nprobe {nprobe} not in [1, {}]", self.nlist())));
        }
        self.nprobe = nprobe;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        self.vectors.row(id).to_slice().expect("standard layout")
    }

    fn probe_lists(&self, query: &[f32]) -> Vec<usize> {
        let mut top = TopK::new(self.nprobe);
        for (j, c) in self.centroids.rows().into_iter().enumerate() {
            top.offer(Neighbor {
                id: j,
                score: dot(query, c.to_slice().expect("standard layout")),
            });
        }
        top.into_sorted().into_iter().map(|n| n.id).collect()
    }

    /// Top-`k` indexed vectors by dot product among the probed lists,
    /// optionally excluding one id (the query itself).
    pub fn search(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut top = TopK::new(k);
        for list in self.probe_lists(query) {
            for &id in &self.lists[list] {
                let id = id as usize;
                if Some(id) == exclude {
                    continue;
                }
                top.offer(Neighbor {
                    id,
                    score: dot(query, self.vector(id)),
                });
            }
        }
        top.into_sorted()
    }
}

/// Builds the inverted file: k-means (seeded) for `nlist` coarse centroids,
/// then each vector goes to the centroid with the largest dot product.
pub fn build_ann_index(vectors: ArrayView2<'_, f32>, nlist: usize, nprobe: usize, seed: u64) -> Result<AnnIndex> {
    if nlist == 0 || vectors.nrows() < nlist {
        return Err(Error::invalid(format!(
            "need at least nlist={nlist} vectors, got {}",
            vectors.nrows()
        )));
    }
    if nprobe == 0 || nprobe > nlist {
        return Err(Error::invalid(format!("nprobe {nprobe} not in [1, {nlist}]")));
    }
    let vectors = vectors.as_standard_layout().into_owned();
    let centroids = fit_kmeans(vectors.view(), nlist, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)?.values;
    let assignment: Vec<usize> = vectors
        .outer_iter()
        .into_par_iter()
        .map(|v| {
            let v = v.to_slice().expect("standard layout");
            let mut best = (0, f32::NEG_INFINITY);
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let s = dot(v, c.to_slice().expect("standard layout"));
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect();
    let mut lists = vec![Vec::new(); nlist];
    for (i, &j) in assignment.iter().enumerate() {
        lists[j].push(i as u32);
    }
    Ok(AnnIndex {
        centroids,
        lists,
        vectors,
        nprobe,
    })
}

/// For each indexed vector, its top-`k` approximate neighbours (itself
/// excluded).
pub fn ann_neighbors(index: &AnnIndex, k: usize) -> Vec<Vec<Neighbor>> {
    (0..index.len())
        .into_par_iter()
        .map(|i| index.search(index.vector(i), k, Some(i)))
        .collect()
}

fn pairs_from_neighbors(neighbors: &[Vec<Neighbor>], segments: &[SegmentRef]) -> PairSet {
    let mut builder = PairSetBuilder::new(Provenance::Knn);
    for (q, list) in neighbors.iter().enumerate() {
        for n in list {
            builder.push(segments[q].clone(), segments[n.id].clone(), KNN_KEY);
        }
    }
    builder.finish()
}

/// Positive pairs from approximate top-`k` neighbours of every indexed
/// segment. `segments[i]` must describe indexed vector `i`.
pub fn knn_pairs(index: &AnnIndex, segments: &[SegmentRef], k: usize) -> Result<PairSet> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if segments.len() != index.len() {
        return Err(Error::invalid("one segment per indexed vector required"));
    }
    Ok(pairs_from_neighbors(&ann_neighbors(index, k), segments))
}

/// Exhaustive top-`k` by dot product, ranked `(score desc, id asc)`.
/// `queries[q]` is excluded from its own result when `self_ids` maps it to an
/// indexed id.
pub fn exact_knn(vectors: ArrayView2<'_, f32>, queries: ArrayView2<'_, f32>, k: usize, self_ids: Option<&[usize]>) -> Vec<Vec<Neighbor>> {
    let vectors = vectors.as_standard_layout();
    let queries = queries.as_standard_layout();
    queries
        .outer_iter()
        .enumerate()
        .map(|(q, query)| {
            let query = query.to_slice().expect("standard layout");
            let skip = self_ids.map(|ids| ids[q]);
            let mut top = TopK::new(k);
            for (id, v) in vectors.outer_iter().enumerate() {
                if Some(id) == skip {
                    continue;
                }
                top.offer(Neighbor {
                    id,
                    score: dot(query, v.to_slice().expect("standard layout")),
                });
            }
            top.into_sorted()
        })
        .collect()
}

/// Exhaustive counterpart of [`knn_pairs`]: every vector queries all others.
pub fn exact_knn_pairs(vectors: ArrayView2<'_, f32>, segments: &[SegmentRef], k: usize) -> PairSet {
    let ids: Vec<usize> = (0..vectors.nrows()).collect();
    pairs_from_neighbors(&exact_knn(vectors, vectors, k, Some(&ids)), segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_vectors(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng))
    }

    fn segs(n: usize) -> Vec<SegmentRef> {
        (0..n).map(|i| SegmentRef::new(format!("u{i:05}"), 0, 4)).collect()
    }

    #[test]
    fn dot_matches_naive() {
        let v = random_vectors(2, 37, 1);
        let naive: f64 = v.row(0).iter().zip(v.row(1)).map(|(a, b)| *a as f64 * *b as f64).sum();
        let fast = dot(v.row(0).to_slice().unwrap(), v.row(1).to_slice().unwrap());
        assert!((naive - fast as f64).abs() < 1e-4);
    }

    #[test]
    fn single_list_and_full_probe_are_exact() {
        let v = random_vectors(120, 8, 2);
        let exact = exact_knn(v.view(), v.view(), 5, Some(&(0..120).collect::<Vec<_>>()));
        let one = build_ann_index(v.view(), 1, 1, 0).unwrap();
        assert_eq!(ann_neighbors(&one, 5), exact);
        let full = build_ann_index(v.view(), 7, 7, 0).unwrap();
        assert_eq!(ann_neighbors(&full, 5), exact);
        assert_eq!(full.list_sizes().iter().sum::<usize>(), 120);
    }

    #[test]
    fn identical_vectors_give_one_pair() {
        let v = Array2::from_shape_vec((2, 3), vec![1.0f32, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let idx = build_ann_index(v.view(), 1, 1, 0).unwrap();
        assert_eq!(knn_pairs(&idx, &segs(2), 1).unwrap().len(), 1);
    }

    #[test]
    fn large_k_gives_all_pairs() {
        let v = random_vectors(9, 4, 3);
        let idx = build_ann_index(v.view(), 3, 3, 1).unwrap();
        let p = knn_pairs(&idx, &segs(9), 20).unwrap();
        assert_eq!(p.len(), 36);
        assert_eq!(p.to_set(), exact_knn_pairs(v.view(), &segs(9), 20).to_set());
    }

    #[test]
    fn exact_knn_conventions() {
        let v = random_vectors(10, 4, 4);
        let res = exact_knn(v.view(), v.slice(ndarray::s![3..4, ..]), 1, None);
        // a vector's self-similarity is not necessarily maximal under dot
        // product, so compare against a brute-force argmax
        let q = v.row(3).to_vec();
        let best = (0..10)
            .max_by(|&a, &b| {
                dot(&q, v.row(a).to_slice().unwrap())
                    .total_cmp(&dot(&q, v.row(b).to_slice().unwrap()))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(res[0][0].id, best);
        assert!(exact_knn(v.view(), v.view(), 0, None).iter().all(Vec::is_empty));
        let unit = prepare_vectors(v.view(), true);
        let res = exact_knn(unit.view(), unit.slice(ndarray::s![3..4, ..]), 1, None);
        assert_eq!(res[0][0].id, 3);
    }

    #[test]
    fn ties_rank_by_id() {
        let v = Array2::from_shape_vec((3, 2), vec![1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let res = exact_knn(v.view(), v.slice(ndarray::s![0..1, ..]), 3, None);
        assert_eq!(res[0].iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn nlist_larger_than_data_fails() {
        let v = random_vectors(3, 2, 5);
        assert!(build_ann_index(v.view(), 4, 1, 0).is_err());
        assert!(build_ann_index(v.view(), 2, 3, 0).is_err());
    }
}
