//! Same-different word discrimination: every pair of test segments is
//! ranked by cosine similarity and scored with average precision.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;

use crate::contrastive::cosine;
use crate::error::{Error, Result};
use crate::featurestore::{FeatureStore, SegmentRef, WordSegment};
use crate::pooling::{mean_pool, AweVector, PoolerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub awe: AweVector,
    pub word: String,
    pub speaker_id: String,
    pub seg: SegmentRef,
}

#[derive(Debug, Clone, Copy)]
pub enum Pooling<'a> {
    Mean,
    Learned(&'a PoolerParams<f32>),
}

#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
    /// Segments the learned pooler could not embed (too short or too long).
    pub dropped: usize,
}

/// Embeds every word segment with the chosen pooling.
pub fn collect_eval_awes(store: &FeatureStore, segments: &[WordSegment], pooling: Pooling<'_>) -> Result<EvalSet> {
    let resolved: Vec<SegmentRef> = segments
        .iter()
        .map(|w| store.resolve(&w.utt_id, w.start_s, w.end_s))
        .collect::<Result<_>>()?;
    let awes: Vec<Option<AweVector>> = resolved
        .par_iter()
        .map(|seg| {
            let frames = store.get_frames(seg)?;
            match pooling {
                Pooling::Mean => mean_pool(frames.view()).map(Some),
                Pooling::Learned(p) => {
                    if seg.len() < p.config.conv_kernel || seg.len() > p.config.max_input_frames() {
                        Ok(None)
                    } else {
                        p.embed(frames.view()).map(Some)
                    }
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut out = EvalSet::default();
    for ((w, seg), awe) in segments.iter().zip(resolved).zip(awes) {
        match awe {
            Some(awe) => {
                if !awe.is_finite() {
                    return Err(Error::NonFinite(format!("embedding of {}", seg.utt_id)));
                }
                out.items.push(EvalItem {
                    awe,
                    word: w.word.clone(),
                    speaker_id: w.speaker_id.clone(),
                    seg,
                })
            }
            None => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::warn!("{} evaluation segments dropped: outside the pooler's length range", out.dropped);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EvalOptions {
    pub cross_speaker_only: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// Area under the ROC curve over the same pair list, ties counted as half.
    pub auc_roc: f64,
    pub n_items: usize,
    pub n_pairs: usize,
    pub n_positive_pairs: usize,
    pub options: EvalOptions,
}

impl EvalReport {
    /// Machine-readable summary line.
    pub fn summary_line(&self) -> String {
        format!(
            "map={} n_items={} n_pairs={} n_pos={}",
            self.map, self.n_items, self.n_pairs, self.n_positive_pairs
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "same-different evaluation")?;
        writeln!(f, "  items            {}", self.n_items)?;
        writeln!(f, "  pairs            {}", self.n_pairs)?;
        writeln!(f, "  positive pairs   {}", self.n_positive_pairs)?;
        writeln!(f, "  cross-speaker    {}", self.options.cross_speaker_only)?;
        writeln!(f, "  MAP              {:.4}", self.map)?;
        write!(f, "  AUC-ROC          {:.4}", self.auc_roc)
    }
}

#[derive(Debug, Clone, Copy)]
struct ScoredPair {
    score: f64,
    i: u32,
    j: u32,
    positive: bool,
}

fn rank_order(a: &ScoredPair, b: &ScoredPair) -> Ordering {
    b.score.total_cmp(&a.score).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j))
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Same arithmetic as [`cosine`] with the norms hoisted out of the pair loop.
fn pair_cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na < crate::contrastive::NORM_FLOOR || nb < crate::contrastive::NORM_FLOOR {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (d / (na * nb)).clamp(-1.0, 1.0) + 0.0
}

fn check_items(items: &[EvalItem]) -> Result<()> {
    if items.len() < 2 {
        return Err(Error::invalid("same-different evaluation needs at least 2 items"));
    }
    let dim = items[0].awe.dim();
    for it in items {
        if it.awe.dim() != dim {
            return Err(Error::InconsistentDimension {
                expected: dim,
                found: it.awe.dim(),
            });
        }
        if !it.awe.is_finite() {
            return Err(Error::NonFinite(format!("embedding of '{}'", it.word)));
        }
    }
    Ok(())
}

/// Mean average precision of the ranked list of all item pairs.
///
/// Pairs are sorted by cosine descending, ties broken by `(i, j)`
/// ascending; AP averages the precision at the rank of each positive pair.
pub fn samediff_map(items: &[EvalItem], options: EvalOptions) -> Result<EvalReport> {
    check_items(items)?;
    let norms: Vec<f64> = items.iter().map(|it| l2(&it.awe)).collect();
    let mut pairs: Vec<ScoredPair> = (0..items.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let norms = &norms;
            (i + 1..items.len()).filter_map(move |j| {
                let (a, b) = (&items[i], &items[j]);
                if options.cross_speaker_only && a.speaker_id == b.speaker_id {
                    return None;
                }
                Some(ScoredPair {
                    score: pair_cosine(&a.awe, &b.awe, norms[i], norms[j]),
                    i: i as u32,
                    j: j as u32,
                    positive: a.word == b.word,
                })
            })
        })
        .collect();
    pairs.par_sort_unstable_by(rank_order);

    let n_pos = pairs.iter().filter(|p| p.positive).count();
    if n_pos == 0 {
        return Err(Error::NoPositivePairs);
    }
    Ok(EvalReport {
        map: average_precision(pairs.iter().map(|p| p.positive)),
        auc_roc: auc_roc(&pairs, n_pos),
        n_items: items.len(),
        n_pairs: pairs.len(),
        n_positive_pairs: n_pos,
        options,
    })
}

/// Double-double accumulator; keeps the AP sum accurate to well below one
/// ulp so the returned mean is the correctly rounded value in practice.
#[derive(Default, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn add(&mut self, x: Dd) {
        let s = self.hi + x.hi;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (x.hi - bb);
        let lo = err + self.lo + x.lo;
        self.hi = s + lo;
        self.lo = lo - (self.hi - s);
    }

    fn quotient(num: f64, den: f64) -> Dd {
        let q = num / den;
        Dd {
            hi: q,
            lo: (-q).mul_add(den, num) / den,
        }
    }

    fn div_to_f64(self, den: f64) -> f64 {
        let q = self.hi / den;
        let r = (-q).mul_add(den, self.hi) + self.lo;
        q + r / den
    }
}

/// Average precision of a ranked list of labels; 0 when nothing is positive.
pub fn average_precision(ranked: impl IntoIterator<Item = bool>) -> f64 {
    let mut hits = 0usize;
    let mut precision_sum = Dd::default();
    for (rank, positive) in ranked.into_iter().enumerate() {
        if positive {
            hits += 1;
            precision_sum.add(Dd::quotient(hits as f64, (rank + 1) as f64));
        }
    }
    if hits == 0 {
        0.0
    } else {
        precision_sum.div_to_f64(hits as f64)
    }
}

/// `pairs` must be sorted by score descending.
fn auc_roc(pairs: &[ScoredPair], n_pos: usize) -> f64 {
    let n_neg = pairs.len() - n_pos;
    if n_neg == 0 {
        return 1.0;
    }
    // for every negative, count positives scored above it (ties count half)
    let mut wins = 0.0;
    let mut pos_above = 0usize;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start;
        while end < pairs.len() && pairs[end].score == pairs[start].score {
            end += 1;
        }
        let group = &pairs[start..end];
        let gp = group.iter().filter(|p| p.positive).count();
        let gn = group.len() - gp;
        wins += gn as f64 * (pos_above as f64 + 0.5 * gp as f64);
        pos_above += gp;
        start = end;
    }
    wins / (n_pos as f64 * n_neg as f64)
}

/// Naive reference for [`samediff_map`] without the cross-speaker option.
pub fn brute_force_map(items: &[EvalItem]) -> Result<f64> {
    check_items(items)?;
    let mut list = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let s = cosine(&items[i].awe, &items[j].awe)?;
            list.push((s, i, j, items[i].word == items[j].word));
        }
    }
    list.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut precisions = Vec::new();
    for r in 0..list.len() {
        if list[r].3 {
            let hits = list[..=r].iter().filter(|x| x.3).count();
            precisions.push(hits as f64 / (r + 1) as f64);
        }
    }
    if precisions.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok(precisions.iter().sum::<f64>() / precisions.len() as f64)
}
