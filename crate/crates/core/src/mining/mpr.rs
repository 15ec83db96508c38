//! Phone n-gram pair mining.
//!
//! Every contiguous run of `n_min..=n_max` non-silence phones becomes an
//! occurrence keyed by its phone labels joined with `|`. Occurrences sharing
//! a key are positive pairs. Mining groups by key in one pass, so its cost is
//! linear in occurrences plus emitted pairs.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;

use super::{PairIdx, PairSet, PairSetBuilder, Provenance};
use crate::error::{Error, Result};
use crate::featurestore::{seconds_to_segment, PhoneAlignment, SegmentRef, DEFAULT_SILENCE_LABELS};
use crate::rng::{rng_for, stable_hash};

pub const KEY_SEPARATOR: char = '|';

#[derive(Debug, Clone, PartialEq)]
pub struct NgramConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub silence_labels: Vec<String>,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 5,
            silence_labels: DEFAULT_SILENCE_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramOccurrence {
    pub seg: SegmentRef,
    pub key: String,
    pub n: usize,
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// All phone n-grams of one utterance. Silence labels split the phone
/// sequence into runs; n-grams never cross a run boundary.
pub fn extract_ngrams(alignment: &PhoneAlignment, cfg: &NgramConfig, frame_period_ms: f32) -> Result<Vec<NgramOccurrence>> {
    if cfg.n_min == 0 || cfg.n_max < cfg.n_min {
        return Err(Error::invalid(format!("invalid n-gram range [{}, {}]", cfg.n_min, cfg.n_max)));
    }
    let silence: HashSet<&str> = cfg.silence_labels.iter().map(String::as_str).collect();
    let entries = &alignment.entries;
    let mut out = Vec::new();
    let mut run_start = 0;
    for end in 0..=entries.len() {
        let boundary = end == entries.len() || silence.contains(entries[end].phone.as_str());
        if !boundary {
            continue;
        }
        let run = &entries[run_start..end];
        for n in cfg.n_min..=cfg.n_max.min(run.len()) {
            for w in run.windows(n) {
                let (start_s, end_s) = (w[0].start_s, w[n - 1].end_s);
                let (s, e) = seconds_to_segment(start_s, end_s, frame_period_ms)?;
                let mut key = String::with_capacity(4 * n);
                for (i, p) in w.iter().enumerate() {
                    if i > 0 {
                        key.push(KEY_SEPARATOR);
                    }
                    key.push_str(&p.phone);
                }
                out.push(NgramOccurrence {
                    seg: SegmentRef::new(alignment.utt_id.as_str(), s, e),
                    key,
                    n,
                    speaker_id: alignment.speaker_id.clone(),
                    start_s,
                    end_s,
                });
            }
        }
        run_start = end + 1;
    }
    Ok(out)
}

/// Extracts n-grams from every alignment.
pub fn extract_all(alignments: &[PhoneAlignment], cfg: &NgramConfig, frame_period_ms: f32) -> Result<Vec<NgramOccurrence>> {
    let mut out = Vec::new();
    for a in alignments {
        out.extend(extract_ngrams(a, cfg, frame_period_ms)?);
    }
    Ok(out)
}

/// Occurrences grouped by key. Keys are sorted; each group lists occurrence
/// indices in segment order with duplicates (same key and segment) removed.
#[derive(Debug, Clone)]
pub struct NgramIndex {
    occurrences: Vec<NgramOccurrence>,
    keys: Vec<String>,
    groups: Vec<Vec<u32>>,
}

impl NgramIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn occurrences(&self) -> &[NgramOccurrence] {
        &self.occurrences
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Occurrences sharing `key`, in segment order.
    pub fn get(&self, key: &str) -> Option<impl Iterator<Item = &NgramOccurrence> + '_> {
        let i = self.keys.binary_search_by(|k| k.as_str().cmp(key)).ok()?;
        Some(self.groups[i].iter().map(|&o| &self.occurrences[o as usize]))
    }

    pub fn group_sizes(&self) -> impl Iterator<Item = (&str, usize)> + '_ {
        self.keys.iter().map(String::as_str).zip(self.groups.iter().map(Vec::len))
    }
}

pub fn index_ngrams(occurrences: Vec<NgramOccurrence>) -> NgramIndex {
    let mut by_key: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for (i, o) in occurrences.iter().enumerate() {
        by_key.entry(o.key.as_str()).or_default().push(i as u32);
    }
    let mut keys = Vec::with_capacity(by_key.len());
    let mut groups = Vec::with_capacity(by_key.len());
    for (k, mut g) in by_key {
        g.sort_by(|&a, &b| occurrences[a as usize].seg.cmp(&occurrences[b as usize].seg));
        g.dedup_by(|a, b| occurrences[*a as usize].seg == occurrences[*b as usize].seg);
        keys.push(k.to_owned());
        groups.push(g);
    }
    NgramIndex {
        occurrences,
        keys,
        groups,
    }
}

/// Enumerates all unordered same-key pairs.
///
/// With `max_instances_per_type > 0`, keys with more occurrences are first
/// subsampled uniformly without replacement to that many (seeded per key).
/// With `exclude_overlap`, pairs whose segments share frames of the same
/// utterance are dropped.
pub fn mine_pairs(index: &NgramIndex, max_instances_per_type: usize, seed: u64, exclude_overlap: bool) -> Result<PairSet> {
    if max_instances_per_type == 1 {
        return Err(Error::invalid("max_instances_per_type must be 0 (unlimited) or at least 2"));
    }
    let segments: Vec<SegmentRef> = index.occurrences.iter().map(|o| o.seg.clone()).collect();
    let mut pairs = Vec::new();
    let mut chosen = Vec::new();
    for (key_id, (key, group)) in index.keys.iter().zip(&index.groups).enumerate() {
        chosen.clear();
        if max_instances_per_type > 0 && group.len() > max_instances_per_type {
            let mut rng = rng_for(seed, stable_hash(key));
            let mut picks = sample(&mut rng, group.len(), max_instances_per_type).into_vec();
            picks.sort_unstable();
            chosen.extend(picks.into_iter().map(|i| group[i]));
        } else {
            chosen.extend_from_slice(group);
        }
        for (i, &a) in chosen.iter().enumerate() {
            let sa = &segments[a as usize];
            for &b in &chosen[i + 1..] {
                if exclude_overlap && sa.overlaps(&segments[b as usize]) {
                    continue;
                }
                pairs.push(PairIdx {
                    a,
                    b,
                    key: key_id as u32,
                });
            }
        }
    }
    Ok(PairSet::from_parts(Provenance::Mpr, segments, index.keys.clone(), pairs))
}

/// Reference enumeration: quadratic scan over all occurrence pairs with
/// equal keys. No cap, no overlap filtering.
pub fn brute_force_pairs(occurrences: &[NgramOccurrence]) -> PairSet {
    let mut builder = PairSetBuilder::new(Provenance::GroundTruth);
    for i in 0..occurrences.len() {
        for j in i + 1..occurrences.len() {
            let (x, y) = (&occurrences[i], &occurrences[j]);
            if x.key == y.key {
                builder.push(x.seg.clone(), y.seg.clone(), &x.key);
            }
        }
    }
    builder.finish()
}
