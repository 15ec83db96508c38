//! Positive-pair mining and the shared [`PairSet`] container.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurestore::SegmentRef;

pub mod knn;
pub mod mpr;

pub use knn::{build_ann_index, exact_knn, exact_knn_pairs, knn_pairs, sample_segments, AnnIndex, Neighbor};
pub use mpr::{brute_force_pairs, extract_ngrams, index_ngrams, mine_pairs, NgramConfig, NgramIndex, NgramOccurrence};

/// Where a pair set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mpr,
    Knn,
    GroundTruth,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Mpr => "mpr",
            Provenance::Knn => "knn",
            Provenance::GroundTruth => "ground_truth",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpr" => Ok(Provenance::Mpr),
            "knn" => Ok(Provenance::Knn),
            "ground_truth" => Ok(Provenance::GroundTruth),
            other => Err(Error::invalid(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One positive pair as indices into the owning [`PairSet`]'s tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairIdx {
    pub a: u32,
    pub b: u32,
    pub key: u32,
}

/// Mined positive pairs. Segments and keys are stored once and referenced by
/// index; within each pair `segment(a) < segment(b)` in `(utt_id, start, end)`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub provenance: Provenance,
    segments: Vec<SegmentRef>,
    keys: Vec<String>,
    pairs: Vec<PairIdx>,
}

/// Owned form of a pair, used for set comparisons.
pub type PairTuple = (SegmentRef, SegmentRef, String);

impl PairSet {
    pub fn empty(provenance: Provenance) -> Self {
        Self {
            provenance,
            segments: Vec::new(),
            keys: Vec::new(),
            pairs: Vec::new(),
        }
    }

    /// Assembles a pair set from prebuilt tables. Pairs must already be
    /// canonically oriented.
    pub(crate) fn from_parts(
        provenance: Provenance,
        segments: Vec<SegmentRef>,
        keys: Vec<String>,
        pairs: Vec<PairIdx>,
    ) -> Self {
        debug_assert!(pairs
            .iter()
            .all(|p| segments[p.a as usize] < segments[p.b as usize]));
        Self {
            provenance,
            segments,
            keys,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairIdx] {
        &self.pairs
    }

    pub fn segments(&self) -> &[SegmentRef] {
        &self.segments
    }

    pub fn segment(&self, i: u32) -> &SegmentRef {
        &self.segments[i as usize]
    }

    pub fn key(&self, i: u32) -> &str {
        &self.keys[i as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SegmentRef, &SegmentRef, &str)> + '_ {
        self.pairs
            .iter()
            .map(|p| (self.segment(p.a), self.segment(p.b), self.key(p.key)))
    }

    pub fn to_set(&self) -> BTreeSet<PairTuple> {
        self.iter()
            .map(|(a, b, k)| (a.clone(), b.clone(), k.to_owned()))
            .collect()
    }

    /// Number of distinct keys used by at least one pair.
    pub fn distinct_keys(&self) -> usize {
        self.pairs.iter().map(|p| p.key).collect::<BTreeSet<_>>().len()
    }

    /// Keeps pairs for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&SegmentRef, &SegmentRef, &str) -> bool) -> PairSet {
        let pairs = self
            .pairs
            .iter()
            .copied()
            .filter(|p| keep(self.segment(p.a), self.segment(p.b), self.key(p.key)))
            .collect();
        PairSet {
            provenance: self.provenance,
            segments: self.segments.clone(),
            keys: self.keys.clone(),
            pairs,
        }
    }

    /// Uniform subsample of `n` pairs without replacement, kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<PairSet> {
        if n > self.len() {
            return Err(Error::invalid(format!(
                "requested {n} pairs but only {} are available",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let pairs = idx.into_iter().map(|i| self.pairs[i]).collect();
        Ok(PairSet {
            provenance: self.provenance,
            segments: self.segments.clone(),
            keys: self.keys.clone(),
            pairs,
        })
    }

    /// Renders the TSV form:
    /// `uttA  startA  endA  uttB  startB  endB  key  provenance`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 48);
        for (a, b, k) in self.iter() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                a.utt_id, a.start_frame, a.end_frame, b.utt_id, b.start_frame, b.end_frame, k, self.provenance
            ));
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_tsv(text: &str, default_provenance: Provenance) -> Result<PairSet> {
        let mut builder = PairSetBuilder::new(default_provenance);
        let mut provenance: Option<Provenance> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 8 tab-separated fields, found {}", f.len()),
                });
            }
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid frame index '{s}'"),
                })
            };
            let a = SegmentRef::new(f[0], num(f[1])?, num(f[2])?);
            let b = SegmentRef::new(f[3], num(f[4])?, num(f[5])?);
            if a.is_empty() || b.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty segment".into(),
                });
            }
            let p: Provenance = f[7].parse().map_err(|_| Error::Parse {
                line,
                message: format!("unknown provenance '{}'", f[7]),
            })?;
            match provenance {
                None => provenance = Some(p),
                Some(q) if q != p => {
                    return Err(Error::Parse {
                        line,
                        message: format!("mixed provenance {q} and {p}"),
                    })
                }
                _ => {}
            }
            if !builder.push(a, b, f[6]) {
                return Err(Error::Parse {
                    line,
                    message: "pair of identical segments".into(),
                });
            }
        }
        let mut set = builder.finish();
        if let Some(p) = provenance {
            set.provenance = p;
        }
        Ok(set)
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<PairSet> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PairSet::parse_tsv(&text, Provenance::Mpr)
    }
}

/// Incrementally builds a [`PairSet`], interning segments and keys and
/// dropping duplicate pairs.
#[derive(Debug)]
pub struct PairSetBuilder {
    provenance: Provenance,
    segments: Vec<SegmentRef>,
    seg_ids: HashMap<SegmentRef, u32>,
    keys: Vec<String>,
    key_ids: HashMap<String, u32>,
    pairs: Vec<PairIdx>,
    seen: std::collections::HashSet<PairIdx>,
}

impl PairSetBuilder {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            segments: Vec::new(),
            seg_ids: HashMap::new(),
            keys: Vec::new(),
            key_ids: HashMap::new(),
            pairs: Vec::new(),
            seen: Default::default(),
        }
    }

    fn intern_segment(&mut self, seg: SegmentRef) -> u32 {
        if let Some(&i) = self.seg_ids.get(&seg) {
            return i;
        }
        let i = self.segments.len() as u32;
        self.segments.push(seg.clone());
        self.seg_ids.insert(seg, i);
        i
    }

    fn intern_key(&mut self, key: &str) -> u32 {
        if let Some(&i) = self.key_ids.get(key) {
            return i;
        }
        let i = self.keys.len() as u32;
        self.keys.push(key.to_owned());
        self.key_ids.insert(key.to_owned(), i);
        i
    }

    /// Adds an unordered pair. Returns false (and adds nothing) when both
    /// segments are identical.
    pub fn push(&mut self, x: SegmentRef, y: SegmentRef, key: &str) -> bool {
        let (a, b) = match x.cmp(&y) {
            std::cmp::Ordering::Less => (x, y),
            std::cmp::Ordering::Greater => (y, x),
            std::cmp::Ordering::Equal => return false,
        };
        let pair = PairIdx {
            a: self.intern_segment(a),
            b: self.intern_segment(b),
            key: self.intern_key(key),
        };
        if self.seen.insert(pair) {
            self.pairs.push(pair);
        }
        true
    }

    pub fn finish(self) -> PairSet {
        PairSet {
            provenance: self.provenance,
            segments: self.segments,
            keys: self.keys,
            pairs: self.pairs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(u: &str, s: usize, e: usize) -> SegmentRef {
        SegmentRef::new(u, s, e)
    }

    #[test]
    fn builder_orients_and_dedups() {
        let mut b = PairSetBuilder::new(Provenance::Mpr);
        assert!(b.push(seg("u2", 0, 4), seg("u1", 3, 8), "a|b"));
        assert!(b.push(seg("u1", 3, 8), seg("u2", 0, 4), "a|b"));
        assert!(!b.push(seg("u1", 3, 8), seg("u1", 3, 8), "a|b"));
        let set = b.finish();
        assert_eq!(set.len(), 1);
        let (x, y, k) = set.iter().next().unwrap();
        assert_eq!((x.utt_id.as_str(), y.utt_id.as_str(), k), ("u1", "u2", "a|b"));
    }

    #[test]
    fn tsv_round_trip() {
        let mut b = PairSetBuilder::new(Provenance::Knn);
        b.push(seg("u1", 0, 4), seg("u2", 5, 9), "knn");
        b.push(seg("u1", 0, 4), seg("u3", 1, 6), "knn");
        let set = b.finish();
        let text = set.to_tsv();
        assert!(text.starts_with("u1\t0\t4\tu2\t5\t9\tknn\tknn\n"));
        let back = PairSet::parse_tsv(&text, Provenance::Mpr).unwrap();
        assert_eq!(back.provenance, Provenance::Knn);
        assert_eq!(back.to_set(), set.to_set());
        assert!(PairSet::parse_tsv("u1\t0\t4\n", Provenance::Mpr).is_err());
    }

    #[test]
    fn subsample_and_filter() {
        let mut b = PairSetBuilder::new(Provenance::Mpr);
        for i in 0..50 {
            b.push(seg("u", i, i + 3), seg("v", i, i + 2), if i % 2 == 0 { "x" } else { "y" });
        }
        let set = b.finish();
        let sub = set.subsample(10, 7).unwrap();
        assert_eq!(sub.len(), 10);
        assert_eq!(sub, set.subsample(10, 7).unwrap());
        assert!(sub.to_set().is_subset(&set.to_set()));
        assert!(set.subsample(51, 0).is_err());
        assert_eq!(set.filter(|_, _, k| k == "x").len(), 25);
        assert_eq!(set.distinct_keys(), 2);
    }
}
