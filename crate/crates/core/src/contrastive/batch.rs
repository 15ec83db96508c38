use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mining::{PairSet, Provenance};

/// One (anchor, positive) pair inside a batch. Indices point into the
/// [`PairSet`] segment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub pair: usize,
    pub anchor: u32,
    pub positive: u32,
    /// Slots with equal exclusion keys never serve as each other's negatives.
    pub exclusion_key: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub slots: Vec<Slot>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots whose members are negatives for slot `i`.
    pub fn negative_slots(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let key = self.slots[i].exclusion_key;
        self.slots
            .iter()
            .enumerate()
            .filter(move |(j, s)| *j != i && s.exclusion_key != key)
            .map(|(j, _)| j)
    }
}

/// Shuffles `pairs` with `seed` and cuts them into batches of `batch_size`.
///
/// A trailing partial batch is kept when it has at least two slots. Pairs
/// mined by phone n-gram share an exclusion key per n-gram type; nearest
/// neighbour pairs carry no type, so each is its own key.
pub fn build_batches(pairs: &PairSet, batch_size: usize, seed: u64) -> Result<Vec<ContrastiveBatch>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if pairs.len() < batch_size && !pairs.is_empty() {
        log::warn!(
            "only {} pairs for batch size {batch_size}: training on a single smaller batch",
            pairs.len()
        );
    }
    let per_pair_key = pairs.provenance == Provenance::Knn;
    let mut batches = Vec::with_capacity(pairs.len() / batch_size + 1);
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 && !batches.is_empty() {
            break;
        }
        let slots = chunk
            .iter()
            .map(|&i| {
                let p = pairs.pairs()[i];
                Slot {
                    pair: i,
                    anchor: p.a,
                    positive: p.b,
                    exclusion_key: if per_pair_key { i as u64 } else { p.key as u64 },
                }
            })
            .collect();
        batches.push(ContrastiveBatch { slots });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::SegmentRef;
    use crate::mining::PairSetBuilder;

    fn pairs(n: usize, keys: usize, provenance: Provenance) -> PairSet {
        let mut b = PairSetBuilder::new(provenance);
        for i in 0..n {
            b.push(
                SegmentRef::new(format!("a{i}"), 0, 4),
                SegmentRef::new(format!("b{i}"), 0, 4),
                &format!("k{}", i % keys),
            );
        }
        b.finish()
    }

    #[test]
    fn batch_sizes() {
        let b = build_batches(&pairs(300, 50, Provenance::Mpr), 150, 1).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![150, 150]);
        let b = build_batches(&pairs(302, 50, Provenance::Mpr), 150, 1).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![150, 150, 2]);
        let b = build_batches(&pairs(301, 50, Provenance::Mpr), 150, 1).unwrap();
        assert_eq!(b.len(), 2);
        let b = build_batches(&pairs(40, 5, Provenance::Mpr), 150, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 40);
        assert!(build_batches(&pairs(4, 2, Provenance::Mpr), 1, 0).is_err());
    }

    #[test]
    fn same_key_slots_are_not_negatives() {
        let b = &build_batches(&pairs(10, 3, Provenance::Mpr), 10, 5).unwrap()[0];
        for i in 0..b.len() {
            for j in b.negative_slots(i) {
                assert_ne!(b.slots[i].exclusion_key, b.slots[j].exclusion_key);
            }
            let same = b.slots.iter().filter(|s| s.exclusion_key == b.slots[i].exclusion_key).count();
            assert_eq!(b.negative_slots(i).count(), b.len() - same);
        }
        let knn = &build_batches(&pairs(10, 1, Provenance::Knn), 10, 5).unwrap()[0];
        assert_eq!(knn.negative_slots(0).count(), 9);
    }

    #[test]
    fn deterministic_shuffle() {
        let p = pairs(500, 20, Provenance::Mpr);
        assert_eq!(build_batches(&p, 64, 9).unwrap(), build_batches(&p, 64, 9).unwrap());
        assert_ne!(build_batches(&p, 64, 9).unwrap(), build_batches(&p, 64, 10).unwrap());
    }
}
