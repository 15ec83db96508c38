use std::collections::{BTreeMap, BTreeSet};

use awekit::evaluation::{brute_force_map, samediff_map, EvalItem, EvalOptions};
use awekit::kmeans::{assign, fit_kmeans, fit_kmeans_from, inertia};
use awekit::mining::knn::prepare_vectors;
use awekit::mining::mpr::extract_all;
use awekit::mining::{build_ann_index, brute_force_pairs, exact_knn, index_ngrams, mine_pairs, NgramConfig};
use awekit::{AweVector, PhoneAlignment, PhoneEntry, SegmentRef};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn item(awe: Vec<f32>, word: String, spk: &str) -> EvalItem {
    EvalItem {
        awe: AweVector(awe),
        word,
        speaker_id: spk.into(),
        seg: SegmentRef::new("u", 0, 1),
    }
}

fn random_items(rng: &mut ChaCha8Rng, n: usize, vocab: usize, dim: usize, quantize: bool) -> Vec<EvalItem> {
    (0..n)
        .map(|i| {
            let v = (0..dim)
                .map(|_| {
                    let x: f32 = rng.random_range(-1.0..1.0);
                    if quantize {
                        (x * 2.0).round()
                    } else {
                        x
                    }
                })
                .collect();
            item(v, format!("w{}", rng.random_range(0..vocab)), if i % 2 == 0 { "a" } else { "b" })
        })
        .collect()
}

#[test]
fn map_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=200);
        // quantized vectors produce many exact score ties
        let (vocab, dim) = (rng.random_range(1..20), rng.random_range(1..6));
        let items = random_items(&mut rng, n, vocab, dim, checked % 3 == 0);
        let Ok(oracle) = brute_force_map(&items) else { continue };
        let fast = samediff_map(&items, EvalOptions::default()).unwrap();
        assert!((fast.map - oracle).abs() < 1e-12, "{} vs {oracle}", fast.map);
        assert_eq!(fast.n_pairs, n * (n - 1) / 2);
        checked += 1;
    }
}

#[test]
fn perfect_embeddings_score_one() {
    let mut items = Vec::new();
    for w in 0..6 {
        for k in 0..5 {
            let mut v = vec![0.0f32; 6];
            v[w] = 1.0 + k as f32;
            items.push(item(v, format!("w{w}"), "s"));
        }
    }
    assert_eq!(samediff_map(&items, EvalOptions::default()).unwrap().map, 1.0);
    assert_eq!(brute_force_map(&items).unwrap(), 1.0);
}

#[test]
fn ranking_pos_neg_pos_is_five_sixths() {
    // points on the unit circle; pair angles 10 (pos), 12 (neg), 14 (pos), then larger negatives
    let at = |deg: f64| vec![deg.to_radians().cos() as f32, deg.to_radians().sin() as f32];
    let items = vec![
        item(at(0.0), "a".into(), "s"),
        item(at(10.0), "a".into(), "s"),
        item(at(22.0), "b".into(), "s"),
        item(at(36.0), "b".into(), "s"),
    ];
    let r = samediff_map(&items, EvalOptions::default()).unwrap();
    assert_eq!(r.map, 5.0 / 6.0);
    assert!((brute_force_map(&items).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_is_scale_and_permutation_invariant(seed in any::<u64>(), n in 4usize..60, scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = random_items(&mut rng, n, 4, 3, false);
        let Ok(base) = samediff_map(&items, EvalOptions::default()) else { return Ok(()) };
        let scaled: Vec<EvalItem> = items
            .iter()
            .map(|it| item(it.awe.iter().map(|x| x * scale).collect(), it.word.clone(), &it.speaker_id))
            .collect();
        let s = samediff_map(&scaled, EvalOptions::default()).unwrap();
        prop_assert!((s.map - base.map).abs() < 1e-9);
        let mut shuffled = items.clone();
        shuffled.reverse();
        let p = samediff_map(&shuffled, EvalOptions::default()).unwrap();
        prop_assert!((p.map - base.map).abs() < 1e-9);
        prop_assert!(base.map >= 0.0 && base.map <= 1.0);
    }
}

// ---------------------------------------------------------------------------

fn random_alignments(rng: &mut ChaCha8Rng, n_phones: usize, max_utts: usize) -> Vec<PhoneAlignment> {
    let n_utts = rng.random_range(1..=max_utts);
    (0..n_utts)
        .map(|u| {
            let mut t = 0.0;
            let entries = (0..rng.random_range(1..30))
                .map(|_| {
                    let dur = 0.02 * rng.random_range(1..5) as f64;
                    let phone = if rng.random_bool(0.15) {
                        "sil".to_string()
                    } else {
                        format!("p{}", rng.random_range(0..n_phones))
                    };
                    let e = PhoneEntry {
                        start_s: t,
                        end_s: t + dur,
                        phone,
                    };
                    t += dur;
                    e
                })
                .collect();
            PhoneAlignment {
                utt_id: format!("u{u:03}"),
                speaker_id: format!("s{}", u % 3),
                entries,
            }
        })
        .collect()
}

#[test]
fn mining_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = NgramConfig::default();
    for case in 0..100 {
        let n_phones = rng.random_range(2..8);
        let alis = random_alignments(&mut rng, n_phones, 40);
        let occ = extract_all(&alis, &cfg, 20.0).unwrap();
        assert!(occ.len() <= 1000 + 40 * 30 * 4);
        let oracle = brute_force_pairs(&occ).to_set();
        let mined = mine_pairs(&index_ngrams(occ), 0, case, false).unwrap().to_set();
        assert_eq!(mined, oracle, "case {case}");
    }
}

#[test]
fn cap_bounds_instances_per_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = NgramConfig::default();
    // two phones make a handful of keys with many occurrences each
    let alis = random_alignments(&mut rng, 2, 120);
    let occ = extract_all(&alis, &cfg, 20.0).unwrap();
    let index = index_ngrams(occ);
    assert!(index.group_sizes().any(|(_, n)| n > 300));
    let pairs = mine_pairs(&index, 300, 9, false).unwrap();
    let mut per_key: BTreeMap<&str, BTreeSet<&SegmentRef>> = BTreeMap::new();
    for (a, b, k) in pairs.iter() {
        per_key.entry(k).or_default().extend([a, b]);
    }
    for (k, segs) in per_key {
        assert!(segs.len() <= 300, "{k}: {}", segs.len());
    }
}

// ---------------------------------------------------------------------------

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

#[test]
fn full_probe_ann_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let n = rng.random_range(20..300);
        let dim = rng.random_range(2..12);
        let v = Array2::from_shape_fn((n, dim), |_| gaussian(&mut rng));
        let nlist = rng.random_range(1..=8.min(n));
        let index = build_ann_index(v.view(), nlist, nlist, case).unwrap();
        let k = rng.random_range(1..=10);
        let exact = exact_knn(v.view(), v.view(), k, Some(&(0..n).collect::<Vec<_>>()));
        for q in 0..n {
            let approx = index.search(v.row(q).as_slice().unwrap(), k, Some(q));
            assert_eq!(approx, exact[q], "case {case} query {q}");
        }
    }
}

#[test]
fn quarter_probe_recall_on_clustered_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (clusters, per, dim) = (32, 60, 16);
    let centers: Vec<Vec<f32>> = (0..clusters).map(|_| (0..dim).map(|_| 3.0 * gaussian(&mut rng)).collect()).collect();
    let v = Array2::from_shape_fn((clusters * per, dim), |(i, d)| centers[i / per][d] + 0.3 * gaussian(&mut rng));
    let v = prepare_vectors(v.view(), false);
    let nlist = 32;
    let index = build_ann_index(v.view(), nlist, nlist / 4, 1).unwrap();
    let ids: Vec<usize> = (0..v.nrows()).collect();
    let exact = exact_knn(v.view(), v.view(), 5, Some(&ids));
    let mut hits = 0;
    for q in 0..v.nrows() {
        let approx: BTreeSet<usize> = index.search(v.row(q).as_slice().unwrap(), 5, Some(q)).iter().map(|n| n.id).collect();
        hits += exact[q].iter().filter(|n| approx.contains(&n.id)).count();
    }
    let recall = hits as f64 / (5 * v.nrows()) as f64;
    assert!(recall >= 0.9, "recall {recall}");
}

// ---------------------------------------------------------------------------

#[test]
fn kmeans_inertia_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let n = rng.random_range(10..400);
        let dim = rng.random_range(1..8);
        let data = Array2::from_shape_fn((n, dim), |_| gaussian(&mut rng));
        let k = rng.random_range(1..=10.min(n));
        let c = fit_kmeans(data.view(), k, 100, 1e-4, case).unwrap();
        for w in c.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "case {case}: {w:?}");
        }
        let labels = assign(&c, data.view()).unwrap();
        let used: BTreeSet<u32> = labels.iter().copied().collect();
        assert_eq!(used.len(), k, "case {case}: empty cluster");
        let final_inertia = inertia(&c, data.view()).unwrap();
        assert!(final_inertia <= c.inertia_history[0] * (1.0 + 1e-6));
    }
}

#[test]
fn unit_square() {
    let data = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let init = array![[0.0f32, 0.0], [0.0, 1.0]];
    let c = fit_kmeans_from(data.view(), init.view(), 100, 1e-4).unwrap();
    assert_eq!(c.final_inertia(), 1.0);
    assert_eq!(inertia(&c, data.view()).unwrap(), 1.0);
}
