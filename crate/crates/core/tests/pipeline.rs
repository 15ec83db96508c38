use awekit::contrastive::{build_batches, train_pooler, TrainConfig};
use awekit::evaluation::{collect_eval_awes, samediff_map, EvalOptions, Pooling};
use awekit::mining::mpr::extract_all;
use awekit::mining::{index_ngrams, mine_pairs, NgramConfig, PairSet, Provenance};
use awekit::synthcorpus::{generate_corpus, CorpusSpec};
use awekit::{init_pooler, write_features, FeatureStore, FrameMatrix, PoolerConfig, WordSegment};
use ndarray::Array2;
use proptest::prelude::*;

struct Fixture {
    _dir: tempfile::TempDir,
    store: FeatureStore,
    pairs: PairSet,
    test_words: Vec<WordSegment>,
}

fn fixture() -> Fixture {
    let spec = CorpusSpec {
        n_word_types: 30,
        n_speakers: 2,
        utterances_per_speaker: 30,
        test_fraction: 0.5,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.awf");
    write_features(&corpus.features, &path).unwrap();
    let occ = extract_all(&corpus.train_alignments, &NgramConfig::default(), 20.0).unwrap();
    let pairs = mine_pairs(&index_ngrams(occ), 300, 0, true).unwrap();
    Fixture {
        _dir: dir,
        store: FeatureStore::open(&path).unwrap(),
        pairs,
        test_words: corpus.test_words,
    }
}

fn small_pooler() -> PoolerConfig {
    PoolerConfig {
        input_dim: 32,
        hidden_dim: 16,
        conv_kernel: 4,
        conv_stride: 2,
        n_heads: 4,
        max_positions: 32,
        seed: 3,
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let fx = fixture();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 64,
        max_iterations_per_epoch: 4,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let p0 = init_pooler(&small_pooler()).unwrap();
    let (a, log_a) = train_pooler(&fx.store, &fx.pairs, p0.clone(), &cfg).unwrap();
    let (b, log_b) = train_pooler(&fx.store, &fx.pairs, p0.clone(), &cfg).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(log_a, log_b);
    let batches = build_batches(&fx.pairs, 64, 0).unwrap().len();
    assert_eq!(log_a.len(), 2 * batches.min(4));
    assert_ne!(a.values, p0.values);

    let frozen = TrainConfig {
        learning_rate: 0.0,
        ..cfg
    };
    let (c, _) = train_pooler(&fx.store, &fx.pairs, p0.clone(), &frozen).unwrap();
    assert_eq!(c.values, p0.values);
}

#[test]
fn loss_falls_over_epochs() {
    let fx = fixture();
    let cfg = TrainConfig {
        epochs: 4,
        max_iterations_per_epoch: 20,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let (_, log) = train_pooler(&fx.store, &fx.pairs, init_pooler(&small_pooler()).unwrap(), &cfg).unwrap();
    let means = log.epoch_means();
    assert!(means.windows(2).take(3).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn eval_drops_segments_the_pooler_cannot_embed() {
    let fx = fixture();
    let mut words: Vec<WordSegment> = fx.test_words.iter().take(97).cloned().collect();
    for i in 0..3 {
        let mut w = fx.test_words[i].clone();
        w.end_s = w.start_s + 0.04;
        words.push(w);
    }
    let mean = collect_eval_awes(&fx.store, &words, Pooling::Mean).unwrap();
    assert_eq!((mean.items.len(), mean.dropped), (100, 0));
    let p = init_pooler(&small_pooler()).unwrap();
    let learned = collect_eval_awes(&fx.store, &words, Pooling::Learned(&p)).unwrap();
    assert_eq!((learned.items.len(), learned.dropped), (97, 3));
    let again = collect_eval_awes(&fx.store, &words, Pooling::Learned(&p)).unwrap();
    assert_eq!(learned.items, again.items);
    let r = samediff_map(&mean.items, EvalOptions::default()).unwrap();
    assert_eq!(r.n_pairs, 100 * 99 / 2);
}

#[test]
fn unknown_utterance_is_reported() {
    let fx = fixture();
    let mut w = fx.test_words[0].clone();
    w.utt_id = "nope".into();
    let err = collect_eval_awes(&fx.store, &[w], Pooling::Mean).unwrap_err();
    assert!(err.to_string().contains("nope"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn awf_round_trip(lens in prop::collection::vec(1usize..20, 1..6), dim in 1usize..8, seed in any::<u32>()) {
        let records: Vec<FrameMatrix> = lens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let m = Array2::from_shape_fn((t, dim), |(r, c)| ((r * 31 + c * 7 + i) as f32 + seed as f32).sin());
                FrameMatrix::new(format!("utt{i}"), m, 20.0)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.awf");
        write_features(&records, &path).unwrap();
        let store = FeatureStore::open(&path).unwrap();
        prop_assert_eq!(store.len(), records.len());
        for r in &records {
            prop_assert_eq!(&store.utterance(&r.utt_id).unwrap(), r);
        }
    }

    #[test]
    fn pair_tsv_round_trip(seed in any::<u64>(), n in 0usize..40) {
        let fx_pairs = {
            let mut b = awekit::mining::PairSetBuilder::new(Provenance::Mpr);
            for i in 0..n {
                let s = (seed as usize + i * 7) % 50;
                b.push(
                    awekit::SegmentRef::new(format!("u{}", s % 5), s, s + 3),
                    awekit::SegmentRef::new(format!("u{}", (s + 1) % 5), s + 1, s + 5),
                    &format!("p{}|p{}", s % 3, i % 4),
                );
            }
            b.finish()
        };
        let back = PairSet::parse_tsv(&fx_pairs.to_tsv(), Provenance::Mpr).unwrap();
        prop_assert_eq!(back.to_set(), fx_pairs.to_set());
    }
}
