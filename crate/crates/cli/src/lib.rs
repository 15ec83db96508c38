//! Command implementations behind the `awekit` binary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use awekit::contrastive::train_pooler;
use awekit::evaluation::{collect_eval_awes, samediff_map, EvalOptions, EvalReport, Pooling};
use awekit::featurestore::{filter_eval_words, load_alignments, load_word_segments};
use awekit::kmeans::{export_targets, fit_kmeans, sample_frames, save_centroids};
use awekit::mining::mpr::extract_all;
use awekit::mining::{build_ann_index, index_ngrams, knn_pairs, mine_pairs, sample_segments, PairSet};
use awekit::rng::derive_seed;
use awekit::synthcorpus::generate_corpus;
use awekit::{init_pooler, mean_pool, save_pooler, FeatureStore, PhoneAlignment, WordSegment};
use ndarray::Array2;
use serde_json::json;

pub mod config;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] awekit::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for bad input or configuration, 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if !e.is_input_error() => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates `out` and records the resolved configuration in it.
pub fn prepare_out_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join(RUN_CONFIG_FILE), cfg.to_text())
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    write(path, text)
}

fn open_store(path: &Path) -> Result<FeatureStore> {
    Ok(FeatureStore::open(path)?)
}

// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.corpus()?;
    prepare_out_dir(out, cfg)?;
    let corpus = generate_corpus(&spec)?;
    let (_, ground_truth) = corpus.write(out, &cfg.ngram()?)?;
    let stats = json!({
        "command": "synth",
        "utterances": corpus.features.len(),
        "train_words": corpus.train_words.len(),
        "test_words": corpus.test_words.len(),
        "ground_truth_pairs": ground_truth.len(),
    });
    write_jsonl(&out.join("stats.jsonl"), &[stats])?;
    println!(
        "wrote {} utterances ({} train words, {} test words) to {}",
        corpus.features.len(),
        corpus.train_words.len(),
        corpus.test_words.len(),
        out.display()
    );
    Ok(())
}

/// Validates a feature file and optional alignment / word files against it.
pub fn cmd_ingest(
    cfg: &RunConfig,
    features: &Path,
    alignments: Option<&Path>,
    words: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let store = open_store(features)?;
    prepare_out_dir(out, cfg)?;
    let total_frames: usize = store.utt_ids().map(|u| store.num_frames(u)).sum::<awekit::Result<_>>()?;
    let mut summary = json!({
        "command": "ingest",
        "features": features,
        "utterances": store.len(),
        "dim": store.dim(),
        "frame_period_ms": store.frame_period_ms(),
        "frames": total_frames,
    });
    if let Some(path) = alignments {
        let alis = load_alignments(path)?;
        let period = store.frame_period_ms();
        for ali in &alis {
            for e in &ali.entries {
                store.resolve(&ali.utt_id, e.start_s, e.end_s)?;
            }
        }
        let occ = extract_all(&alis, &cfg.ngram()?, period)?;
        summary["alignments"] = json!(alis.len());
        summary["ngram_occurrences"] = json!(occ.len());
    }
    if let Some(path) = words {
        let segs = load_word_segments(path)?;
        for w in &segs {
            store.resolve(&w.utt_id, w.start_s, w.end_s)?;
        }
        summary["word_segments"] = json!(segs.len());
    }
    write_jsonl(&out.join("stats.jsonl"), &[summary.clone()])?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MineMode {
    Mpr,
    Knn,
}

/// Mined pairs plus the mining-only wall time.
pub struct MineOutcome {
    pub pairs: PairSet,
    pub candidates: usize,
    pub wall_time_s: f64,
}

pub fn mine_mpr(cfg: &RunConfig, alignments: &[PhoneAlignment], frame_period_ms: f32) -> Result<MineOutcome> {
    let ngram = cfg.ngram()?;
    let cap: usize = cfg.get("mpr.cap")?;
    let exclude_overlap: bool = cfg.get("mpr.exclude_overlap")?;
    let seed = cfg.seed()?;
    let t = Instant::now();
    let occ = extract_all(alignments, &ngram, frame_period_ms)?;
    let candidates = occ.len();
    let index = index_ngrams(occ);
    let pairs = mine_pairs(&index, cap, seed, exclude_overlap)?;
    Ok(MineOutcome {
        pairs,
        candidates,
        wall_time_s: t.elapsed().as_secs_f64(),
    })
}

pub fn mine_knn(cfg: &RunConfig, store: &FeatureStore, utterances: Option<&BTreeSet<String>>) -> Result<MineOutcome> {
    let seed = cfg.seed()?;
    let t = Instant::now();
    let mut segments = sample_segments(
        store,
        cfg.get("knn.min_ms")?,
        cfg.get("knn.max_ms")?,
        cfg.get("knn.gap_ms")?,
        derive_seed(seed, 1),
    )?;
    if let Some(keep) = utterances {
        segments.retain(|s| keep.contains(&s.utt_id));
    }
    let mut vectors = Array2::<f32>::zeros((segments.len(), store.dim()));
    for (i, seg) in segments.iter().enumerate() {
        let v = mean_pool(store.get_frames(seg)?.view())?;
        vectors.row_mut(i).assign(&ndarray::ArrayView1::from(&v.0[..]));
    }
    let vectors = awekit::mining::knn::prepare_vectors(vectors.view(), cfg.get("knn.cosine")?);
    let nlist: usize = cfg.get::<usize>("knn.nlist")?.min(segments.len().max(1));
    let nprobe: usize = cfg.get::<usize>("knn.nprobe")?.min(nlist);
    let index = build_ann_index(vectors.view(), nlist, nprobe, derive_seed(seed, 2))?;
    let pairs = knn_pairs(&index, &segments, cfg.get("knn.k")?)?;
    Ok(MineOutcome {
        pairs,
        candidates: segments.len(),
        wall_time_s: t.elapsed().as_secs_f64(),
    })
}

pub fn cmd_mine(
    cfg: &RunConfig,
    mode: MineMode,
    features: Option<&Path>,
    alignments: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let outcome = match mode {
        MineMode::Mpr => {
            let path = alignments.ok_or_else(|| CliError::Config("mpr mining needs --alignments".into()))?;
            let alis = load_alignments(path)?;
            let period = match features {
                Some(f) => open_store(f)?.frame_period_ms(),
                None => cfg.get("synth.frame_period_ms")?,
            };
            prepare_out_dir(out, cfg)?;
            mine_mpr(cfg, &alis, period)?
        }
        MineMode::Knn => {
            let path = features.ok_or_else(|| CliError::Config("knn mining needs --features".into()))?;
            let store = open_store(path)?;
            let keep = match alignments {
                Some(a) => Some(load_alignments(a)?.into_iter().map(|x| x.utt_id).collect()),
                None => None,
            };
            prepare_out_dir(out, cfg)?;
            mine_knn(cfg, &store, keep.as_ref())?
        }
    };
    let pairs_path = out.join("pairs.tsv");
    outcome.pairs.write_tsv(&pairs_path)?;
    let stats = json!({
        "command": "mine",
        "mode": outcome.pairs.provenance.to_string(),
        "candidates": outcome.candidates,
        "pairs": outcome.pairs.len(),
        "distinct_keys": outcome.pairs.distinct_keys(),
        "wall_time_s": outcome.wall_time_s,
    });
    write_jsonl(&out.join("stats.jsonl"), &[stats.clone()])?;
    println!("{stats}");
    Ok(pairs_path)
}

pub fn cmd_kmeans_targets(cfg: &RunConfig, features: &Path, out: &Path) -> Result<()> {
    let store = open_store(features)?;
    let k: usize = cfg.get("kmeans.k")?;
    let seed = cfg.seed()?;
    prepare_out_dir(out, cfg)?;
    let frames = sample_frames(&store, cfg.get("kmeans.sample_fraction")?, k, derive_seed(seed, 3))?;
    let centroids = fit_kmeans(frames.view(), k, cfg.get("kmeans.max_iters")?, cfg.get("kmeans.tol")?, seed)?;
    save_centroids(&centroids, out.join("centroids.awk"))?;
    export_targets(&store, &centroids, out.join("targets.tsv"))?;
    let stats = json!({
        "command": "kmeans-targets",
        "k": centroids.k(),
        "sampled_frames": frames.nrows(),
        "iterations": centroids.inertia_history.len(),
        "inertia": centroids.inertia_history,
    });
    write_jsonl(&out.join("stats.jsonl"), &[stats])?;
    println!(
        "k-means: {} clusters, final inertia {}",
        centroids.k(),
        centroids.final_inertia()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, features: &Path, pairs: &Path, init: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let store = open_store(features)?;
    let pairs = PairSet::read_tsv(pairs)?;
    let train_cfg = cfg.train()?;
    let pooler = match init {
        Some(p) => awekit::pooling::checkpoint::load_pooler_for(p, store.dim())?,
        None => init_pooler(&cfg.pooler(store.dim())?)?,
    };
    prepare_out_dir(out, cfg)?;
    let (trained, log) = train_pooler(&store, &pairs, pooler, &train_cfg)?;
    let ckpt = out.join("pooler.awp");
    save_pooler(&trained, &ckpt)?;
    log.write_csv(out.join("train_log.csv"))?;
    let stats = json!({
        "command": "train",
        "pairs": pairs.len(),
        "dropped_pairs": log.dropped_pairs,
        "steps": log.len(),
        "epoch_mean_loss": log.epoch_means(),
    });
    write_jsonl(&out.join("stats.jsonl"), &[stats.clone()])?;
    println!("{stats}");
    Ok(ckpt)
}

fn load_eval_words(cfg: &RunConfig, words: &Path) -> Result<Vec<WordSegment>> {
    let segs = load_word_segments(words)?;
    Ok(match cfg.word_filter()? {
        Some((chars, dur)) => filter_eval_words(&segs, chars, dur),
        None => segs,
    })
}

pub fn evaluate(
    cfg: &RunConfig,
    store: &FeatureStore,
    words: &[WordSegment],
    pooler: Option<&awekit::PoolerParams>,
) -> Result<(EvalReport, usize)> {
    let pooling = pooler.map_or(Pooling::Mean, Pooling::Learned);
    let set = collect_eval_awes(store, words, pooling)?;
    let options = EvalOptions {
        cross_speaker_only: cfg.get("eval.cross_speaker_only")?,
    };
    Ok((samediff_map(&set.items, options)?, set.dropped))
}

pub fn cmd_eval(cfg: &RunConfig, features: &Path, words: &Path, pooler: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let store = open_store(features)?;
    let segs = load_eval_words(cfg, words)?;
    let pooler = pooler.map(|p| awekit::pooling::checkpoint::load_pooler_for(p, store.dim())).transpose()?;
    prepare_out_dir(out, cfg)?;
    let (report, dropped) = evaluate(cfg, &store, &segs, pooler.as_ref())?;
    let mut record = serde_json::to_value(&report).expect("report serializes");
    record["dropped"] = json!(dropped);
    record["pooling"] = json!(if pooler.is_some() { "learned" } else { "mean" });
    write(&out.join("report.txt"), format!("{report}\n{}\n", report.summary_line()))?;
    write_jsonl(&out.join("stats.jsonl"), &[record])?;
    println!("{report}");
    println!("{}", report.summary_line());
    Ok(report)
}

// ---------------------------------------------------------------------------
// data-efficiency sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Hours,
    Pairs,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hours" => Ok(SweepAxis::Hours),
            "pairs" => Ok(SweepAxis::Pairs),
            other => Err(format!("unknown sweep axis '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: f64,
    pub map: f64,
    pub n_pairs: usize,
    pub wall_time: f64,
}

/// Speaker whose same-speaker pairs are most numerous (ties by id).
fn busiest_speaker(pairs: &PairSet, speaker_of: &HashMap<String, String>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (a, b, _) in pairs.iter() {
        let (sa, sb) = (&speaker_of[&a.utt_id], &speaker_of[&b.utt_id]);
        if sa == sb {
            *counts.entry(sa).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(x.0)))
        .map(|(s, _)| s.to_string())
}

/// Restricts pairs to those whose two segments both come from `speaker`.
pub fn single_speaker_pairs(pairs: &PairSet, speaker_of: &HashMap<String, String>, speaker: &str) -> PairSet {
    pairs.filter(|a, b, _| speaker_of[&a.utt_id] == speaker && speaker_of[&b.utt_id] == speaker)
}

/// Utterances in shuffled order until their total duration reaches `hours`.
fn utterances_for_hours(
    store: &FeatureStore,
    alignments: &[PhoneAlignment],
    hours: f64,
    seed: u64,
) -> Result<Vec<PhoneAlignment>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let budget = hours * 3600.0;
    let total: f64 = alignments.iter().map(|a| store.duration_s(&a.utt_id)).sum::<awekit::Result<f64>>()?;
    if budget > total + 1e-9 {
        return Err(CliError::Config(format!(
            "sweep point {hours} h exceeds the {:.4} h available",
            total / 3600.0
        )));
    }
    let mut order: Vec<usize> = (0..alignments.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut picked = Vec::new();
    let mut acc = 0.0;
    for i in order {
        if acc >= budget {
            break;
        }
        acc += store.duration_s(&alignments[i].utt_id)?;
        picked.push(alignments[i].clone());
    }
    Ok(picked)
}

/// Runs train + evaluate at every sweep point. With `repeats > 1` each point
/// is trained under several derived seeds and reports the median MAP.
pub fn run_sweep(
    cfg: &RunConfig,
    store: &FeatureStore,
    alignments: &[PhoneAlignment],
    eval_words: &[WordSegment],
    repeats: usize,
) -> Result<(Vec<SweepRow>, Vec<serde_json::Value>)> {
    let axis: SweepAxis = cfg.get("sweep.axis")?;
    let points: Vec<f64> = cfg.get_list("sweep.points")?;
    if points.is_empty() || points.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::Config("sweep.points must be non-empty and ascending".into()));
    }
    if repeats == 0 {
        return Err(CliError::Config("sweep repeats must be at least 1".into()));
    }
    let single: bool = cfg.get("sweep.single_speaker")?;
    let base_seed = cfg.seed()?;
    let speaker_of: HashMap<String, String> =
        alignments.iter().map(|a| (a.utt_id.clone(), a.speaker_id.clone())).collect();
    let period = store.frame_period_ms();

    let full = match axis {
        SweepAxis::Pairs => Some(mine_mpr(cfg, alignments, period)?.pairs),
        SweepAxis::Hours => None,
    };
    let speaker = match (single, cfg.raw("sweep.speaker")) {
        (false, _) => None,
        (true, "auto") => {
            let pool = match &full {
                Some(p) => p.clone(),
                None => mine_mpr(cfg, alignments, period)?.pairs,
            };
            Some(busiest_speaker(&pool, &speaker_of).ok_or(awekit::Error::NoPositivePairs)?)
        }
        (true, s) => Some(s.to_string()),
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (pi, &point) in points.iter().enumerate() {
        let t = Instant::now();
        let mut maps = Vec::with_capacity(repeats);
        let mut n_pairs = 0;
        for r in 0..repeats {
            let seed = derive_seed(base_seed, ((pi as u64) << 16) | r as u64);
            let mut run_cfg = cfg.clone();
            run_cfg.set("seed", &seed.to_string())?;
            let mut pairs = match (&full, axis) {
                (Some(p), _) => p.clone(),
                (None, _) => {
                    let utts = utterances_for_hours(store, alignments, point, seed)?;
                    mine_mpr(&run_cfg, &utts, period)?.pairs
                }
            };
            if let Some(spk) = &speaker {
                pairs = single_speaker_pairs(&pairs, &speaker_of, spk);
            }
            if axis == SweepAxis::Pairs {
                if point.fract() != 0.0 || point < 0.0 {
                    return Err(CliError::Config(format!("pair count {point} is not a whole number")));
                }
                let n = point as usize;
                if n > pairs.len() {
                    return Err(CliError::Config(format!(
                        "sweep point {n} exceeds the {} available pairs",
                        pairs.len()
                    )));
                }
                pairs = pairs.subsample(n, derive_seed(seed, 4))?;
            }
            let pooler = init_pooler(&run_cfg.pooler(store.dim())?)?;
            let (trained, log) = train_pooler(store, &pairs, pooler, &run_cfg.train()?)?;
            let (report, _) = evaluate(&run_cfg, store, eval_words, Some(&trained))?;
            records.push(json!({
                "command": "sweep",
                "axis": format!("{axis:?}").to_lowercase(),
                "point": point,
                "repeat": r,
                "seed": seed,
                "single_speaker": speaker,
                "n_pairs": pairs.len(),
                "steps": log.len(),
                "map": report.map,
            }));
            maps.push(report.map);
            n_pairs = pairs.len();
        }
        maps.sort_by(f64::total_cmp);
        let row = SweepRow {
            point,
            map: median(&maps),
            n_pairs,
            wall_time: t.elapsed().as_secs_f64(),
        };
        log::info!("sweep point {point}: median map {:.4}", row.map);
        rows.push(row);
    }
    Ok((rows, records))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("point,map,n_pairs,wall_time\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.3}\n", r.point, r.map, r.n_pairs, r.wall_time));
    }
    s
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    features: &Path,
    alignments: &Path,
    words: &Path,
    repeats: usize,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let store = open_store(features)?;
    let alis = load_alignments(alignments)?;
    let segs = load_eval_words(cfg, words)?;
    prepare_out_dir(out, cfg)?;
    let (rows, records) = run_sweep(cfg, &store, &alis, &segs, repeats)?;
    write(&out.join("sweep.csv"), sweep_csv(&rows))?;
    write_jsonl(&out.join("stats.jsonl"), &records)?;
    print!("{}", sweep_csv(&rows));
    Ok(rows)
}
