use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use awekit_cli::{
    cmd_eval, cmd_ingest, cmd_kmeans_targets, cmd_mine, cmd_sweep, cmd_synth, cmd_train, CliError, MineMode, RunConfig,
};

#[derive(Parser)]
#[command(name = "awekit", version, about = "Acoustic word embedding toolkit")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "awekit-out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Extra `key=value` overrides, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a feature file and optional alignment / word files.
    Ingest {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        words: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth,
    /// Mine positive pairs.
    Mine {
        #[arg(long, value_enum)]
        mode: MineMode,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        alignments: Option<PathBuf>,
    },
    /// Fit k-means on frames and write per-frame cluster targets.
    KmeansTargets {
        #[arg(long)]
        features: PathBuf,
    },
    /// Train the learned pooler on a pair file.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Same-different evaluation.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        words: PathBuf,
        /// Learned pooler checkpoint; mean pooling when absent.
        #[arg(long)]
        pooler: Option<PathBuf>,
        /// `<min_chars>,<min_seconds>` word filter.
        #[arg(long)]
        filter_words: Option<String>,
    },
    /// Data-efficiency sweep over training hours or pair counts.
    Sweep {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        /// Evaluation word segments.
        #[arg(long)]
        words: PathBuf,
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated ascending points.
        #[arg(long)]
        points: Option<String>,
        #[arg(long)]
        single_speaker: bool,
        /// Seeds per point; the reported MAP is their median.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    match &cli.command {
        Command::Eval {
            filter_words: Some(f), ..
        } => cfg.set("eval.filter_words", f)?,
        Command::Sweep {
            axis, points, single_speaker, ..
        } => {
            if let Some(a) = axis {
                cfg.set("sweep.axis", a)?;
            }
            if let Some(p) = points {
                cfg.set("sweep.points", p)?;
            }
            if *single_speaker {
                cfg.set("sweep.single_speaker", "true")?;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let cfg = resolve_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Ingest {
            features,
            alignments,
            words,
        } => cmd_ingest(&cfg, features, alignments.as_deref(), words.as_deref(), out),
        Command::Synth => cmd_synth(&cfg, out),
        Command::Mine {
            mode,
            features,
            alignments,
        } => cmd_mine(&cfg, *mode, features.as_deref(), alignments.as_deref(), out).map(drop),
        Command::KmeansTargets { features } => cmd_kmeans_targets(&cfg, features, out),
        Command::Train { features, pairs, init } => cmd_train(&cfg, features, pairs, init.as_deref(), out).map(drop),
        Command::Eval {
            features, words, pooler, ..
        } => cmd_eval(&cfg, features, words, pooler.as_deref(), out).map(drop),
        Command::Sweep {
            features,
            alignments,
            words,
            repeats,
            ..
        } => cmd_sweep(&cfg, features, alignments, words, *repeats, out).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
