//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use awekit::contrastive::{DenominatorMode, TrainConfig};
use awekit::mining::NgramConfig;
use awekit::synthcorpus::CorpusSpec;
use awekit::PoolerConfig;

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // n-gram mining
    ("ngram.min", "2"),
    ("ngram.max", "5"),
    ("ngram.silence", "sil,sp,spn,nsn"),
    ("mpr.cap", "300"),
    ("mpr.exclude_overlap", "true"),
    // nearest-neighbour mining
    ("knn.min_ms", "80"),
    ("knn.max_ms", "310"),
    ("knn.gap_ms", "0"),
    ("knn.k", "5"),
    ("knn.nlist", "64"),
    ("knn.nprobe", "8"),
    ("knn.cosine", "false"),
    // learned pooler
    ("pooler.hidden", "256"),
    ("pooler.kernel", "4"),
    ("pooler.stride", "2"),
    ("pooler.heads", "4"),
    ("pooler.max_positions", "128"),
    // training
    ("train.temperature", "0.07"),
    ("train.batch_size", "150"),
    ("train.epochs", "5"),
    ("train.max_iterations", "1000"),
    ("train.lr", "0.0001"),
    ("train.mode", "standard"),
    ("train.clip_norm", "none"),
    // k-means targets
    ("kmeans.k", "500"),
    ("kmeans.max_iters", "100"),
    ("kmeans.tol", "0.0001"),
    ("kmeans.sample_fraction", "1.0"),
    // evaluation
    ("eval.cross_speaker_only", "false"),
    ("eval.filter_words", "none"),
    // synthetic corpus
    ("synth.phones", "40"),
    ("synth.words", "200"),
    ("synth.phones_per_word", "3,6"),
    ("synth.anagram_group", "4"),
    ("synth.speakers", "8"),
    ("synth.utterances_per_speaker", "150"),
    ("synth.test_fraction", "0.2"),
    ("synth.words_per_utterance", "4,8"),
    ("synth.frames_per_phone", "2,5"),
    ("synth.silence_frames", "2,6"),
    ("synth.dim", "32"),
    ("synth.frame_period_ms", "20"),
    ("synth.speaker_shift", "0.1"),
    ("synth.noise", "0.45"),
    // data-efficiency sweep
    ("sweep.axis", "pairs"),
    ("sweep.points", "100,1000,10000"),
    ("sweep.single_speaker", "false"),
    ("sweep.speaker", "auto"),
];

/// Resolved settings. Every key has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no default for '{key}'"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e| bad(key, e))
    }

    /// `none` maps to `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            "none" | "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| bad(key, e)))
            .collect()
    }

    fn get_range(&self, key: &str) -> Result<(usize, usize), CliError> {
        match self.get_list::<usize>(key)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            [a] => Ok((*a, *a)),
            _ => Err(bad(key, "expected min,max")),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn ngram(&self) -> Result<NgramConfig, CliError> {
        Ok(NgramConfig {
            n_min: self.get("ngram.min")?,
            n_max: self.get("ngram.max")?,
            silence_labels: self.get_list("ngram.silence")?,
        })
    }

    pub fn pooler(&self, input_dim: usize) -> Result<PoolerConfig, CliError> {
        let cfg = PoolerConfig {
            input_dim,
            hidden_dim: self.get("pooler.hidden")?,
            conv_kernel: self.get("pooler.kernel")?,
            conv_stride: self.get("pooler.stride")?,
            n_heads: self.get("pooler.heads")?,
            max_positions: self.get("pooler.max_positions")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            temperature: self.get("train.temperature")?,
            batch_size: self.get("train.batch_size")?,
            epochs: self.get("train.epochs")?,
            max_iterations_per_epoch: self.get("train.max_iterations")?,
            learning_rate: self.get("train.lr")?,
            seed: self.seed()?,
            denominator_mode: self.get::<DenominatorMode>("train.mode")?,
            clip_norm: self.get_opt("train.clip_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn corpus(&self) -> Result<CorpusSpec, CliError> {
        let spec = CorpusSpec {
            n_phone_types: self.get("synth.phones")?,
            n_word_types: self.get("synth.words")?,
            phones_per_word: self.get_range("synth.phones_per_word")?,
            anagram_group_size: self.get("synth.anagram_group")?,
            n_speakers: self.get("synth.speakers")?,
            utterances_per_speaker: self.get("synth.utterances_per_speaker")?,
            test_fraction: self.get("synth.test_fraction")?,
            words_per_utterance: self.get_range("synth.words_per_utterance")?,
            frames_per_phone: self.get_range("synth.frames_per_phone")?,
            silence_frames: self.get_range("synth.silence_frames")?,
            feature_dim: self.get("synth.dim")?,
            frame_period_ms: self.get("synth.frame_period_ms")?,
            speaker_shift_scale: self.get("synth.speaker_shift")?,
            noise_scale: self.get("synth.noise")?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `(min_chars, min_duration_s)` when word filtering is enabled.
    pub fn word_filter(&self) -> Result<Option<(usize, f64)>, CliError> {
        if matches!(self.raw("eval.filter_words"), "none" | "") {
            return Ok(None);
        }
        match self.get_list::<f64>("eval.filter_words")?.as_slice() {
            [c, d] if *c >= 0.0 && c.fract() == 0.0 => Ok(Some((*c as usize, *d))),
            _ => Err(bad("eval.filter_words", "expected <min_chars>,<min_seconds>")),
        }
    }
}
