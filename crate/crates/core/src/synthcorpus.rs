//! Synthetic corpora with known phone, word and speaker structure.
//!
//! Each phone type is a fixed random unit vector. A frame is its phone's
//! prototype plus a per-speaker offset plus Gaussian noise. Words are fixed
//! phone sequences, and the lexicon is built from groups of anagrams: words
//! in a group share one phone multiset in different orders, so an
//! order-blind pooling cannot tell them apart. Utterances alternate silence
//! and words.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::featurestore::{
    write_alignments, write_features, write_word_segments, FrameMatrix, PhoneAlignment, PhoneEntry, WordSegment,
};
use crate::mining::mpr::extract_all;
use crate::mining::{brute_force_pairs, NgramConfig, PairSet};
use crate::rng::rng_for;

pub const SILENCE_PHONE: &str = "sil";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub n_phone_types: usize,
    pub n_word_types: usize,
    /// Inclusive range.
    pub phones_per_word: (usize, usize),
    /// Words per anagram group; 1 disables anagrams.
    pub anagram_group_size: usize,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Trailing share of each speaker's utterances held out for evaluation.
    pub test_fraction: f64,
    pub words_per_utterance: (usize, usize),
    pub frames_per_phone: (usize, usize),
    pub silence_frames: (usize, usize),
    pub feature_dim: usize,
    pub frame_period_ms: f32,
    pub speaker_shift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_phone_types: 40,
            n_word_types: 200,
            phones_per_word: (3, 6),
            anagram_group_size: 4,
            n_speakers: 8,
            utterances_per_speaker: 150,
            test_fraction: 0.2,
            words_per_utterance: (4, 8),
            frames_per_phone: (2, 5),
            silence_frames: (2, 6),
            feature_dim: 32,
            frame_period_ms: 20.0,
            speaker_shift_scale: 0.1,
            noise_scale: 0.45,
            seed: 0,
        }
    }
}

/// Longest utterance the generator accepts, in frames.
const MAX_UTTERANCE_FRAMES: usize = 1 << 20;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("phones_per_word", self.phones_per_word),
            ("words_per_utterance", self.words_per_utterance),
            ("frames_per_phone", self.frames_per_phone),
            ("silence_frames", self.silence_frames),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!("{name}: need 1 <= min <= max, got ({lo}, {hi})")));
            }
        }
        let counts = [
            ("n_phone_types", self.n_phone_types),
            ("n_word_types", self.n_word_types),
            ("anagram_group_size", self.anagram_group_size),
            ("n_speakers", self.n_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.speaker_shift_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::invalid("scales must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1)"));
        }
        if !(self.frame_period_ms > 0.0 && self.frame_period_ms.is_finite()) {
            return Err(Error::invalid("frame_period_ms must be positive"));
        }
        let longest = self.silence_frames.1 * (self.words_per_utterance.1 + 1)
            + self.words_per_utterance.1 * self.phones_per_word.1 * self.frames_per_phone.1;
        if longest > MAX_UTTERANCE_FRAMES {
            return Err(Error::invalid(format!(
                "utterances of up to {longest} frames exceed the limit of {MAX_UTTERANCE_FRAMES}"
            )));
        }
        Ok(())
    }

    pub fn test_utterances_per_speaker(&self) -> usize {
        (self.utterances_per_speaker as f64 * self.test_fraction).round() as usize
    }
}

/// A generated corpus, split into train and test utterances.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub features: Vec<FrameMatrix>,
    pub train_alignments: Vec<PhoneAlignment>,
    pub test_alignments: Vec<PhoneAlignment>,
    pub train_words: Vec<WordSegment>,
    pub test_words: Vec<WordSegment>,
    /// Phone sequence of every word type, indexed like the word names.
    pub lexicon: Vec<Vec<usize>>,
}

pub fn phone_name(p: usize) -> String {
    format!("p{p:02}")
}

pub fn word_name(w: usize) -> String {
    format!("word{w:03}")
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn build_lexicon(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut lexicon: Vec<Vec<usize>> = Vec::with_capacity(spec.n_word_types);
    let mut attempts = 0;
    while lexicon.len() < spec.n_word_types {
        let len = rng.random_range(spec.phones_per_word.0..=spec.phones_per_word.1);
        let base: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.n_phone_types)).collect();
        let mut group: Vec<Vec<usize>> = Vec::new();
        for _ in 0..spec.anagram_group_size * 8 {
            if group.len() == spec.anagram_group_size || lexicon.len() + group.len() == spec.n_word_types {
                break;
            }
            let mut w = base.clone();
            if !group.is_empty() {
                w.shuffle(rng);
            }
            if !group.contains(&w) && !lexicon.contains(&w) {
                group.push(w);
            }
        }
        lexicon.extend(group);
        attempts += 1;
        // tiny phone inventories may not have enough distinct sequences
        if attempts > spec.n_word_types * 100 {
            break;
        }
    }
    lexicon
}

fn secs(frame: usize, period_ms: f32) -> f64 {
    frame as f64 * period_ms as f64 / 1000.0
}

/// Generates a corpus; identical specs give identical corpora.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut rng = rng_for(spec.seed, 1);
    let prototypes: Vec<Vec<f64>> = (0..=spec.n_phone_types).map(|_| unit_vector(&mut rng, dim)).collect();
    let silence = spec.n_phone_types;
    let lexicon = build_lexicon(spec, &mut rng_for(spec.seed, 2));
    if lexicon.len() < spec.n_word_types {
        return Err(Error::invalid(format!(
            "cannot build {} distinct words from {} phones",
            spec.n_word_types, spec.n_phone_types
        )));
    }
    let mut rng = rng_for(spec.seed, 3);
    let offsets: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| gaussian_vector(&mut rng, dim, spec.speaker_shift_scale))
        .collect();

    let n_test = spec.test_utterances_per_speaker();
    let mut corpus = Corpus {
        spec: spec.clone(),
        features: Vec::new(),
        train_alignments: Vec::new(),
        test_alignments: Vec::new(),
        train_words: Vec::new(),
        test_words: Vec::new(),
        lexicon,
    };
    let period = spec.frame_period_ms;
    for (s, offset) in offsets.iter().enumerate() {
        let speaker_id = format!("spk{s:02}");
        for u in 0..spec.utterances_per_speaker {
            let utt_id = format!("{speaker_id}_utt{u:04}");
            let mut rng = rng_for(spec.seed, 1000 + (s * spec.utterances_per_speaker + u) as u64);
            let n_words = rng.random_range(spec.words_per_utterance.0..=spec.words_per_utterance.1);
            // (phone, n_frames) runs and word spans in frames
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut words: Vec<(usize, usize, usize)> = Vec::new();
            let mut t = 0;
            let push_silence = |runs: &mut Vec<(usize, usize)>, t: &mut usize, rng: &mut ChaCha8Rng| {
                let n = rng.random_range(spec.silence_frames.0..=spec.silence_frames.1);
                runs.push((silence, n));
                *t += n;
            };
            push_silence(&mut runs, &mut t, &mut rng);
            for _ in 0..n_words {
                let w = rng.random_range(0..corpus.lexicon.len());
                let start = t;
                for &p in &corpus.lexicon[w] {
                    let n = rng.random_range(spec.frames_per_phone.0..=spec.frames_per_phone.1);
                    runs.push((p, n));
                    t += n;
                }
                words.push((w, start, t));
                push_silence(&mut runs, &mut t, &mut rng);
            }

            let mut frames = Array2::<f32>::zeros((t, dim));
            let mut entries = Vec::with_capacity(runs.len());
            let mut f = 0;
            for &(p, n) in &runs {
                for _ in 0..n {
                    let noise = gaussian_vector(&mut rng, dim, spec.noise_scale);
                    for (d, v) in frames.row_mut(f).iter_mut().enumerate() {
                        *v = (prototypes[p][d] + offset[d] + noise[d]) as f32;
                    }
                    f += 1;
                }
                let phone = if p == silence { SILENCE_PHONE.to_string() } else { phone_name(p) };
                entries.push(PhoneEntry {
                    start_s: secs(f - n, period),
                    end_s: secs(f, period),
                    phone,
                });
            }
            let alignment = PhoneAlignment {
                utt_id: utt_id.clone(),
                speaker_id: speaker_id.clone(),
                entries,
            };
            let word_segments = words.iter().map(|&(w, a, b)| WordSegment {
                utt_id: utt_id.clone(),
                speaker_id: speaker_id.clone(),
                start_s: secs(a, period),
                end_s: secs(b, period),
                word: word_name(w),
            });
            if u + n_test >= spec.utterances_per_speaker {
                corpus.test_alignments.push(alignment);
                corpus.test_words.extend(word_segments);
            } else {
                corpus.train_alignments.push(alignment);
                corpus.train_words.extend(word_segments);
            }
            corpus.features.push(FrameMatrix::new(utt_id, frames, period));
        }
    }
    Ok(corpus)
}

/// Paths of the files written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub features: PathBuf,
    pub train_alignments: PathBuf,
    pub test_alignments: PathBuf,
    pub train_words: PathBuf,
    pub test_words: PathBuf,
    pub ground_truth_pairs: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.awf"),
            train_alignments: dir.join("train.ali.tsv"),
            test_alignments: dir.join("test.ali.tsv"),
            train_words: dir.join("train.words.tsv"),
            test_words: dir.join("test.words.tsv"),
            ground_truth_pairs: dir.join("gt_pairs.tsv"),
        }
    }
}

impl Corpus {
    /// Every same-key n-gram pair over the training alignments.
    pub fn ground_truth_pairs(&self, cfg: &NgramConfig) -> Result<PairSet> {
        let occ = extract_all(&self.train_alignments, cfg, self.spec.frame_period_ms)?;
        Ok(brute_force_pairs(&occ))
    }

    /// Writes features, alignments, word segments and ground-truth pairs
    /// into `dir`. Returns the paths and the ground-truth pairs.
    pub fn write(&self, dir: &Path, cfg: &NgramConfig) -> Result<(CorpusFiles, PairSet)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = CorpusFiles::in_dir(dir);
        write_features(&self.features, &files.features)?;
        write_alignments(&self.train_alignments, &files.train_alignments)?;
        write_alignments(&self.test_alignments, &files.test_alignments)?;
        write_word_segments(&self.train_words, &files.train_words)?;
        write_word_segments(&self.test_words, &files.test_words)?;
        let pairs = self.ground_truth_pairs(cfg)?;
        pairs.write_tsv(&files.ground_truth_pairs)?;
        Ok((files, pairs))
    }
}
