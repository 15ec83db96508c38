//! On-disk formats for frame features, phone alignments and word segments.
//!
//! Features live in the binary AWF container (little-endian):
//!
//! ```text
//! "AWF1" | u32 version=1 | u32 dim | f32 frame_period_ms | u64 utterance_count
//! per utterance: u16 id_len | id (UTF-8) | u64 frames | frames*dim f32, row-major
//! ```
//!
//! [`FeatureStore`] memory-maps the file and indexes utterance offsets on
//! open; frame payloads are decoded only when a segment is requested.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use ndarray::Array2;

use crate::error::{Error, Result};

pub const AWF_MAGIC: &[u8; 4] = b"AWF1";
pub const AWF_VERSION: u32 = 1;
pub const DEFAULT_FRAME_PERIOD_MS: f32 = 20.0;

/// Labels that never take part in phone n-grams.
pub const DEFAULT_SILENCE_LABELS: [&str; 4] = ["sil", "sp", "spn", "nsn"];

/// Frame-level representations of one utterance (`T x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub utt_id: String,
    pub frames: Array2<f32>,
    pub frame_period_ms: f32,
}

impl FrameMatrix {
    pub fn new(utt_id: impl Into<String>, frames: Array2<f32>, frame_period_ms: f32) -> Self {
        Self {
            utt_id: utt_id.into(),
            frames,
            frame_period_ms,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Half-open frame interval `[start_frame, end_frame)` within an utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentRef {
    pub utt_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl SegmentRef {
    pub fn new(utt_id: impl Into<String>, start_frame: usize, end_frame: usize) -> Self {
        Self {
            utt_id: utt_id.into(),
            start_frame,
            end_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    /// Two segments overlap when they share at least one frame of the same utterance.
    pub fn overlaps(&self, other: &SegmentRef) -> bool {
        self.utt_id == other.utt_id
            && self.start_frame < other.end_frame
            && other.start_frame < self.end_frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneEntry {
    pub start_s: f64,
    pub end_s: f64,
    pub phone: String,
}

/// Time-stamped phone sequence of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneAlignment {
    pub utt_id: String,
    pub speaker_id: String,
    pub entries: Vec<PhoneEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordSegment {
    pub utt_id: String,
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub word: String,
}

impl WordSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

// ---------------------------------------------------------------------------
// AWF writer / reader

/// Writes `records` to `path` in AWF format.
pub fn write_features(records: &[FrameMatrix], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (dim, period) = match records.first() {
        Some(r) => (r.dim(), r.frame_period_ms),
        None => (0, DEFAULT_FRAME_PERIOD_MS),
    };
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::invalid("frame_period_ms must be positive"));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.utt_id.as_str()) {
            return Err(Error::DuplicateUtterance(r.utt_id.clone()));
        }
        if r.dim() != dim {
            return Err(Error::InconsistentDimension {
                expected: dim,
                found: r.dim(),
            });
        }
        if r.frame_period_ms != period {
            return Err(Error::invalid(format!(
                "inconsistent frame period for '{}': {} vs {}",
                r.utt_id, r.frame_period_ms, period
            )));
        }
        if r.num_frames() == 0 || r.dim() == 0 {
            return Err(Error::invalid(format!("empty matrix for '{}'", r.utt_id)));
        }
        if r.utt_id.len() > u16::MAX as usize {
            return Err(Error::invalid("utterance id too long"));
        }
        if r.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(r.utt_id.clone()));
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(AWF_MAGIC).map_err(io)?;
    w.write_all(&AWF_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&period.to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for r in records {
        w.write_all(&(r.utt_id.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(r.utt_id.as_bytes()).map_err(io)?;
        w.write_all(&(r.num_frames() as u64).to_le_bytes()).map_err(io)?;
        for v in r.frames.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone)]
struct UttEntry {
    id: String,
    offset: usize,
    frames: usize,
}

/// Read-only view of an AWF file. Cheap to share between threads.
#[derive(Debug)]
pub struct FeatureStore {
    path: PathBuf,
    map: Mmap,
    dim: usize,
    frame_period_ms: f32,
    utts: Vec<UttEntry>,
    by_id: HashMap<String, usize>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Opens and indexes an AWF file.
pub fn open_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    FeatureStore::open(path)
}

impl FeatureStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: the map is read-only; the file is not expected to change while open.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;

        let mut cur = Cursor { buf: &map, pos: 0 };
        let header_err = || Error::UnrecognizedFormat(format!("{}: truncated header", path.display()));
        let magic = cur.take(4).ok_or_else(header_err)?;
        if magic != AWF_MAGIC {
            return Err(Error::UnrecognizedFormat(format!(
                "{}: bad magic {:?}",
                path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.u32().ok_or_else(header_err)?;
        if version != AWF_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: AWF_VERSION,
            });
        }
        let dim = cur.u32().ok_or_else(header_err)? as usize;
        let frame_period_ms = cur.f32().ok_or_else(header_err)?;
        let count = cur.u64().ok_or_else(header_err)? as usize;
        if !(frame_period_ms.is_finite() && frame_period_ms > 0.0) {
            return Err(Error::UnrecognizedFormat("invalid frame period".into()));
        }
        if count > 0 && dim == 0 {
            return Err(Error::UnrecognizedFormat("zero feature dimension".into()));
        }

        let mut utts = Vec::with_capacity(count.min(1 << 20));
        let mut by_id = HashMap::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let trunc = || Error::TruncatedPayload(format!("#{i} (header)"));
            let id_len = cur.u16().ok_or_else(trunc)? as usize;
            let id_bytes = cur.take(id_len).ok_or_else(trunc)?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| Error::UnrecognizedFormat(format!("utterance #{i}: id is not UTF-8")))?
                .to_owned();
            let frames = cur.u64().ok_or_else(|| Error::TruncatedPayload(id.clone()))? as usize;
            let bytes = frames
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::TruncatedPayload(id.clone()))?;
            let offset = cur.pos;
            if cur.take(bytes).is_none() {
                return Err(Error::TruncatedPayload(id));
            }
            if by_id.insert(id.clone(), utts.len()).is_some() {
                return Err(Error::DuplicateUtterance(id));
            }
            utts.push(UttEntry { id, offset, frames });
        }
        if cur.pos != map.len() {
            return Err(Error::UnrecognizedFormat(format!(
                "{}: {} trailing bytes",
                path.display(),
                map.len() - cur.pos
            )));
        }
        Ok(Self {
            path: path.to_owned(),
            map,
            dim,
            frame_period_ms,
            utts,
            by_id,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_period_ms(&self) -> f32 {
        self.frame_period_ms
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    /// Utterance ids in file order.
    pub fn utt_ids(&self) -> impl Iterator<Item = &str> {
        self.utts.iter().map(|u| u.id.as_str())
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.by_id.contains_key(utt_id)
    }

    /// Number of frames of `utt_id`.
    pub fn num_frames(&self, utt_id: &str) -> Result<usize> {
        self.entry(utt_id).map(|e| e.frames)
    }

    fn entry(&self, utt_id: &str) -> Result<&UttEntry> {
        self.by_id
            .get(utt_id)
            .map(|&i| &self.utts[i])
            .ok_or_else(|| Error::UnknownUtterance(utt_id.to_owned()))
    }

    /// Checks that `seg` names a known utterance and lies within it.
    pub fn check_segment(&self, seg: &SegmentRef) -> Result<()> {
        let e = self.entry(&seg.utt_id)?;
        if seg.start_frame >= seg.end_frame || seg.end_frame > e.frames {
            return Err(Error::SegmentOutOfRange {
                utt_id: seg.utt_id.clone(),
                start: seg.start_frame,
                end: seg.end_frame,
                len: e.frames,
            });
        }
        Ok(())
    }

    /// Rows `[start_frame, end_frame)` of the segment's utterance.
    pub fn get_frames(&self, seg: &SegmentRef) -> Result<Array2<f32>> {
        self.check_segment(seg)?;
        let e = self.entry(&seg.utt_id)?;
        let row_bytes = self.dim * 4;
        let start = e.offset + seg.start_frame * row_bytes;
        let end = e.offset + seg.end_frame * row_bytes;
        let values: Vec<f32> = self.map[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((seg.len(), self.dim), values).expect("row-major payload"))
    }

    /// The whole utterance as a [`FrameMatrix`].
    pub fn utterance(&self, utt_id: &str) -> Result<FrameMatrix> {
        let n = self.num_frames(utt_id)?;
        let frames = self.get_frames(&SegmentRef::new(utt_id, 0, n))?;
        Ok(FrameMatrix::new(utt_id, frames, self.frame_period_ms))
    }

    /// Duration of an utterance in seconds.
    pub fn duration_s(&self, utt_id: &str) -> Result<f64> {
        Ok(self.num_frames(utt_id)? as f64 * self.frame_period_ms as f64 / 1000.0)
    }

    /// Maps a second-based span onto this store's frame grid.
    ///
    /// The end frame may overshoot the utterance by one frame when the time
    /// stamp falls inside the final partial frame; it is clamped in that case.
    pub fn resolve(&self, utt_id: &str, start_s: f64, end_s: f64) -> Result<SegmentRef> {
        let n = self.num_frames(utt_id)?;
        let (start, mut end) = seconds_to_segment(start_s, end_s, self.frame_period_ms)?;
        if end == n + 1 && start < n {
            end = n;
        }
        let seg = SegmentRef::new(utt_id, start, end);
        self.check_segment(&seg)?;
        Ok(seg)
    }
}

/// Snap tolerance, in frames, applied before rounding time stamps.
const FRAME_SNAP: f64 = 1e-6;

/// Converts `[start_s, end_s)` into frame bounds: floor of the start, ceil
/// of the end, widened to at least one frame.
pub fn seconds_to_segment(start_s: f64, end_s: f64, frame_period_ms: f32) -> Result<(usize, usize)> {
    if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s < 0.0 {
        return Err(Error::invalid(format!("negative or non-finite time ({start_s}, {end_s})")));
    }
    if end_s < start_s {
        return Err(Error::invalid(format!("end {end_s} precedes start {start_s}")));
    }
    if !(frame_period_ms > 0.0) {
        return Err(Error::invalid("frame period must be positive"));
    }
    let period = frame_period_ms as f64;
    let to_frames = |t: f64| {
        let x = t * 1000.0 / period;
        let r = x.round();
        if (x - r).abs() < FRAME_SNAP {
            r
        } else {
            x
        }
    };
    let start = to_frames(start_s).floor() as usize;
    let end = (to_frames(end_s).ceil() as usize).max(start + 1);
    Ok((start, end))
}

// ---------------------------------------------------------------------------
// Text formats

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_time(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} '{field}'"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("invalid {what} '{field}'"),
        });
    }
    Ok(v)
}

/// Splits a five-column TSV line: `utt  speaker  start  end  label`.
fn split_record(raw: &str, line: usize) -> Result<(&str, &str, f64, f64, &str)> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line,
            message: format!("expected 5 tab-separated fields, found {}", fields.len()),
        });
    }
    let start = parse_time(fields[2], line, "start time")?;
    let end = parse_time(fields[3], line, "end time")?;
    if end <= start {
        return Err(Error::Parse {
            line,
            message: format!("end {end} is not after start {start}"),
        });
    }
    if fields[0].is_empty() || fields[4].is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty utterance id or label".into(),
        });
    }
    Ok((fields[0], fields[1], start, end, fields[4]))
}

const OVERLAP_TOLERANCE_S: f64 = 1e-6;

/// Parses alignment text (`utt<TAB>speaker<TAB>start<TAB>end<TAB>phone`).
pub fn parse_alignments(text: &str) -> Result<Vec<PhoneAlignment>> {
    let mut out: Vec<PhoneAlignment> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (utt, spk, start, end, phone) = split_record(raw, line)?;
        let slot = *index.entry(utt.to_owned()).or_insert_with(|| {
            out.push(PhoneAlignment {
                utt_id: utt.to_owned(),
                speaker_id: spk.to_owned(),
                entries: Vec::new(),
            });
            out.len() - 1
        });
        let ali = &mut out[slot];
        if ali.speaker_id != spk {
            return Err(Error::Parse {
                line,
                message: format!("speaker '{spk}' conflicts with '{}' for '{utt}'", ali.speaker_id),
            });
        }
        if let Some(prev) = ali.entries.last() {
            if start < prev.start_s {
                return Err(Error::Parse {
                    line,
                    message: format!("unsorted entries for '{utt}'"),
                });
            }
            if prev.end_s > start + OVERLAP_TOLERANCE_S {
                return Err(Error::Parse {
                    line,
                    message: format!("phone overlaps previous entry for '{utt}'"),
                });
            }
        }
        ali.entries.push(PhoneEntry {
            start_s: start,
            end_s: end,
            phone: phone.to_owned(),
        });
    }
    Ok(out)
}

pub fn load_alignments(path: impl AsRef<Path>) -> Result<Vec<PhoneAlignment>> {
    parse_alignments(&read_text(path.as_ref())?)
}

/// Parses word-segment text (`utt<TAB>speaker<TAB>start<TAB>end<TAB>word`).
pub fn parse_word_segments(text: &str) -> Result<Vec<WordSegment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (utt, spk, start, end, word) = split_record(raw, i + 1)?;
        out.push(WordSegment {
            utt_id: utt.to_owned(),
            speaker_id: spk.to_owned(),
            start_s: start,
            end_s: end,
            word: word.to_owned(),
        });
    }
    Ok(out)
}

pub fn load_word_segments(path: impl AsRef<Path>) -> Result<Vec<WordSegment>> {
    parse_word_segments(&read_text(path.as_ref())?)
}

fn fmt_time(t: f64) -> String {
    format!("{t:.6}")
}

pub fn write_alignments(alignments: &[PhoneAlignment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for a in alignments {
        for e in &a.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                a.utt_id,
                a.speaker_id,
                fmt_time(e.start_s),
                fmt_time(e.end_s),
                e.phone
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_word_segments(segments: &[WordSegment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for w in segments {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            w.utt_id,
            w.speaker_id,
            fmt_time(w.start_s),
            fmt_time(w.end_s),
            w.word
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Keeps words with at least `min_chars` Unicode scalar values and lasting at
/// least `min_dur_s` seconds.
pub fn filter_eval_words(segments: &[WordSegment], min_chars: usize, min_dur_s: f64) -> Vec<WordSegment> {
    segments
        .iter()
        .filter(|w| w.word.chars().count() >= min_chars && w.duration_s() >= min_dur_s)
        .cloned()
        .collect()
}

/// Character threshold for a language: `short_word_chars` for languages
/// configured as short-word (e.g. Mandarin), `default_chars` otherwise.
pub fn min_chars_for(language: &str, short_word_languages: &[&str], default_chars: usize, short_word_chars: usize) -> usize {
    if short_word_languages.iter().any(|l| l.eq_ignore_ascii_case(language)) {
        short_word_chars
    } else {
        default_chars
    }
}
