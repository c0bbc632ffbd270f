//! Segment ingestion and preprocessing: bandpass filtering, resampling to
//! 32 Hz, per-segment scaling to [0, 1], subject-disjoint splitting, and
//! the segment file format.
//!
//! Preprocessing pipeline: optional anti-alias lowpass + 4x decimation
//! (128 Hz sources), zero-phase 2nd-order Butterworth bandpass 0.5-8 Hz,
//! then min-max scaling. A constant signal maps to all 0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;

/// Samples per segment: 25 s at 32 Hz.
pub const SEGMENT_LEN: usize = 800;
/// Target sampling rate after preprocessing.
pub const TARGET_RATE: u32 = 32;
/// Segment duration in seconds.
pub const SEGMENT_SECONDS: f64 = 25.0;

/// Bandpass corners in Hz. Brackets plausible pulse rates and removes
/// baseline drift.
pub const BANDPASS_LOW_HZ: f64 = 0.5;
pub const BANDPASS_HIGH_HZ: f64 = 8.0;

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Parse { line: usize, message: String },
    BadRate(u32),
    BadDuration { expected: usize, got: usize },
    NonFiniteInput,
    TooFewSubjects(usize),
    BadFractions([f64; 3]),
    BadSpec(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "data io: {}", e),
            DataError::Parse { line, message } => write!(f, "record {}: {}", line, message),
            DataError::BadRate(r) => {
                write!(f, "unsupported source rate {} Hz (expected 128 or 32)", r)
            }
            DataError::BadDuration { expected, got } => {
                write!(f, "segment must cover 25 s ({} samples), got {}", expected, got)
            }
            DataError::NonFiniteInput => write!(f, "input contains NaN or infinite samples"),
            DataError::TooFewSubjects(n) => {
                write!(f, "subject split requires at least 3 subjects, got {}", n)
            }
            DataError::BadFractions(fr) => {
                write!(f, "split fractions {:?} must be positive and sum to 1", fr)
            }
            DataError::BadSpec(msg) => write!(f, "invalid synthesis spec: {}", msg),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

/// One fixed-length PPG window with optional AF label and noise metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f32>,
    pub subject_id: String,
    /// 1 = AF, 0 = normal sinus rhythm, `None` = unlabeled.
    pub label: Option<u8>,
    /// Synthetic provenance only: mixture intensity in [0, 1].
    pub noise_level: Option<f32>,
}

// ── Filtering ────────────────────────────────────────────────────────

/// One second-order IIR section (Direct Form II transposed).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Butterworth-prototype lowpass via bilinear transform.
    fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let k = (std::f64::consts::PI * fc / fs).tan();
        let norm = 1.0 / (1.0 + k / q + k * k);
        Biquad {
            b0: k * k * norm,
            b1: 2.0 * k * k * norm,
            b2: k * k * norm,
            a1: 2.0 * (k * k - 1.0) * norm,
            a2: (1.0 - k / q + k * k) * norm,
        }
    }

    /// Butterworth-prototype highpass via bilinear transform.
    fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let k = (std::f64::consts::PI * fc / fs).tan();
        let norm = 1.0 / (1.0 + k / q + k * k);
        Biquad {
            b0: norm,
            b1: -2.0 * norm,
            b2: norm,
            a1: 2.0 * (k * k - 1.0) * norm,
            a2: (1.0 - k / q + k * k) * norm,
        }
    }

    fn run(&self, x: &mut [f64]) {
        let mut z1 = 0.0f64;
        let mut z2 = 0.0f64;
        for v in x.iter_mut() {
            let y = self.b0 * *v + z1;
            z1 = self.b1 * *v - self.a1 * y + z2;
            z2 = self.b2 * *v - self.a2 * y;
            *v = y;
        }
    }
}

const BUTTERWORTH_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Zero-phase filtering: odd-extension padding, forward pass, reverse,
/// forward again, reverse, crop.
fn filtfilt(signal: &[f64], sections: &[Biquad]) -> Vec<f64> {
    let n = signal.len();
    let pad = 200.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        ext.push(2.0 * signal[0] - signal[pad - i]);
    }
    ext.extend_from_slice(signal);
    for i in 0..pad {
        ext.push(2.0 * signal[n - 1] - signal[n - 2 - i]);
    }
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase 2nd-order Butterworth bandpass, realized as a highpass /
/// lowpass cascade.
fn bandpass(signal: &[f64], fs: f64) -> Vec<f64> {
    let sections = [
        Biquad::highpass(BANDPASS_LOW_HZ, fs, BUTTERWORTH_Q),
        Biquad::lowpass(BANDPASS_HIGH_HZ, fs, BUTTERWORTH_Q),
    ];
    filtfilt(signal, &sections)
}

/// Anti-alias lowpass (4th-order Butterworth at 12 Hz) and 4x decimation.
fn decimate_128_to_32(signal: &[f64]) -> Vec<f64> {
    // Butterworth order-4 pole Q values.
    let sections = [
        Biquad::lowpass(12.0, 128.0, 0.541_196_1),
        Biquad::lowpass(12.0, 128.0, 1.306_562_96),
    ];
    let filtered = filtfilt(signal, &sections);
    filtered.iter().step_by(4).copied().collect()
}

/// Preprocess one raw segment at 128 or 32 Hz into the canonical
/// 800-sample [0, 1] representation.
pub fn preprocess(raw: &[f32], source_rate: u32) -> Result<Vec<f32>, DataError> {
    let expected = match source_rate {
        128 => 3200,
        32 => SEGMENT_LEN,
        other => return Err(DataError::BadRate(other)),
    };
    if raw.len() != expected {
        return Err(DataError::BadDuration { expected, got: raw.len() });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteInput);
    }

    // A constant signal carries no pulse information and would reduce to
    // filter-transient dust after the bandpass; map it to mid-scale.
    let raw_min = raw.iter().cloned().fold(f32::INFINITY, f32::min);
    let raw_max = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if (raw_max - raw_min) as f64 <= 1e-7 * (raw_max.abs().max(raw_min.abs()) as f64 + 1.0) {
        return Ok(vec![0.5; SEGMENT_LEN]);
    }

    let mut signal: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    if source_rate == 128 {
        signal = decimate_128_to_32(&signal);
    }
    let filtered = bandpass(&signal, TARGET_RATE as f64);

    let min = filtered.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = filtered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range < 1e-10 {
        return Ok(vec![0.5; SEGMENT_LEN]);
    }
    Ok(filtered.iter().map(|&v| (((v - min) / range).clamp(0.0, 1.0)) as f32).collect())
}

// ── Subject splits ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Subject-to-partition assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub assignment: BTreeMap<String, SplitPart>,
}

impl SplitManifest {
    /// Route segments to (train, val, test) following their subjects.
    pub fn partition(&self, segments: &[Segment]) -> (Vec<Segment>, Vec<Segment>, Vec<Segment>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for seg in segments {
            match self.assignment.get(&seg.subject_id) {
                Some(SplitPart::Train) => train.push(seg.clone()),
                Some(SplitPart::Val) => val.push(seg.clone()),
                Some(SplitPart::Test) => test.push(seg.clone()),
                None => {}
            }
        }
        (train, val, test)
    }
}

/// Seeded shuffle of subject ids, partitioned by fractions. Every segment
/// follows its subject, so the partitions are subject-disjoint by
/// construction.
pub fn split_subjects(
    segments: &[Segment],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitManifest, DataError> {
    if fractions.iter().any(|&f| f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DataError::BadFractions(fractions));
    }
    // First-appearance order keeps the id list independent of map layout.
    let mut ids: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for seg in segments {
        if seen.insert(seg.subject_id.clone()) {
            ids.push(seg.subject_id.clone());
        }
    }
    let n = ids.len();
    if n < 3 {
        return Err(DataError::TooFewSubjects(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x7370_6c69));
    ids.shuffle(&mut rng);

    let n_train = (((fractions[0] * n as f64).round() as usize).max(1)).min(n - 2);
    let n_val = (((fractions[1] * n as f64).round() as usize).max(1)).min(n - n_train - 1);
    let mut assignment = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let part = if i < n_train {
            SplitPart::Train
        } else if i < n_train + n_val {
            SplitPart::Val
        } else {
            SplitPart::Test
        };
        assignment.insert(id, part);
    }
    Ok(SplitManifest { seed, fractions, assignment })
}

// ── Segment file format ──────────────────────────────────────────────
//
// Header line: `bbseg v1 n=<count>`
// Record line: `subject_id,label,noise_level,<800 comma-separated floats>`
// label is -1 when absent; noise_level is -1 when absent.

pub fn save_segments(segments: &[Segment], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&format!("bbseg v1 n={}\n", segments.len()));
    for (i, seg) in segments.iter().enumerate() {
        if seg.subject_id.contains(',') || seg.subject_id.is_empty() {
            return Err(DataError::Parse {
                line: i + 2,
                message: format!("subject id {:?} must be non-empty and comma-free", seg.subject_id),
            });
        }
        if seg.samples.len() != SEGMENT_LEN {
            return Err(DataError::Parse {
                line: i + 2,
                message: format!("segment has {} samples, expected {}", seg.samples.len(), SEGMENT_LEN),
            });
        }
        out.push_str(&seg.subject_id);
        out.push(',');
        match seg.label {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push_str("-1"),
        }
        out.push(',');
        match seg.noise_level {
            Some(nl) => out.push_str(&format!("{}", nl)),
            None => out.push_str("-1"),
        }
        for v in &seg.samples {
            out.push(',');
            out.push_str(&format!("{}", v));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_segments(path: &Path) -> Result<Vec<Segment>, DataError> {
    let text = fs::read_to_string(path)?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let count: usize = header
        .strip_prefix("bbseg v1 n=")
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| DataError::Parse {
            line: 1,
            message: format!("bad header {:?}", header),
        })?;

    let mut segments = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        if segments.len() == count {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("more records than header count {}", count),
            });
        }
        let mut fields = line.split(',');
        let subject_id = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or(DataError::Parse { line: line_no, message: "missing subject id".into() })?
            .to_string();
        let label_raw: i32 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(DataError::Parse { line: line_no, message: "bad label field".into() })?;
        let label = match label_raw {
            -1 => None,
            0 => Some(0u8),
            1 => Some(1u8),
            other => {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("label {} outside {{-1, 0, 1}}", other),
                })
            }
        };
        let noise_raw: f32 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(DataError::Parse { line: line_no, message: "bad noise_level field".into() })?;
        let noise_level = if noise_raw < 0.0 {
            None
        } else if noise_raw <= 1.0 {
            Some(noise_raw)
        } else {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("noise_level {} outside [0, 1]", noise_raw),
            });
        };
        let samples: Vec<f32> = fields
            .map(|s| {
                s.parse::<f32>().map_err(|_| DataError::Parse {
                    line: line_no,
                    message: format!("bad sample value {:?}", s),
                })
            })
            .collect::<Result<_, _>>()?;
        if samples.len() != SEGMENT_LEN {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("{} samples, expected {}", samples.len(), SEGMENT_LEN),
            });
        }
        segments.push(Segment { samples, subject_id, label, noise_level });
    }
    if segments.len() != count {
        return Err(DataError::Parse {
            line: segments.len() + 2,
            message: format!("header promised {} records, found {}", count, segments.len()),
        });
    }
    Ok(segments)
}

pub fn save_manifest(manifest: &SplitManifest, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest, DataError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse { line: 0, message: e.to_string() })
}
