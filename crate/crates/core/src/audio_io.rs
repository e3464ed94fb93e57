//! Waveform ingestion, persistence and chunk sampling.
//!
//! Only 16 kHz, 16-bit, mono PCM WAV files are accepted. Samples are scaled
//! by `1/32768` on load so every amplitude lies in `[-1, 1)`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::scalar::{cast, to_f64, Scalar};

/// The single sample rate the pipeline operates at.
pub const SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid WAV file ({reason})")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: unsupported format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: sample rate {found} Hz is not supported (expected {expected} Hz)")]
    UnsupportedRate {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("waveform contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("crop length must be positive")]
    ZeroLength,
    #[error("cannot crop an empty waveform")]
    EmptyWaveform,
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> T {
        mean_square(&self.samples)
    }

    pub fn max_abs(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, s| if s.abs() > m { s.abs() } else { m })
    }

    /// Replaces the samples, keeping the sample rate.
    pub(crate) fn with_samples(&self, samples: Vec<T>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_square<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let sum = x.iter().fold(T::zero(), |acc, &s| acc + s * s);
    sum / T::from_usize(x.len()).unwrap()
}

fn io_err(path: &Path, source: std::io::Error) -> AudioError {
    AudioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a 16 kHz, 16-bit mono PCM WAV file.
pub fn load_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>, AudioError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(source) => io_err(path, source),
        hound::Error::Unsupported => AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "non-PCM or compressed encoding".into(),
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!(
                "{:?} {}-bit samples (expected 16-bit PCM)",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("{} channels (expected mono)", spec.channels),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate {
            path: path.to_path_buf(),
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    let scale = cast::<T>(1.0 / PCM_SCALE);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::from_i16(v).unwrap() * scale)
                .map_err(|e| AudioError::Malformed {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<T>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes a sample to 16-bit PCM, clamping at full scale.
pub fn quantize<T: Scalar>(s: T) -> i16 {
    let v = (to_f64(s) * PCM_SCALE).round();
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes a mono 16-bit PCM WAV file.
pub fn save_wav<T: Scalar>(w: &Waveform<T>, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let write_err = |e: hound::Error| AudioError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

/// Extracts `length` samples starting at `start`. Sources too short for the
/// request are tiled (repeat-padded) before cropping.
pub fn crop<T: Scalar>(w: &Waveform<T>, start: usize, length: usize) -> Result<Waveform<T>, AudioError> {
    if length == 0 {
        return Err(AudioError::ZeroLength);
    }
    if w.is_empty() {
        return Err(AudioError::EmptyWaveform);
    }
    let n = w.len();
    let samples = if start + length <= n {
        w.samples[start..start + length].to_vec()
    } else {
        (start..start + length).map(|i| w.samples[i % n]).collect()
    };
    Ok(w.with_samples(samples))
}

/// Start positions of the two views drawn by [`sample_disjoint_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairStarts {
    pub first: usize,
    pub second: usize,
    /// Whether the two `[start, start + chunk)` intervals are guaranteed disjoint.
    pub disjoint: bool,
}

/// Draws two chunk start positions for a signal of `len` samples.
///
/// When `len >= 2 * chunk`, the first start is uniform over the positions
/// that admit a non-overlapping partner and the second is uniform over the
/// positions disjoint from the first. Shorter signals get two independent
/// starts; signals shorter than one chunk are tiled by [`crop`].
pub fn sample_pair_starts<R: Rng + ?Sized>(len: usize, chunk: usize, rng: &mut R) -> PairStarts {
    if len >= 2 * chunk {
        let last = len - chunk;
        // Feasible first starts: [0, len - 2c] and [c, len - c].
        let low_hi = len - 2 * chunk;
        let low_count = low_hi + 1;
        let high_lo = chunk.max(low_hi + 1);
        let high_count = last + 1 - high_lo;
        let k = rng.random_range(0..low_count + high_count);
        let first = if k < low_count { k } else { high_lo + (k - low_count) };
        // Disjoint partners: [0, first - c] and [first + c, len - c].
        let left_count = if first >= chunk { first - chunk + 1 } else { 0 };
        let right_count = if first + chunk <= last { last - (first + chunk) + 1 } else { 0 };
        let j = rng.random_range(0..left_count + right_count);
        let second = if j < left_count { j } else { first + chunk + (j - left_count) };
        PairStarts {
            first,
            second,
            disjoint: true,
        }
    } else {
        let span = if len >= chunk { len - chunk + 1 } else { len.max(1) };
        PairStarts {
            first: rng.random_range(0..span),
            second: rng.random_range(0..span),
            disjoint: false,
        }
    }
}

/// Samples two `chunk`-sample views of one utterance.
pub fn sample_disjoint_pair<T: Scalar, R: Rng + ?Sized>(
    w: &Waveform<T>,
    chunk: usize,
    rng: &mut R,
) -> Result<(Waveform<T>, Waveform<T>, PairStarts), AudioError> {
    if chunk == 0 {
        return Err(AudioError::ZeroLength);
    }
    if w.is_empty() {
        return Err(AudioError::EmptyWaveform);
    }
    let starts = sample_pair_starts(w.len(), chunk, rng);
    Ok((crop(w, starts.first, chunk)?, crop(w, starts.second, chunk)?, starts))
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub speaker_id: Option<String>,
}

/// Utterance list: `utterance_id<TAB>relative/path.wav[<TAB>speaker_id]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, AudioError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(AudioError::Manifest {
                    path: PathBuf::new(),
                    line: i + 1,
                    reason: format!("duplicate utterance id {:?}", e.utterance_id),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, AudioError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| AudioError::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
            }
            let id = fields[0].trim();
            let rel = fields[1].trim();
            if id.is_empty() || rel.is_empty() {
                return Err(err("empty utterance id or path".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(err(format!("duplicate utterance id {id:?}")));
            }
            let speaker = fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty());
            entries.push(ManifestEntry {
                utterance_id: id.to_string(),
                path: base.join(rel),
                speaker_id: speaker.map(str::to_string),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Renders the manifest with paths made relative to `base` when possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&e.utterance_id);
            out.push('\t');
            out.push_str(&rel.to_string_lossy());
            if let Some(s) = &e.speaker_id {
                out.push('\t');
                out.push_str(s);
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
