//! Additive-noise and reverberation augmentation.
//!
//! Each training view is independently distorted: first an interfering
//! source (speech, music or noise) is mixed in at an SNR drawn from the
//! category's range, then the result is convolved with a room impulse
//! response. Either stage fires with its own probability.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;
use walkdir::WalkDir;

use crate::audio_io::{crop, load_wav, mean_square, AudioError, Waveform};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("signal lengths differ: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("clean signal has zero power; SNR is undefined")]
    SilentClean,
    #[error("noise signal has zero power")]
    SilentNoise,
    #[error("impulse response is empty or all zeros")]
    ZeroImpulseResponse,
    #[error("noise corpus has no files but the noise branch fired")]
    EmptyNoiseCorpus,
    #[error("impulse-response corpus is empty but the reverberation branch fired")]
    EmptyRirCorpus,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Interference category of a noise source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoiseCategory {
    Speech,
    Music,
    Noise,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 3] = [NoiseCategory::Speech, NoiseCategory::Music, NoiseCategory::Noise];

    /// Default SNR range in dB for the category.
    pub fn default_snr_range(self) -> (f64, f64) {
        match self {
            NoiseCategory::Speech => (13.0, 20.0),
            NoiseCategory::Music => (5.0, 15.0),
            NoiseCategory::Noise => (0.0, 15.0),
        }
    }

    /// Subdirectory name used when loading a corpus from disk.
    pub fn dir_name(self) -> &'static str {
        match self {
            NoiseCategory::Speech => "speech",
            NoiseCategory::Music => "music",
            NoiseCategory::Noise => "noise",
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSource<T> {
    pub category: NoiseCategory,
    pub files: Vec<Waveform<T>>,
    pub snr_range_db: (f64, f64),
}

/// Interfering signals grouped by category.
#[derive(Debug, Clone, Default)]
pub struct NoiseCorpus<T> {
    sources: Vec<NoiseSource<T>>,
}

impl<T: Scalar> NoiseCorpus<T> {
    pub fn new(sources: Vec<NoiseSource<T>>) -> Result<Self, AugmentError> {
        for s in &sources {
            let (lo, hi) = s.snr_range_db;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AugmentError::InvalidPolicy(format!(
                    "{} SNR range [{lo}, {hi}] is not ordered",
                    s.category
                )));
            }
        }
        Ok(Self { sources })
    }

    /// Loads `speech/`, `music/` and `noise/` subdirectories (any of which
    /// may be missing) with the default SNR ranges.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let dir = dir.as_ref();
        let mut sources = Vec::new();
        for category in NoiseCategory::ALL {
            let sub = dir.join(category.dir_name());
            if !sub.is_dir() {
                continue;
            }
            let files = load_wav_tree(&sub)?;
            if !files.is_empty() {
                sources.push(NoiseSource {
                    category,
                    files,
                    snr_range_db: category.default_snr_range(),
                });
            }
        }
        Self::new(sources)
    }

    pub fn sources(&self) -> &[NoiseSource<T>] {
        &self.sources
    }

    pub fn is_empty(&self) -> bool {
        self.sources.iter().all(|s| s.files.is_empty())
    }
}

/// Room impulse responses.
#[derive(Debug, Clone, Default)]
pub struct RirCorpus<T> {
    pub files: Vec<Waveform<T>>,
}

impl<T: Scalar> RirCorpus<T> {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, AugmentError> {
        Ok(Self {
            files: load_wav_tree(dir.as_ref())?,
        })
    }
}

fn load_wav_tree<T: Scalar>(dir: &Path) -> Result<Vec<Waveform<T>>, AugmentError> {
    let mut paths: Vec<_> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_wav(p).map_err(Into::into)).collect()
}

/// How each view is distorted.
#[derive(Debug, Clone)]
pub struct AugmentPolicy<T> {
    pub p_noise: f64,
    pub p_reverb: f64,
    pub noise: NoiseCorpus<T>,
    pub rir: RirCorpus<T>,
}

impl<T: Scalar> AugmentPolicy<T> {
    pub const DEFAULT_P_NOISE: f64 = 0.75;
    pub const DEFAULT_P_REVERB: f64 = 0.5;

    pub fn new(p_noise: f64, p_reverb: f64, noise: NoiseCorpus<T>, rir: RirCorpus<T>) -> Result<Self, AugmentError> {
        for (name, p) in [("p_noise", p_noise), ("p_reverb", p_reverb)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidPolicy(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(Self {
            p_noise,
            p_reverb,
            noise,
            rir,
        })
    }

    /// A policy that never modifies its input.
    pub fn disabled() -> Self {
        Self {
            p_noise: 0.0,
            p_reverb: 0.0,
            noise: NoiseCorpus::default(),
            rir: RirCorpus::default(),
        }
    }
}

/// Result of [`mix_at_snr`].
#[derive(Debug, Clone)]
pub struct Mixture<T> {
    pub signal: Waveform<T>,
    /// Gain applied to the noise before summation.
    pub noise_gain: T,
    /// Factor (≤ 1) applied to the sum to keep it within full scale.
    pub peak_scale: T,
}

/// Adjusts `noise` to exactly `len` samples: a uniform random crop when
/// longer, tiling when shorter. Returns the adjusted signal and the crop offset into `noise`.
pub fn fit_to_length<T: Scalar, R: Rng + ?Sized>(
    noise: &Waveform<T>,
    len: usize,
    rng: &mut R,
) -> Result<(Waveform<T>, usize), AugmentError> {
    let start = if noise.len() > len {
        rng.random_range(0..=noise.len() - len)
    } else {
        0
    };
    Ok((crop(noise, start, len)?, start))
}

/// Gain that brings `noise_power` to `clean_power / 10^(snr_db/10)`.
pub fn snr_gain<T: Scalar>(clean_power: T, noise_power: T, snr_db: f64) -> T {
    (clean_power / (noise_power * cast::<T>(10f64.powf(snr_db / 10.0)))).sqrt()
}

/// Adds `noise` to `clean` at the requested SNR. Both signals must already
/// have the same length; powers are mean squares over the whole signal.
pub fn mix_at_snr<T: Scalar>(clean: &Waveform<T>, noise: &Waveform<T>, snr_db: f64) -> Result<Mixture<T>, AugmentError> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(AugmentError::RateMismatch(clean.sample_rate(), noise.sample_rate()));
    }
    if clean.len() != noise.len() {
        return Err(AugmentError::LengthMismatch(clean.len(), noise.len()));
    }
    let pc = clean.power();
    let pn = noise.power();
    if pc <= T::zero() {
        return Err(AugmentError::SilentClean);
    }
    if pn <= T::zero() {
        return Err(AugmentError::SilentNoise);
    }
    let gain = snr_gain(pc, pn, snr_db);
    let mut mixed: Vec<T> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&c, &n)| c + gain * n)
        .collect();
    let peak = mixed.iter().fold(T::zero(), |m, s| m.max(s.abs()));
    let mut peak_scale = T::one();
    if peak > T::one() {
        peak_scale = T::one() / peak;
        mixed.iter_mut().for_each(|s| *s = *s * peak_scale);
    }
    Ok(Mixture {
        signal: clean.with_samples(mixed),
        noise_gain: gain,
        peak_scale,
    })
}

/// Full linear convolution computed in the frequency domain.
pub fn convolve_full<T: Scalar>(x: &[T], h: &[T]) -> Vec<T> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[T]| {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); size];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = s;
        }
        buf
    };
    let mut xf = pad(x);
    let mut hf = pad(h);
    fwd.process(&mut xf);
    fwd.process(&mut hf);
    for (a, b) in xf.iter_mut().zip(&hf) {
        *a = *a * *b;
    }
    inv.process(&mut xf);
    let norm = T::one() / T::from_usize(size).unwrap();
    xf[..out_len].iter().map(|c| c.re * norm).collect()
}

/// Index of the largest-magnitude sample (first one on ties).
pub fn peak_index<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, s) in x.iter().enumerate() {
        if s.abs() > x[best].abs() {
            best = i;
        }
    }
    best
}

/// Convolves `x` with `rir`, keeps `len(x)` samples starting at the RIR's
/// direct-path peak, and rescales to the input's peak amplitude.
pub fn reverberate<T: Scalar>(x: &Waveform<T>, rir: &Waveform<T>) -> Result<Waveform<T>, AugmentError> {
    if x.sample_rate() != rir.sample_rate() {
        return Err(AugmentError::RateMismatch(x.sample_rate(), rir.sample_rate()));
    }
    if rir.is_empty() || rir.samples().iter().all(|s| s.is_zero()) {
        return Err(AugmentError::ZeroImpulseResponse);
    }
    if x.is_empty() {
        return Ok(x.clone());
    }
    let full = convolve_full(x.samples(), rir.samples());
    let p = peak_index(rir.samples());
    let mut out = full[p..p + x.len()].to_vec();
    let target = x.max_abs();
    let got = out.iter().fold(T::zero(), |m, s| m.max(s.abs()));
    if got > T::zero() {
        let k = target / got;
        out.iter_mut().for_each(|s| *s = *s * k);
    }
    Ok(x.with_samples(out))
}

/// What [`apply_policy_logged`] did to one view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentLog {
    pub noise: Option<NoiseEvent>,
    /// The noise branch fired on a silent chunk and was skipped.
    pub skipped_silent: bool,
    pub rir_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEvent {
    pub category: NoiseCategory,
    pub file_index: usize,
    /// Start of the noise crop within the file (0 when tiled).
    pub noise_offset: usize,
    pub snr_db: f64,
    pub noise_gain: f64,
    pub peak_scale: f64,
}

/// Applies the policy: optional noise mixing, then optional reverberation.
pub fn apply_policy<T: Scalar, R: Rng + ?Sized>(
    x: &Waveform<T>,
    policy: &AugmentPolicy<T>,
    rng: &mut R,
) -> Result<Waveform<T>, AugmentError> {
    apply_policy_logged(x, policy, rng).map(|(w, _)| w)
}

pub fn apply_policy_logged<T: Scalar, R: Rng + ?Sized>(
    x: &Waveform<T>,
    policy: &AugmentPolicy<T>,
    rng: &mut R,
) -> Result<(Waveform<T>, AugmentLog), AugmentError> {
    let mut log = AugmentLog::default();
    let mut out = x.clone();

    if rng.random::<f64>() < policy.p_noise {
        let live: Vec<&NoiseSource<T>> = policy.noise.sources.iter().filter(|s| !s.files.is_empty()).collect();
        if live.is_empty() {
            return Err(AugmentError::EmptyNoiseCorpus);
        }
        let source = live[rng.random_range(0..live.len())];
        let file_index = rng.random_range(0..source.files.len());
        let (lo, hi) = source.snr_range_db;
        let snr_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (noise, noise_offset) = fit_to_length(&source.files[file_index], out.len(), rng)?;
        if mean_square(out.samples()) > T::zero() {
            let mix = mix_at_snr(&out, &noise, snr_db)?;
            log.noise = Some(NoiseEvent {
                category: source.category,
                file_index,
                noise_offset,
                snr_db,
                noise_gain: mix.noise_gain.to_f64().unwrap_or(f64::NAN),
                peak_scale: mix.peak_scale.to_f64().unwrap_or(f64::NAN),
            });
            out = mix.signal;
        } else {
            log.skipped_silent = true;
        }
    }

    if rng.random::<f64>() < policy.p_reverb {
        if policy.rir.files.is_empty() {
            return Err(AugmentError::EmptyRirCorpus);
        }
        let idx = rng.random_range(0..policy.rir.files.len());
        out = reverberate(&out, &policy.rir.files[idx])?;
        log.rir_index = Some(idx);
    }

    Ok((out, log))
}
