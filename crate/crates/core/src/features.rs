//! Log-mel features with per-utterance mean/variance normalization.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio_io::Waveform;
use crate::scalar::{cast, count, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid spectrogram config: {0}")]
    InvalidConfig(String),
    #[error("waveform has {len} samples, shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("mel filter {0} covers no FFT bin; reduce n_mels or raise n_fft")]
    EmptyFilter(usize),
    #[error("instance normalization needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("waveform sample rate {found} Hz does not match config {expected} Hz")]
    RateMismatch { found: u32, expected: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    /// 40 log-mel bands from a 25 ms Hamming window every 10 ms at 16 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if self.sample_rate == 0 || self.win_length == 0 || self.hop_length == 0 || self.n_fft == 0 {
            return bad("sample_rate, win_length, hop_length and n_fft must be positive".into());
        }
        if self.win_length > self.n_fft {
            return bad(format!("win_length {} exceeds n_fft {}", self.win_length, self.n_fft));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min {} f_max {}",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples (0 if shorter than a window).
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.win_length {
            0
        } else {
            (len - self.win_length) / self.hop_length + 1
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hamming window `0.54 − 0.46·cos(2πn/(N−1))`.
pub fn hamming<T: Scalar>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::one()];
    }
    (0..n)
        .map(|i| cast(0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Triangular filters with centers equally spaced on the mel scale.
/// Rows are filters (ascending center frequency), columns FFT bins.
pub fn mel_filterbank<T: Scalar>(cfg: &SpectrogramConfig) -> Result<Array2<T>, FeatureError> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::<T>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let w = rise.min(fall);
            if w > 0.0 {
                fb[[m, k]] = cast(w);
                any = true;
            }
        }
        if !any {
            return Err(FeatureError::EmptyFilter(m));
        }
    }
    Ok(fb)
}

/// A T×n_mels feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub values: Array2<T>,
    pub normalized: bool,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Subtracts each bin's mean over frames and divides by its population
/// standard deviation (+1e-8).
pub fn instance_mvn<T: Scalar>(f: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>, FeatureError> {
    let frames = f.values.nrows();
    if frames < 2 {
        return Err(FeatureError::TooFewFrames(frames));
    }
    let n: T = count(frames);
    let eps: T = cast(1e-8);
    let mean = f.values.sum_axis(Axis(0)) / n;
    let centered = &f.values - &mean;
    let std = (centered.mapv(|v| v * v).sum_axis(Axis(0)) / n).mapv(|v| v.sqrt());
    let values = centered / &std.mapv(|s| s + eps);
    Ok(FeatureMatrix {
        values,
        normalized: true,
    })
}

/// STFT power and log-mel computation for one configuration. The window,
/// filterbank and FFT plan are built once and shared read-only.
#[derive(Clone)]
pub struct LogMelExtractor<T: Scalar> {
    cfg: SpectrogramConfig,
    window: Vec<T>,
    filterbank: Array2<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for LogMelExtractor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl<T: Scalar> LogMelExtractor<T> {
    pub fn new(cfg: SpectrogramConfig) -> Result<Self, FeatureError> {
        let filterbank = mel_filterbank(&cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            window: hamming(cfg.win_length),
            filterbank,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<T> {
        &self.filterbank
    }

    /// Squared magnitude of the one-sided spectrum of each windowed frame.
    pub fn stft_power(&self, w: &Waveform<T>) -> Result<Array2<T>, FeatureError> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(FeatureError::RateMismatch {
                found: w.sample_rate(),
                expected: self.cfg.sample_rate,
            });
        }
        let x = w.samples();
        let frames = self.cfg.num_frames(x.len());
        if frames == 0 {
            return Err(FeatureError::TooShort {
                len: x.len(),
                win: self.cfg.win_length,
            });
        }
        let n_bins = self.cfg.n_bins();
        let mut out = Array2::<T>::zeros((frames, n_bins));
        let zero = Complex::new(T::zero(), T::zero());
        let mut buf = vec![zero; self.cfg.n_fft];
        let mut scratch = vec![zero; self.fft.get_inplace_scratch_len()];
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * self.cfg.hop_length;
            buf.fill(zero);
            for (i, (b, &wv)) in buf.iter_mut().zip(&self.window).enumerate() {
                b.re = x[start + i] * wv;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in row.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// `log(filterbank · power + floor)` for every frame; not normalized.
    pub fn log_mel(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>, FeatureError> {
        let power = self.stft_power(w)?;
        let floor: T = cast(self.cfg.log_floor);
        let values = power.dot(&self.filterbank.t()).mapv(|v| (v + floor).ln());
        Ok(FeatureMatrix {
            values,
            normalized: false,
        })
    }

    /// Log-mel followed by instance normalization: the network input.
    pub fn features(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>, FeatureError> {
        instance_mvn(&self.log_mel(w)?)
    }
}

pub fn stft_power<T: Scalar>(w: &Waveform<T>, cfg: &SpectrogramConfig) -> Result<Array2<T>, FeatureError> {
    LogMelExtractor::new(cfg.clone())?.stft_power(w)
}

pub fn log_mel<T: Scalar>(w: &Waveform<T>, cfg: &SpectrogramConfig) -> Result<FeatureMatrix<T>, FeatureError> {
    LogMelExtractor::new(cfg.clone())?.log_mel(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform<f64> {
        Waveform::new(v, SAMPLE_RATE).unwrap()
    }

    /// Quadratic-time DFT of the windowed, zero-padded frames.
    fn direct_stft_power(x: &[f64], cfg: &SpectrogramConfig) -> Array2<f64> {
        let win = hamming::<f64>(cfg.win_length);
        let frames = (x.len() - cfg.win_length) / cfg.hop_length + 1;
        let bins = cfg.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, bins));
        for t in 0..frames {
            for k in 0..bins {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..cfg.win_length {
                    let v = x[t * cfg.hop_length + n] * win[n];
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                out[[t, k]] = re * re + im * im;
            }
        }
        out
    }

    #[test]
    fn frame_count_for_two_seconds() {
        let cfg = SpectrogramConfig::default();
        assert_eq!(cfg.num_frames(32000), 198);
        let p = stft_power(&wave(vec![0.0; 32000]), &cfg).unwrap();
        assert_eq!(p.dim(), (198, 257));
        assert!(p.iter().all(|&v| v == 0.0));
        for len in [400usize, 401, 559, 560, 4000, 12345] {
            assert_eq!(cfg.num_frames(len), (len - 400) / 160 + 1);
        }
        assert_eq!(
            stft_power(&wave(vec![0.0; 399]), &cfg),
            Err(FeatureError::TooShort { len: 399, win: 400 })
        );
    }

    #[test]
    fn matches_direct_dft() {
        let cfg = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = stft_power(&wave(x.clone()), &cfg).unwrap();
        let slow = direct_stft_power(&x, &cfg);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-6 * scale), "{a} vs {b}");
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = SpectrogramConfig::default();
        let x: Vec<f64> = (0..32000)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let p = stft_power(&wave(x), &cfg).unwrap();
        for row in p.axis_iter(Axis(0)) {
            let argmax = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn mel_scale_points() {
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn filters_are_unimodal_and_ordered() {
        let cfg = SpectrogramConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        assert_eq!(fb.dim(), (40, 257));
        let mut last_peak = 0;
        for (m, row) in fb.axis_iter(Axis(0)).enumerate() {
            assert!(row.iter().all(|&v| v >= 0.0));
            let support: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            let (lo, hi) = (support[0], *support.last().unwrap());
            assert_eq!(support.len(), hi - lo + 1, "filter {m} support not contiguous");
            let vals: Vec<f64> = (lo..=hi).map(|k| row[k]).collect();
            let peak = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
            assert!(vals[..=peak].windows(2).all(|w| w[0] < w[1]));
            assert!(vals[peak..].windows(2).all(|w| w[0] > w[1]));
            let peak_bin = lo + peak;
            if m > 0 {
                assert!(peak_bin >= last_peak);
            }
            last_peak = peak_bin;
        }
    }

    #[test]
    fn too_many_mels_rejected() {
        let cfg = SpectrogramConfig {
            n_mels: 200,
            ..Default::default()
        };
        assert!(matches!(mel_filterbank::<f64>(&cfg), Err(FeatureError::EmptyFilter(_))));
    }

    #[test]
    fn log_mel_floor_and_scaling() {
        let cfg = SpectrogramConfig::default();
        let z = log_mel(&wave(vec![0.0; 32000]), &cfg).unwrap();
        assert_eq!(z.values.dim(), (198, 40));
        assert!(!z.normalized);
        assert!(z.values.iter().all(|&v| v == (1e-10f64).ln()));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.25..0.25)).collect();
        let a = log_mel(&wave(x.clone()), &cfg).unwrap();
        let b = log_mel(&wave(x.iter().map(|v| 2.0 * v).collect()), &cfg).unwrap();
        for (u, v) in a.values.iter().zip(b.values.iter()) {
            assert!((v - u - 4f64.ln()).abs() < 1e-6);
        }
        assert_eq!(a, log_mel(&wave(x), &cfg).unwrap());
    }

    #[test]
    fn mvn_examples() {
        let f = FeatureMatrix {
            values: ndarray::array![[1.0f64, 5.0], [3.0, 5.0]],
            normalized: false,
        };
        let n = instance_mvn(&f).unwrap();
        assert!(n.normalized);
        assert!((n.values[[0, 0]] + 1.0).abs() < 1e-7);
        assert!((n.values[[1, 0]] - 1.0).abs() < 1e-7);
        assert_eq!(n.values[[0, 1]], 0.0);
        assert_eq!(n.values[[1, 1]], 0.0);

        let one = FeatureMatrix {
            values: Array2::<f64>::zeros((1, 3)),
            normalized: false,
        };
        assert_eq!(instance_mvn(&one), Err(FeatureError::TooFewFrames(1)));
    }

    #[test]
    fn mvn_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values = Array2::from_shape_fn((198, 40), |_| rng.random_range(-20.0f64..5.0));
        let n = instance_mvn(&FeatureMatrix {
            values,
            normalized: false,
        })
        .unwrap();
        for col in n.values.axis_iter(Axis(1)) {
            let mean = col.sum() / 198.0;
            let std = (col.mapv(|v| (v - mean).powi(2)).sum() / 198.0).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-4);
        }
        let again = instance_mvn(&n).unwrap();
        for (a, b) in n.values.iter().zip(again.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn f32_pipeline_runs() {
        let cfg = SpectrogramConfig::default();
        let ex = LogMelExtractor::<f32>::new(cfg).unwrap();
        let w = Waveform::new((0..16000).map(|n| ((n as f32) * 0.01).sin() * 0.3).collect(), SAMPLE_RATE).unwrap();
        let f = ex.features(&w).unwrap();
        assert_eq!(f.values.dim(), (98, 40));
        assert!(f.values.iter().all(|v| v.is_finite()));
    }
}
