//! Deterministic synthetic speech corpus for desk-scale experiments.
//!
//! Each speaker has a fixed fundamental and three formant-like resonances
//! drawn from a per-speaker stream. An utterance is a pulse train at (a
//! slightly varying) fundamental, shaped by the speaker's resonances,
//! chopped into syllables, plus white noise at 20 dB SNR. Recordings used
//! by the trial list can also carry a session nuisance — band-limited
//! background noise whose colour and level vary per recording — which the
//! (by default clean) training utterances never show. Matching interference
//! sets (babble, music, coloured noise) and room impulse responses are
//! generated alongside.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::audio_io::{quantize, save_wav, AudioError, Manifest, ManifestEntry, Waveform, SAMPLE_RATE};
use crate::augment::{AugmentPolicy, NoiseCategory, NoiseCorpus, NoiseSource, RirCorpus};
use crate::eval::{Trial, TrialList};
use crate::rng::{derive, Stream};
use crate::scalar::{cast, Scalar};
use crate::Error;

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Training speakers and utterances per speaker.
    pub speakers: usize,
    pub utts_per_speaker: usize,
    /// Held-out speakers used by the trial list; with none, trials pair the
    /// training utterances themselves.
    pub test_speakers: usize,
    pub test_utts_per_speaker: usize,
    /// Held-out recordings come from the first `test_speakers` training
    /// voices instead of new ones (closed-set trials on unseen recordings).
    pub test_reuses_train_voices: bool,
    /// Trials, half target and half non-target.
    pub trials: usize,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// SNR range of the per-session background noise in training
    /// utterances; `None` disables it.
    pub train_session_snr_db: Option<(f64, f64)>,
    /// The same for the utterances the trial list draws from.
    pub test_session_snr_db: Option<(f64, f64)>,
    /// SNR of the white noise floor.
    pub white_snr_db: f64,
    pub noise_files_per_category: usize,
    pub rirs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            speakers: 10,
            utts_per_speaker: 20,
            test_speakers: 10,
            test_utts_per_speaker: 6,
            test_reuses_train_voices: false,
            trials: 200,
            duration: (4.0, 6.0),
            train_session_snr_db: None,
            test_session_snr_db: Some((10.0, 20.0)),
            white_snr_db: 20.0,
            noise_files_per_category: 8,
            rirs: 16,
        }
    }
}

impl SynthConfig {
    /// Speakers and utterances per speaker the trial list draws from.
    pub fn trial_pool(&self) -> (usize, usize) {
        if self.test_speakers == 0 {
            (self.speakers, self.utts_per_speaker)
        } else {
            (self.test_speakers, self.test_utts_per_speaker)
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.speakers < 2 || self.utts_per_speaker < 1 {
            return bad("need at least 2 speakers with 1 utterance each");
        }
        let (s, m) = self.trial_pool();
        if self.trials > 0 && (s < 2 || m < 2) {
            return bad("trials need at least 2 speakers with 2 utterances each");
        }
        if self.test_reuses_train_voices && self.test_speakers > self.speakers {
            return bad("cannot reuse more training voices than there are training speakers");
        }
        let (lo, hi) = self.duration;
        if !(lo > 0.0 && lo <= hi) {
            return bad("duration range must be positive and ordered");
        }
        for (a, b) in [self.train_session_snr_db, self.test_session_snr_db].into_iter().flatten() {
            if !(a <= b) {
                return bad("session SNR range must be ordered");
            }
        }
        let targets = s * m * (m.saturating_sub(1)) / 2;
        let nontargets = s * (s.saturating_sub(1)) / 2 * m * m;
        if self.trials / 2 > targets || self.trials - self.trials / 2 > nontargets {
            return bad("too few test utterances for the requested number of distinct trials");
        }
        if self.noise_files_per_category == 0 || self.rirs == 0 {
            return bad("noise and RIR sets must be non-empty");
        }
        Ok(())
    }
}

/// A speaker's fixed voice characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Centre frequencies (Hz) of the three resonances.
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
}

impl Voice {
    pub fn draw(rng: &mut Stream) -> Self {
        Self {
            f0: rng.random_range(85.0..255.0),
            formants: [
                rng.random_range(300.0..850.0),
                rng.random_range(900.0..2300.0),
                rng.random_range(2400.0..3600.0),
            ],
            bandwidths: [
                rng.random_range(60.0..120.0),
                rng.random_range(80.0..160.0),
                rng.random_range(100.0..200.0),
            ],
        }
    }
}

fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Two-pole resonator, unity gain near its centre frequency.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64) {
    let r = (-PI * bandwidth / FS).exp();
    let (a1, a2) = (2.0 * r * (2.0 * PI * freq / FS).cos(), -r * r);
    let g = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = g * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn one_pole(x: &mut [f64], a: f64) {
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn white(n: usize, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Adds `noise` scaled to the given SNR relative to `x`.
fn add_at_snr(x: &mut [f64], noise: &[f64], snr_db: f64) {
    let (px, pn) = (power(x), power(noise));
    if px == 0.0 || pn == 0.0 {
        return;
    }
    let g = (px / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    for (v, n) in x.iter_mut().zip(noise) {
        *v += g * n;
    }
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Voiced syllables separated by short pauses, in the given voice.
pub fn speak(voice: &Voice, seconds: f64, rng: &mut Stream) -> Vec<f64> {
    let n = (seconds * FS).round() as usize;
    let mut out = vec![0.0; n];
    let f0 = voice.f0 * rng.random_range(0.95..1.05);
    let drift_rate = rng.random_range(0.2..0.6);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let mut t = (rng.random_range(0.02..0.15) * FS) as usize;
    while t < n {
        let len = ((rng.random_range(0.12..0.32) * FS) as usize).min(n - t);
        // Vowel quality varies per syllable around the speaker's resonances.
        let shift: Vec<f64> = (0..3).map(|_| rng.random_range(0.92..1.08)).collect();
        let mut seg = vec![0.0; len];
        let mut phase = rng.random_range(0.0..1.0);
        for (i, s) in seg.iter_mut().enumerate() {
            let time = (t + i) as f64 / FS;
            let f = f0 * (1.0 + 0.04 * (2.0 * PI * drift_rate * time + drift_phase).sin());
            phase += f / FS;
            if phase >= 1.0 {
                phase -= 1.0;
                *s = 1.0;
            }
        }
        // Glottal spectral tilt, vocal-tract resonances, lip radiation.
        one_pole(&mut seg, 0.9);
        let mut shaped = vec![0.0; len];
        for k in 0..3 {
            let mut band = seg.clone();
            resonate(&mut band, voice.formants[k] * shift[k], voice.bandwidths[k]);
            let gain = [1.0, 0.6, 0.35][k];
            shaped.iter_mut().zip(&band).for_each(|(o, b)| *o += gain * b);
        }
        let mut prev = 0.0;
        for s in shaped.iter_mut() {
            let d = *s - prev;
            prev = *s;
            *s = d;
        }
        for (i, s) in shaped.iter().enumerate() {
            let env = (PI * i as f64 / len as f64).sin().powf(0.7);
            out[t + i] += env * s;
        }
        t += len + (rng.random_range(0.04..0.16) * FS) as usize;
    }
    out
}

/// Band-limited background noise with a random colour.
fn session_noise(n: usize, rng: &mut Stream) -> Vec<f64> {
    let mut x = white(n, rng);
    let centre = rng.random_range(150.0..4000.0);
    let bw = rng.random_range(100.0..1200.0);
    resonate(&mut x, centre, bw);
    let mut hum = white(n, rng);
    one_pole(&mut hum, rng.random_range(0.9..0.995));
    let hum_db: f64 = rng.random_range(-10.0..10.0);
    add_at_snr(&mut x, &hum, hum_db);
    x
}

fn music(n: usize, rng: &mut Stream) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let root = rng.random_range(110.0..330.0);
    let scale = [0, 2, 4, 5, 7, 9, 11, 12, 14, 16];
    let mut t = 0;
    while t < n {
        let len = ((rng.random_range(0.2..0.6) * FS) as usize).min(n - t);
        for _ in 0..3 {
            let f = root * 2f64.powf(scale[rng.random_range(0..scale.len())] as f64 / 12.0);
            let amp = rng.random_range(0.3..1.0);
            for i in 0..len {
                let time = i as f64 / FS;
                let env = amp * (-3.0 * time).exp();
                for h in 1..=4 {
                    out[t + i] += env / h as f64 * (2.0 * PI * f * h as f64 * time).sin();
                }
            }
        }
        t += len;
    }
    out
}

fn colored_noise(n: usize, rng: &mut Stream) -> Vec<f64> {
    let mut x = white(n, rng);
    match rng.random_range(0..3) {
        0 => one_pole(&mut x, rng.random_range(0.5..0.98)),
        1 => resonate(&mut x, rng.random_range(300.0..5000.0), rng.random_range(200.0..2000.0)),
        _ => {}
    }
    x
}

/// Exponentially decaying noise tail after a direct path and a few early
/// reflections.
fn room_response(rng: &mut Stream) -> Vec<f64> {
    let rt60: f64 = rng.random_range(0.2..0.8);
    let n = ((rt60 * 0.8).max(0.15) * FS) as usize;
    let mut tail = white(n, rng);
    one_pole(&mut tail, rng.random_range(0.0..0.8));
    let decay = 6.9 / (rt60 * FS);
    let level = rng.random_range(0.1..0.4);
    let mut h: Vec<f64> = tail.iter().enumerate().map(|(i, v)| level * v * (-decay * i as f64).exp()).collect();
    h[0] = 1.0;
    for _ in 0..4 {
        let d = rng.random_range((0.003 * FS) as usize..(0.03 * FS) as usize);
        h[d] += rng.random_range(-0.6..0.6);
    }
    h
}

/// In-memory corpus; paths are relative to the corpus root.
#[derive(Debug, Clone)]
pub struct SynthCorpus<T> {
    pub config: SynthConfig,
    pub train: Manifest,
    pub test: Manifest,
    pub trials: TrialList,
    pub audio: HashMap<PathBuf, Waveform<T>>,
    pub noise_files: Vec<(NoiseCategory, PathBuf, Waveform<T>)>,
    pub rir_files: Vec<(PathBuf, Waveform<T>)>,
}

/// Rounds to 16-bit PCM, so the in-memory corpus equals what is read back
/// from its WAV files.
fn pcm<T: Scalar>(x: &[f64]) -> Waveform<T> {
    let samples = x.iter().map(|&s| cast::<T>(f64::from(quantize(s)) * (1.0 / 32768.0))).collect();
    Waveform::new(samples, SAMPLE_RATE).expect("non-empty synthetic signal")
}

struct UttSpec {
    split: &'static str,
    speaker: usize,
    index: usize,
}

impl UttSpec {
    fn speaker_id(&self) -> String {
        format!("{}{:03}", if self.split == "train" { "spk" } else { "tst" }, self.speaker)
    }

    fn utterance_id(&self) -> String {
        format!("{}_u{:02}", self.speaker_id(), self.index)
    }

    fn path(&self) -> PathBuf {
        Path::new(self.split).join(self.speaker_id()).join(format!("{}.wav", self.utterance_id()))
    }
}

impl<T: Scalar> SynthCorpus<T> {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let seed = cfg.seed;
        let specs: Vec<UttSpec> = [("train", cfg.speakers, cfg.utts_per_speaker), ("test", cfg.test_speakers, cfg.test_utts_per_speaker)]
            .into_iter()
            .flat_map(|(split, s, m)| (0..s).flat_map(move |speaker| (0..m).map(move |index| UttSpec { split, speaker, index })))
            .collect();
        let voice = |split: &str, speaker: usize| Voice::draw(&mut derive(seed, &[b"voice", split.as_bytes(), &(speaker as u64).to_le_bytes()]));
        let waves: Vec<Waveform<T>> = specs
            .par_iter()
            .map(|u| {
                let mut rng = derive(seed, &[b"utterance", u.utterance_id().as_bytes()]);
                let secs = rng.random_range(cfg.duration.0..=cfg.duration.1);
                let voice_split = if cfg.test_reuses_train_voices { "train" } else { u.split };
                let mut x = speak(&voice(voice_split, u.speaker), secs, &mut rng);
                let in_trials = u.split == "test" || cfg.test_speakers == 0;
                let session = if in_trials { cfg.test_session_snr_db } else { cfg.train_session_snr_db };
                if let Some((lo, hi)) = session {
                    let bg = session_noise(x.len(), &mut rng);
                    add_at_snr(&mut x, &bg, rng.random_range(lo..=hi));
                }
                let floor = white(x.len(), &mut rng);
                add_at_snr(&mut x, &floor, cfg.white_snr_db);
                normalize_peak(&mut x, rng.random_range(0.3..0.8));
                pcm(&x)
            })
            .collect();

        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut audio = HashMap::new();
        for (u, w) in specs.iter().zip(waves) {
            let entry = ManifestEntry {
                utterance_id: u.utterance_id(),
                path: u.path(),
                speaker_id: Some(u.speaker_id()),
            };
            audio.insert(entry.path.clone(), w);
            if u.split == "train" { &mut train } else { &mut test }.push(entry);
        }
        let train = Manifest::new(train)?;
        let test = Manifest::new(test)?;
        let trials = make_trials(if test.entries.is_empty() { &train } else { &test }, cfg.trials, seed);

        let mut noise_files = Vec::new();
        for category in NoiseCategory::ALL {
            for i in 0..cfg.noise_files_per_category {
                let mut rng = derive(seed, &[b"noise", category.dir_name().as_bytes(), &(i as u64).to_le_bytes()]);
                let n = (4.0 * FS) as usize;
                let mut x = match category {
                    NoiseCategory::Speech => {
                        let mut mix = vec![0.0; n];
                        for _ in 0..3 {
                            let v = Voice::draw(&mut rng);
                            mix.iter_mut().zip(speak(&v, 4.0, &mut rng)).for_each(|(m, s)| *m += s);
                        }
                        mix
                    }
                    NoiseCategory::Music => music(n, &mut rng),
                    NoiseCategory::Noise => colored_noise(n, &mut rng),
                };
                normalize_peak(&mut x, 0.5);
                let path = Path::new("noise").join(category.dir_name()).join(format!("{}{i:02}.wav", category.dir_name()));
                noise_files.push((category, path, pcm(&x)));
            }
        }
        let rir_files = (0..cfg.rirs)
            .map(|i| {
                let mut h = room_response(&mut derive(seed, &[b"rir", &(i as u64).to_le_bytes()]));
                normalize_peak(&mut h, 0.9);
                (Path::new("rir").join(format!("rir{i:02}.wav")), pcm(&h))
            })
            .collect();

        Ok(Self {
            config: cfg.clone(),
            train,
            test,
            trials,
            audio,
            noise_files,
            rir_files,
        })
    }

    pub fn noise_corpus(&self) -> NoiseCorpus<T> {
        let sources = NoiseCategory::ALL
            .into_iter()
            .map(|category| NoiseSource {
                category,
                files: self.noise_files.iter().filter(|f| f.0 == category).map(|f| f.2.clone()).collect(),
                snr_range_db: category.default_snr_range(),
            })
            .filter(|s| !s.files.is_empty())
            .collect();
        NoiseCorpus::new(sources).expect("default SNR ranges are ordered")
    }

    pub fn rir_corpus(&self) -> RirCorpus<T> {
        RirCorpus {
            files: self.rir_files.iter().map(|f| f.1.clone()).collect(),
        }
    }

    /// Augmentation policy over the generated noise and RIR sets.
    pub fn policy(&self, p_noise: f64, p_reverb: f64) -> Result<AugmentPolicy<T>, Error> {
        Ok(AugmentPolicy::new(p_noise, p_reverb, self.noise_corpus(), self.rir_corpus())?)
    }

    /// Writes WAVs, `manifest.tsv` (training), `test_manifest.tsv` and
    /// `trials.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let mut files: Vec<(&PathBuf, &Waveform<T>)> = self.audio.iter().collect();
        files.extend(self.noise_files.iter().map(|(_, p, w)| (p, w)));
        files.extend(self.rir_files.iter().map(|(p, w)| (p, w)));
        files.sort_by(|a, b| a.0.cmp(b.0));
        for (rel, w) in files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            save_wav(w, &path)?;
        }
        let texts = [
            ("manifest.tsv", self.train.to_text(Path::new(""))),
            ("test_manifest.tsv", self.test.to_text(Path::new(""))),
            ("trials.txt", self.trials.to_text(Path::new(""))),
        ];
        for (name, text) in texts {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
        }
        Ok(())
    }
}

/// Half target (two recordings of one speaker), half non-target trials,
/// all distinct unordered pairs.
fn make_trials(test: &Manifest, count: usize, seed: u64) -> TrialList {
    let mut by_speaker: Vec<(String, Vec<&ManifestEntry>)> = Vec::new();
    for e in &test.entries {
        let s = e.speaker_id.clone().unwrap_or_default();
        match by_speaker.iter_mut().find(|(k, _)| *k == s) {
            Some((_, v)) => v.push(e),
            None => by_speaker.push((s, vec![e])),
        }
    }
    let mut rng = derive(seed, &[b"trials"]);
    let mut seen = BTreeSet::new();
    let mut trials = Vec::new();
    let wanted = [(true, count / 2), (false, count - count / 2)];
    for (target, n) in wanted {
        let mut made = 0;
        while made < n {
            let s1 = rng.random_range(0..by_speaker.len());
            let s2 = if target {
                s1
            } else {
                (s1 + rng.random_range(1..by_speaker.len())) % by_speaker.len()
            };
            let a = by_speaker[s1].1[rng.random_range(0..by_speaker[s1].1.len())];
            let b = by_speaker[s2].1[rng.random_range(0..by_speaker[s2].1.len())];
            if a.utterance_id == b.utterance_id {
                continue;
            }
            let key = if a.utterance_id < b.utterance_id {
                (a.utterance_id.clone(), b.utterance_id.clone())
            } else {
                (b.utterance_id.clone(), a.utterance_id.clone())
            };
            if seen.insert(key) {
                trials.push(Trial {
                    target,
                    enroll: a.path.clone(),
                    test: b.path.clone(),
                });
                made += 1;
            }
        }
    }
    TrialList { trials }
}

/// Reads a written corpus back: training manifest, trial list, and the
/// noise/RIR sets.
pub fn load_written<T: Scalar>(dir: &Path) -> Result<(Manifest, TrialList, NoiseCorpus<T>, RirCorpus<T>), Error> {
    let manifest = Manifest::load(dir.join("manifest.tsv"))?;
    let trials = TrialList::load(dir.join("trials.txt"))?;
    let noise = NoiseCorpus::load_dir(dir.join("noise"))?;
    let rir = RirCorpus::load_dir(dir.join("rir"))?;
    Ok((manifest, trials, noise, rir))
}

/// Loads every listed file into memory.
pub fn preload<T: Scalar>(paths: impl IntoIterator<Item = PathBuf>) -> Result<HashMap<PathBuf, Waveform<T>>, Error> {
    let paths: Vec<PathBuf> = paths.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let loaded: Vec<Result<Waveform<T>, AudioError>> = paths.par_iter().map(crate::audio_io::load_wav).collect();
    let mut out = HashMap::new();
    let mut failed = Vec::new();
    for (p, r) in paths.into_iter().zip(loaded) {
        match r {
            Ok(w) => {
                out.insert(p, w);
            }
            Err(e) => failed.push((p, e)),
        }
    }
    if !failed.is_empty() {
        return Err(crate::eval::EvalError::Unreadable(failed).into());
    }
    Ok(out)
}
