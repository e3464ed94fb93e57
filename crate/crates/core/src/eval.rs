//! Verification scoring (EER, minDCF), embedding extraction and the
//! label-efficiency mechanisms (frozen linear probe, full fine-tuning).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::{crop, load_wav, AudioError, Manifest, Waveform};
use crate::augment::{apply_policy, AugmentError, AugmentPolicy};
use crate::features::{FeatureError, FeatureMatrix, LogMelExtractor};
use crate::nn::{softmax_cross_entropy, Linear, Model, NnError};
use crate::optim::{Adam, AdamConfig, LrSchedule, OptimError};
use crate::rng::{derive, epoch_stream};
use crate::scalar::{count, to_f64, Scalar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores need both target and non-target trials")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("cannot score a zero vector")]
    ZeroVector,
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("n_crops must be at least 1")]
    NoCrops,
    #[error("{} audio file(s) could not be read: {}", .0.len(), .0.iter().map(|(p, e)| format!("{} ({e})", p.display())).collect::<Vec<_>>().join(", "))]
    Unreadable(Vec<(PathBuf, AudioError)>),
    #[error("{origin}:{line}: {reason}")]
    TrialParse { origin: PathBuf, line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("classifier training needs at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub fn cosine_score<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Result<f64, EvalError> {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na.is_zero() || nb.is_zero() {
        return Err(EvalError::ZeroVector);
    }
    Ok(to_f64(a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Error rates at one threshold (accept iff score ≥ threshold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at −∞, every distinct score (ascending) and +∞.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_tgt = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let point = |threshold, tgt_below: usize, non_below: usize| OperatingPoint {
        threshold,
        far: (n_non - non_below) as f64 / n_non as f64,
        frr: tgt_below as f64 / n_tgt as f64,
    };
    let mut points = vec![point(f64::NEG_INFINITY, 0, 0)];
    let (mut tgt_below, mut non_below) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        points.push(point(s, tgt_below, non_below));
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(point(f64::INFINITY, n_tgt, n_non));
    Ok(points)
}

/// Interpolated FAR = FRR crossing over a threshold-ordered ROC. Returns
/// the EER (fraction) and its threshold.
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    for w in points.windows(2) {
        let (p, q) = (w[0], w[1]);
        let (dp, dq) = (p.frr - p.far, q.frr - q.far);
        if dp == 0.0 {
            return (p.far, p.threshold);
        }
        if dq >= 0.0 {
            let alpha = -dp / (dq - dp);
            let eer = p.far + alpha * (q.far - p.far);
            let threshold = if p.threshold.is_finite() && q.threshold.is_finite() {
                p.threshold + alpha * (q.threshold - p.threshold)
            } else if q.threshold.is_finite() {
                q.threshold
            } else {
                p.threshold
            };
            return (eer, threshold);
        }
    }
    let last = points[points.len() - 1];
    (last.far, last.threshold)
}

/// EER in percent and its threshold.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), EvalError> {
    let points = operating_points(scores, labels)?;
    let (eer, t) = eer_from_points(&points);
    Ok((100.0 * eer, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn dcf(&self, p: &OperatingPoint) -> f64 {
        self.c_miss * self.p_target * p.frr + self.c_fa * (1.0 - self.p_target) * p.far
    }

    /// Cost of the best trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinDcf {
    /// `raw / normalizer`.
    pub normalized: f64,
    pub raw: f64,
    pub threshold: f64,
}

pub fn min_dcf_from_points(points: &[OperatingPoint], cfg: &DcfConfig) -> MinDcf {
    let (raw, threshold) = points
        .iter()
        .map(|p| (cfg.dcf(p), p.threshold))
        .fold((f64::INFINITY, f64::NAN), |best, c| if c.0 < best.0 { c } else { best });
    MinDcf {
        normalized: raw / cfg.normalizer(),
        raw,
        threshold,
    }
}

pub fn compute_min_dcf(scores: &[f64], labels: &[bool], cfg: &DcfConfig) -> Result<MinDcf, EvalError> {
    if !(cfg.p_target > 0.0 && cfg.p_target < 1.0 && cfg.c_miss > 0.0 && cfg.c_fa > 0.0) {
        return Err(EvalError::Config("DCF needs 0 < p_target < 1 and positive costs".into()));
    }
    Ok(min_dcf_from_points(&operating_points(scores, labels)?, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Percent.
    pub eer: f64,
    pub eer_threshold: f64,
    /// Normalized minimum detection cost.
    pub min_dcf: f64,
    pub min_dcf_raw: f64,
    pub dcf_threshold: f64,
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool], dcf: &DcfConfig) -> Result<EvalResult, EvalError> {
    let points = operating_points(scores, labels)?;
    let (eer, eer_threshold) = eer_from_points(&points);
    let m = min_dcf_from_points(&points, dcf);
    Ok(EvalResult {
        eer: 100.0 * eer,
        eer_threshold,
        min_dcf: m.normalized,
        min_dcf_raw: m.raw,
        dcf_threshold: m.threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Parses `label path1 path2` lines (label 1 = same speaker); relative
    /// paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, EvalError> {
        let mut trials = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| EvalError::TrialParse {
                origin: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(format!("expected `label path1 path2`, got {} fields", fields.len())));
            }
            let target = match fields[0] {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
            };
            trials.push(Trial {
                target,
                enroll: base.join(fields[1]),
                test: base.join(fields[2]),
            });
        }
        let list = Self { trials };
        if !list.trials.iter().any(|t| t.target) || list.trials.iter().all(|t| t.target) {
            return Err(EvalError::TrialParse {
                origin: origin.to_path_buf(),
                line: 0,
                reason: "trial list needs at least one target and one non-target trial".into(),
            });
        }
        Ok(list)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.trials.iter().fold(String::new(), |mut s, t| {
            let _ = writeln!(s, "{} {} {}", u8::from(t.target), rel(&t.enroll), rel(&t.test));
            s
        })
    }

    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.target).collect()
    }

    /// Distinct paths in order of first appearance.
    pub fn unique_paths(&self) -> Vec<PathBuf> {
        let mut seen = std::collections::HashSet::new();
        self.trials
            .iter()
            .flat_map(|t| [&t.enroll, &t.test])
            .filter(|p| seen.insert((*p).clone()))
            .cloned()
            .collect()
    }
}

/// Where evaluation audio comes from.
pub trait WaveSource<T>: Sync {
    fn load(&self, path: &Path) -> Result<Waveform<T>, AudioError>;
}

/// Reads 16-bit PCM WAV files from disk.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileSource;

impl<T: Scalar> WaveSource<T> for FileSource {
    fn load(&self, path: &Path) -> Result<Waveform<T>, AudioError> {
        load_wav(path)
    }
}

impl<T: Scalar> WaveSource<T> for HashMap<PathBuf, Waveform<T>> {
    fn load(&self, path: &Path) -> Result<Waveform<T>, AudioError> {
        self.get(path).cloned().ok_or_else(|| AudioError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not in the in-memory corpus"),
        })
    }
}

/// Start offsets of `n_crops` windows evenly spaced from 0 to `len − chunk`.
pub fn crop_starts(len: usize, chunk: usize, n_crops: usize) -> Vec<usize> {
    let span = len.saturating_sub(chunk);
    if n_crops == 1 {
        return vec![0];
    }
    (0..n_crops)
        .map(|k| ((k as f64) * span as f64 / (n_crops - 1) as f64).round() as usize)
        .collect()
}

/// Feature matrices of the evenly spaced crops of `w`.
pub fn crop_features<T: Scalar>(
    w: &Waveform<T>,
    extractor: &LogMelExtractor<T>,
    chunk: usize,
    n_crops: usize,
) -> Result<Vec<FeatureMatrix<T>>, EvalError> {
    if n_crops == 0 {
        return Err(EvalError::NoCrops);
    }
    if w.is_empty() {
        return Err(EvalError::EmptyWaveform);
    }
    crop_starts(w.len(), chunk, n_crops)
        .into_iter()
        .map(|s| Ok(extractor.features(&crop(w, s, chunk)?)?))
        .collect()
}

/// Mean of the encoder representations (not projector embeddings) of
/// `n_crops` evenly spaced crops; short inputs are repeat-padded.
pub fn extract_embedding<T: Scalar>(
    model: &Model<T>,
    extractor: &LogMelExtractor<T>,
    w: &Waveform<T>,
    chunk: usize,
    n_crops: usize,
) -> Result<Array1<T>, EvalError> {
    let feats = crop_features(w, extractor, chunk, n_crops)?;
    let y = model.represent(&feats)?;
    Ok(y.mean_axis(Axis(0)).expect("at least one crop"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub chunk_samples: usize,
    pub n_crops: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            chunk_samples: 32000,
            n_crops: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub scores: Vec<f64>,
    pub result: EvalResult,
    /// Distinct utterances embedded.
    pub embedded: usize,
    /// Path references served from the embedding cache.
    pub cache_hits: usize,
}

impl TrialOutcome {
    /// `path1 path2 score label` rows.
    pub fn scores_tsv(&self, trials: &TrialList) -> String {
        trials.trials.iter().zip(&self.scores).fold(String::new(), |mut s, (t, sc)| {
            let _ = writeln!(s, "{}\t{}\t{sc:.8}\t{}", t.enroll.display(), t.test.display(), u8::from(t.target));
            s
        })
    }
}

/// Embeds every distinct path once, scores each trial by cosine similarity
/// and computes EER/minDCF.
pub fn run_trials<T: Scalar>(
    model: &Model<T>,
    extractor: &LogMelExtractor<T>,
    trials: &TrialList,
    source: &dyn WaveSource<T>,
    cfg: &EmbedConfig,
) -> Result<TrialOutcome, EvalError> {
    run_trials_with_head(model, None, extractor, trials, source, cfg)
}

/// As [`run_trials`]; with a head, trials are scored on its logits instead
/// of the representations.
pub fn run_trials_with_head<T: Scalar>(
    model: &Model<T>,
    head: Option<&ClassifierHead<T>>,
    extractor: &LogMelExtractor<T>,
    trials: &TrialList,
    source: &dyn WaveSource<T>,
    cfg: &EmbedConfig,
) -> Result<TrialOutcome, EvalError> {
    let paths = trials.unique_paths();
    let waves = load_all(&paths, source)?;
    let embeddings = waves
        .par_iter()
        .map(|w| {
            let rep = extract_embedding(model, extractor, w, cfg.chunk_samples, cfg.n_crops)?;
            Ok(match head {
                Some(h) => h.logits(&rep.insert_axis(Axis(0))).row(0).to_owned(),
                None => rep,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let cache: HashMap<&PathBuf, &Array1<T>> = paths.iter().zip(&embeddings).collect();
    let scores = trials
        .trials
        .iter()
        .map(|t| cosine_score(cache[&t.enroll], cache[&t.test]))
        .collect::<Result<Vec<_>, _>>()?;
    let result = evaluate_scores(&scores, &trials.labels(), &DcfConfig::default())?;
    Ok(TrialOutcome {
        scores,
        result,
        embedded: paths.len(),
        cache_hits: 2 * trials.trials.len() - paths.len(),
    })
}

/// Loads every path, listing all failures together.
pub fn load_all<T: Scalar>(paths: &[PathBuf], source: &dyn WaveSource<T>) -> Result<Vec<Waveform<T>>, EvalError> {
    let loaded: Vec<_> = paths.par_iter().map(|p| source.load(p)).collect();
    let mut unreadable = Vec::new();
    let mut waves = Vec::with_capacity(paths.len());
    for (p, r) in paths.iter().zip(loaded) {
        match r {
            Ok(w) => waves.push(w),
            Err(e) => unreadable.push((p.clone(), e)),
        }
    }
    if unreadable.is_empty() {
        Ok(waves)
    } else {
        Err(EvalError::Unreadable(unreadable))
    }
}

/// Scores pairs of precomputed vectors (rows of `vectors`).
pub fn score_pairs<T: Scalar>(vectors: &Array2<T>, pairs: &[(usize, usize, bool)]) -> Result<EvalResult, EvalError> {
    let scores = pairs
        .iter()
        .map(|&(a, b, _)| cosine_score(&vectors.row(a).to_owned(), &vectors.row(b).to_owned()))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    evaluate_scores(&scores, &labels, &DcfConfig::default())
}

/// Picks a `fraction` of the rows, stratified by label: each class keeps
/// `ceil(fraction · count)` rows (at least one). Returned indices are sorted.
pub fn select_fraction(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (_, mut idx) in by_class {
        let keep = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..keep]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Optimization recipe shared by the probe and fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierTraining {
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// `None` = full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            schedule: LrSchedule {
                initial: 0.001,
                decay_factor: 1.0,
                decay_every: 1,
            },
            epochs: 100,
            batch_size: None,
            seed: 0,
        }
    }
}

impl ClassifierTraining {
    fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        match self.batch_size {
            None => vec![(0..n).collect()],
            Some(b) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut epoch_stream(self.seed, epoch, "classifier-shuffle"));
                order.chunks(b.max(1)).map(|c| c.to_vec()).collect()
            }
        }
    }
}

/// Softmax classification head on top of representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(input: usize, classes: usize, seed: u64) -> Self {
        Self {
            linear: Linear::new(input, classes, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn logits(&self, reps: &Array2<T>) -> Array2<T> {
        self.linear.forward(reps)
    }

    pub fn accuracy(&self, reps: &Array2<T>, labels: &[usize]) -> f64 {
        let logits = self.logits(reps);
        let correct = logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                best.0 == l
            })
            .count();
        correct as f64 / labels.len().max(1) as f64
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![self.linear.weight.shape().to_vec(), self.linear.bias.shape().to_vec()]
    }

    fn zero_grads(&self) -> [ArrayD<T>; 2] {
        [ArrayD::zeros(self.linear.weight.shape()), ArrayD::zeros(self.linear.bias.shape())]
    }

    fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, T>> {
        vec![self.linear.weight.view_mut().into_dyn(), self.linear.bias.view_mut().into_dyn()]
    }
}

fn class_count(labels: &[usize]) -> Result<usize, EvalError> {
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(EvalError::TooFewSpeakers(distinct.len()));
    }
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

#[derive(Debug, Clone)]
pub struct ProbeResult<T> {
    pub head: ClassifierHead<T>,
    pub train_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Multinomial logistic regression on frozen representations.
pub fn linear_probe<T: Scalar>(reps: &Array2<T>, labels: &[usize], cfg: &ClassifierTraining) -> Result<ProbeResult<T>, EvalError> {
    if reps.nrows() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: reps.nrows(),
            labels: labels.len(),
        });
    }
    cfg.schedule.validate()?;
    let classes = class_count(labels)?;
    let mut head = ClassifierHead::new(reps.ncols(), classes, cfg.seed);
    let mut adam = Adam::new(AdamConfig::default(), &head.shapes());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at_epoch(epoch);
        let mut epoch_loss = 0.0;
        for batch in cfg.batches(labels.len(), epoch) {
            let x = reps.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = softmax_cross_entropy(&head.logits(&x), &y)?;
            let [mut gw, mut gb] = head.zero_grads();
            head.linear.backward(&x, &dlogits, &mut gw, &mut gb, false);
            adam.step(head.params_mut(), &[gw, gb], lr)?;
            epoch_loss += to_f64(loss) * batch.len() as f64;
        }
        losses.push(epoch_loss / labels.len() as f64);
    }
    let train_accuracy = head.accuracy(reps, labels);
    Ok(ProbeResult {
        head,
        train_accuracy,
        losses,
    })
}

/// One labeled utterance as a fixed set of crops; its representation is the
/// mean of the crops' encoder outputs, as in [`extract_embedding`].
#[derive(Debug, Clone)]
pub struct LabeledItem<T> {
    pub crops: Vec<FeatureMatrix<T>>,
    pub label: usize,
}

fn stacked<T: Scalar>(items: &[&LabeledItem<T>]) -> Result<(Vec<FeatureMatrix<T>>, usize), EvalError> {
    let k = items.first().map_or(0, |i| i.crops.len());
    if k == 0 || items.iter().any(|i| i.crops.len() != k) {
        return Err(EvalError::Config("every labeled item needs the same, nonzero number of crops".into()));
    }
    Ok((items.iter().flat_map(|i| i.crops.iter().cloned()).collect(), k))
}

fn mean_groups<T: Scalar>(y: &Array2<T>, k: usize) -> Array2<T> {
    let n = y.nrows() / k;
    let mut out = Array2::zeros((n, y.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&y.slice(ndarray::s![i * k..(i + 1) * k, ..]).mean_axis(Axis(0)).unwrap());
    }
    out
}

/// Representations of labeled items (mean over each item's crops).
pub fn item_representations<T: Scalar>(model: &Model<T>, items: &[LabeledItem<T>]) -> Result<Array2<T>, EvalError> {
    let refs: Vec<&LabeledItem<T>> = items.iter().collect();
    let (feats, k) = stacked(&refs)?;
    Ok(mean_groups(&model.represent(&feats)?, k))
}

/// Speaker-labelled items from a manifest, cut into the same evenly spaced
/// crops used for scoring. Also returns the speaker name of each label.
pub fn labeled_items<T: Scalar>(
    manifest: &Manifest,
    source: &dyn WaveSource<T>,
    extractor: &LogMelExtractor<T>,
    cfg: &EmbedConfig,
) -> Result<(Vec<LabeledItem<T>>, Vec<String>), EvalError> {
    build_labeled_items(manifest, source, extractor, cfg, None)
}

/// Like [`labeled_items`], but every crop is passed through `policy` first,
/// with a stream derived from `seed`, the utterance index and the crop index.
pub fn augmented_labeled_items<T: Scalar>(
    manifest: &Manifest,
    source: &dyn WaveSource<T>,
    extractor: &LogMelExtractor<T>,
    cfg: &EmbedConfig,
    policy: &AugmentPolicy<T>,
    seed: u64,
) -> Result<(Vec<LabeledItem<T>>, Vec<String>), EvalError> {
    build_labeled_items(manifest, source, extractor, cfg, Some((policy, seed)))
}

fn build_labeled_items<T: Scalar>(
    manifest: &Manifest,
    source: &dyn WaveSource<T>,
    extractor: &LogMelExtractor<T>,
    cfg: &EmbedConfig,
    augment: Option<(&AugmentPolicy<T>, u64)>,
) -> Result<(Vec<LabeledItem<T>>, Vec<String>), EvalError> {
    if cfg.n_crops == 0 {
        return Err(EvalError::NoCrops);
    }
    let mut speakers: Vec<String> = Vec::new();
    for e in &manifest.entries {
        let s = e
            .speaker_id
            .as_ref()
            .ok_or_else(|| EvalError::Config(format!("utterance {} has no speaker label", e.utterance_id)))?;
        speakers.push(s.clone());
    }
    let mut names = speakers.clone();
    names.sort();
    names.dedup();
    let paths: Vec<PathBuf> = manifest.entries.iter().map(|e| e.path.clone()).collect();
    let waves = load_all(&paths, source)?;
    let items = waves
        .par_iter()
        .zip(&speakers)
        .enumerate()
        .map(|(i, (w, s))| {
            let crops = match augment {
                None => crop_features(w, extractor, cfg.chunk_samples, cfg.n_crops)?,
                Some((policy, seed)) => {
                    if w.is_empty() {
                        return Err(EvalError::EmptyWaveform);
                    }
                    let mut out = Vec::with_capacity(cfg.n_crops);
                    for (k, start) in crop_starts(w.len(), cfg.chunk_samples, cfg.n_crops).into_iter().enumerate() {
                        let mut rng = derive(seed, &[b"labeled-augment", &(i as u64).to_le_bytes(), &(k as u64).to_le_bytes()]);
                        let x = apply_policy(&crop(w, start, cfg.chunk_samples)?, policy, &mut rng)?;
                        out.push(extractor.features(&x)?);
                    }
                    out
                }
            };
            Ok(LabeledItem {
                crops,
                label: names.binary_search(s).expect("speaker listed"),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok((items, names))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub training: ClassifierTraining,
    /// Train only the head; reduces to [`linear_probe`].
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone)]
pub struct FineTuned<T> {
    pub model: Model<T>,
    pub head: ClassifierHead<T>,
    pub train_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains a softmax head on the representations while updating every
/// encoder and pooling parameter.
pub fn fine_tune<T: Scalar>(model: &Model<T>, items: &[LabeledItem<T>], cfg: &FineTuneConfig) -> Result<FineTuned<T>, EvalError> {
    let tc = &cfg.training;
    tc.schedule.validate()?;
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let classes = class_count(&labels)?;
    let mut model = model.clone();
    let mut head = ClassifierHead::new(model.rep_dim(), classes, tc.seed);
    let mut head_adam = Adam::new(AdamConfig::default(), &head.shapes());
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut model_adam = Adam::new(AdamConfig::default(), &shapes);
    let frozen_reps = if cfg.freeze_encoder {
        Some(item_representations(&model, items)?)
    } else {
        None
    };
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.schedule.lr_at_epoch(epoch);
        let mut epoch_loss = 0.0;
        for batch in tc.batches(items.len(), epoch) {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (reps, enc) = match &frozen_reps {
                Some(r) => (r.select(Axis(0), &batch), None),
                None => {
                    let refs: Vec<&LabeledItem<T>> = batch.iter().map(|&i| &items[i]).collect();
                    let (feats, k) = stacked(&refs)?;
                    let (yc, cache) = model.encoder_forward(&feats)?;
                    (mean_groups(&yc, k), Some((cache, k)))
                }
            };
            let (loss, dlogits) = softmax_cross_entropy(&head.logits(&reps), &y)?;
            let [mut gw, mut gb] = head.zero_grads();
            let drep = head.linear.backward(&reps, &dlogits, &mut gw, &mut gb, enc.is_some());
            if let (Some((cache, k)), Some(drep)) = (enc, drep) {
                let kk: T = count(k);
                let mut dy = Array2::zeros((drep.nrows() * k, drep.ncols()));
                for (i, mut row) in dy.rows_mut().into_iter().enumerate() {
                    row.assign(&(&drep.row(i / k) / kk));
                }
                let mut grads = model.zero_grads();
                model.encoder_backward(&cache, &dy, &mut grads)?;
                model_adam.step(model.params_mut(), &grads.tensors, lr)?;
            }
            head_adam.step(head.params_mut(), &[gw, gb], lr)?;
            epoch_loss += to_f64(loss) * batch.len() as f64;
        }
        losses.push(epoch_loss / items.len() as f64);
    }
    let reps = item_representations(&model, items)?;
    let train_accuracy = head.accuracy(&reps, &labels);
    Ok(FineTuned {
        model,
        head,
        train_accuracy,
        losses,
    })
}

/// How a pretrained network is adapted with labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptation {
    /// Train a softmax head on frozen representations.
    Probe,
    /// Train head and encoder together.
    FineTune,
}

#[derive(Debug, Clone)]
pub struct LabelRun {
    pub fraction: f64,
    /// Labelled utterances actually used.
    pub labelled: usize,
    pub train_accuracy: f64,
    pub outcome: TrialOutcome,
}

/// Adapts `model` on a stratified `fraction` of `items`, then scores
/// `trials`. A fine-tuned network is scored like any model, on its
/// representations; the probe leaves those frozen, so it is scored on the
/// logits of its head.
#[allow(clippy::too_many_arguments)]
pub fn label_efficiency_run<T: Scalar>(
    model: &Model<T>,
    extractor: &LogMelExtractor<T>,
    items: &[LabeledItem<T>],
    fraction: f64,
    adaptation: Adaptation,
    training: &ClassifierTraining,
    trials: &TrialList,
    source: &dyn WaveSource<T>,
    embed: &EmbedConfig,
) -> Result<LabelRun, EvalError> {
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let chosen: Vec<LabeledItem<T>> = select_fraction(&labels, fraction, training.seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect();
    let (train_accuracy, outcome) = match adaptation {
        Adaptation::Probe => {
            let chosen_labels: Vec<usize> = chosen.iter().map(|i| i.label).collect();
            let probe = linear_probe(&item_representations(model, &chosen)?, &chosen_labels, training)?;
            let outcome = run_trials_with_head(model, Some(&probe.head), extractor, trials, source, embed)?;
            (probe.train_accuracy, outcome)
        }
        Adaptation::FineTune => {
            let cfg = FineTuneConfig {
                training: *training,
                freeze_encoder: false,
            };
            let tuned = fine_tune(model, &chosen, &cfg)?;
            let outcome = run_trials(&tuned.model, extractor, trials, source, embed)?;
            (tuned.train_accuracy, outcome)
        }
    };
    Ok(LabelRun {
        fraction,
        labelled: chosen.len(),
        train_accuracy,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SpectrogramConfig;
    use crate::nn::ModelConfig;
    use ndarray::array;
    use rand::Rng;

    /// Exhaustive O(n²) reference: counts errors at each threshold directly.
    fn brute_points(scores: &[f64], labels: &[bool]) -> Vec<OperatingPoint> {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let mut thresholds = vec![f64::NEG_INFINITY];
        thresholds.extend(ts);
        thresholds.push(f64::INFINITY);
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        thresholds
            .into_iter()
            .map(|t| {
                let fa = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count() as f64;
                let miss = scores.iter().zip(labels).filter(|(&s, &l)| l && s < t).count() as f64;
                OperatingPoint {
                    threshold: t,
                    far: fa / nn,
                    frr: miss / nt,
                }
            })
            .collect()
    }

    fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let pts = brute_points(scores, labels);
        for w in pts.windows(2) {
            let (dp, dq) = (w[0].frr - w[0].far, w[1].frr - w[1].far);
            if dp == 0.0 {
                return 100.0 * w[0].far;
            }
            if dq >= 0.0 {
                let a = -dp / (dq - dp);
                return 100.0 * (w[0].far + a * (w[1].far - w[0].far));
            }
        }
        unreachable!()
    }

    #[test]
    fn eer_examples() {
        let (e, _) = compute_eer(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(e, 0.0);
        let (e, t) = compute_eer(&[0.9, 0.6, 0.4, 0.5, 0.2, 0.1], &[true, true, true, false, false, false]).unwrap();
        assert!((e - 100.0 / 3.0).abs() < 1e-12);
        assert!(t > 0.4 && t <= 0.5);
        let (e, _) = compute_eer(&[0.9, 0.8, 0.1, 0.2], &[false, false, true, true]).unwrap();
        assert_eq!(e, 100.0);
        assert!(matches!(compute_eer(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn dcf_examples() {
        let cfg = DcfConfig::default();
        let m = compute_min_dcf(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], &cfg).unwrap();
        assert_eq!(m.raw, 0.0);
        let pts = operating_points(&[0.3, 0.7, 0.5], &[true, false, true]).unwrap();
        let reject_all = pts.last().unwrap();
        assert_eq!(reject_all.threshold, f64::INFINITY);
        assert!((cfg.dcf(reject_all) - 0.01).abs() < 1e-15);
        let m = compute_min_dcf(&[0.3, 0.7, 0.5], &[true, false, true], &cfg).unwrap();
        assert!(m.raw <= 0.01 && (m.normalized - m.raw / 0.01).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_brute_force() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<bool> = (0..300).map(|_| rng.random_bool(0.3)).collect();
            // Coarse scores so ties occur.
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| ((rng.random_range(-1.0..1.0) + if l { 0.5 } else { 0.0 }) * 20.0f64).round() / 20.0)
                .collect();
            let (e, _) = compute_eer(&scores, &labels).unwrap();
            assert_eq!(e, brute_eer(&scores, &labels));
            let m = compute_min_dcf(&scores, &labels, &DcfConfig::default()).unwrap();
            let brute = brute_points(&scores, &labels).iter().map(|p| DcfConfig::default().dcf(p)).fold(f64::INFINITY, f64::min);
            assert_eq!(m.raw, brute);
        }
    }

    #[test]
    fn eer_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 }).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        assert_eq!(compute_eer(&scores, &labels).unwrap().0, compute_eer(&warped, &labels).unwrap().0);
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0, 2.0, -0.5];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&array![1.0, 0.0], &array![0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_score(&a, &(-&a)).unwrap() + 1.0).abs() < 1e-15);
        let b = array![0.3, -1.0, 2.0];
        assert_eq!(cosine_score(&a, &b).unwrap(), cosine_score(&b, &a).unwrap());
        assert!(matches!(cosine_score(&a, &array![0.0, 0.0, 0.0]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn crop_spacing() {
        assert_eq!(crop_starts(32000, 32000, 5), vec![0; 5]);
        assert_eq!(crop_starts(80000, 32000, 1), vec![0]);
        assert_eq!(crop_starts(80000, 32000, 3), vec![0, 24000, 48000]);
        assert_eq!(crop_starts(1000, 32000, 3), vec![0, 0, 0]);
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            n_mels: 40,
            encoder_hidden: vec![16],
            rep_dim: 8,
            proj_dim: 16,
            ..Default::default()
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn tone(f: f64, secs: f64, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (secs * 16000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin() + rng.random_range(-0.01..0.01))
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn embedding_contract() {
        let m = tiny_model();
        let ex = LogMelExtractor::new(SpectrogramConfig::default()).unwrap();
        let w = tone(300.0, 2.0, 1);
        let one = extract_embedding(&m, &ex, &w, 32000, 1).unwrap();
        let five = extract_embedding(&m, &ex, &w, 32000, 5).unwrap();
        assert_eq!(one.len(), 8);
        for (a, b) in one.iter().zip(&five) {
            assert!((a - b).abs() < 1e-12);
        }
        let short = tone(300.0, 0.5, 2);
        assert!(extract_embedding(&m, &ex, &short, 32000, 3).is_ok());
    }

    #[test]
    fn augmented_items_are_seeded() {
        use crate::synth::{SynthConfig, SynthCorpus};
        let corpus: SynthCorpus<f64> = SynthCorpus::generate(&SynthConfig {
            speakers: 2,
            utts_per_speaker: 2,
            test_speakers: 0,
            trials: 2,
            duration: (1.0, 1.5),
            noise_files_per_category: 1,
            rirs: 1,
            ..Default::default()
        })
        .unwrap();
        let ex = LogMelExtractor::new(SpectrogramConfig::default()).unwrap();
        let cfg = EmbedConfig { chunk_samples: 8000, n_crops: 2 };
        let crops = |items: &[LabeledItem<f64>]| items.iter().flat_map(|i| i.crops.clone()).collect::<Vec<_>>();
        let (clean, names) = labeled_items(&corpus.train, &corpus.audio, &ex, &cfg).unwrap();
        assert_eq!(names.len(), 2);

        let off = AugmentPolicy::disabled();
        let (same, _) = augmented_labeled_items(&corpus.train, &corpus.audio, &ex, &cfg, &off, 0).unwrap();
        assert_eq!(crops(&clean), crops(&same));

        let on = corpus.policy(1.0, 1.0).unwrap();
        let (a, _) = augmented_labeled_items(&corpus.train, &corpus.audio, &ex, &cfg, &on, 3).unwrap();
        let (b, _) = augmented_labeled_items(&corpus.train, &corpus.audio, &ex, &cfg, &on, 3).unwrap();
        let (c, _) = augmented_labeled_items(&corpus.train, &corpus.audio, &ex, &cfg, &on, 4).unwrap();
        assert_eq!(crops(&a), crops(&b));
        assert_ne!(crops(&a), crops(&c));
        assert_ne!(crops(&a), crops(&clean));
        assert_eq!(a.iter().map(|i| i.label).collect::<Vec<_>>(), clean.iter().map(|i| i.label).collect::<Vec<_>>());
    }

    #[test]
    fn trials_cache_and_determinism() {
        let m = tiny_model();
        let ex = LogMelExtractor::new(SpectrogramConfig::default()).unwrap();
        let mut corpus = HashMap::new();
        for (i, f) in [200.0, 210.0, 900.0, 950.0].iter().enumerate() {
            corpus.insert(PathBuf::from(format!("u{i}.wav")), tone(*f, 2.5, i as u64));
        }
        let text = "1 u0.wav u1.wav\n0 u0.wav u2.wav\n1 u2.wav u3.wav\n0 u1.wav u3.wav\n";
        let trials = TrialList::parse(text, Path::new(""), Path::new("t.txt")).unwrap();
        let cfg = EmbedConfig { chunk_samples: 16000, n_crops: 2 };
        let a = run_trials(&m, &ex, &trials, &corpus, &cfg).unwrap();
        let b = run_trials(&m, &ex, &trials, &corpus, &cfg).unwrap();
        assert_eq!(a.embedded, 4);
        assert_eq!(a.cache_hits, 4);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.result, b.result);
        assert_eq!(a.scores_tsv(&trials).lines().count(), 4);

        let bad = TrialList::parse("1 u0.wav gone.wav\n0 u1.wav nope.wav\n", Path::new(""), Path::new("t")).unwrap();
        match run_trials(&m, &ex, &bad, &corpus, &cfg) {
            Err(EvalError::Unreadable(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trial_list_parsing() {
        let t = TrialList::parse("# c\n1 a b\n0 a c\n", Path::new("/d"), Path::new("x")).unwrap();
        assert_eq!(t.trials[0].enroll, PathBuf::from("/d/a"));
        assert_eq!(t.to_text(Path::new("/d")), "1 a b\n0 a c\n");
        assert!(matches!(TrialList::parse("2 a b\n", Path::new(""), Path::new("x")), Err(EvalError::TrialParse { line: 1, .. })));
        assert!(TrialList::parse("1 a b\n", Path::new(""), Path::new("x")).is_err());
    }

    #[test]
    fn fraction_selection() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(select_fraction(&labels, 1.0, 0).unwrap(), (0..100).collect::<Vec<_>>());
        let s = select_fraction(&labels, 0.1, 0).unwrap();
        assert_eq!(s.len(), 12);
        for c in 0..4 {
            assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 3);
        }
        assert!(matches!(select_fraction(&labels, 0.0, 0), Err(EvalError::InvalidFraction(_))));
    }

    #[test]
    fn probe_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = [array![3.0, 0.0], array![-3.0, 0.0], array![0.0, 3.0]];
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let reps = Array2::from_shape_fn((60, 2), |(i, j)| centers[labels[i]][j] + rng.random_range(-0.5..0.5));
        let cfg = ClassifierTraining {
            schedule: LrSchedule {
                initial: 0.05,
                decay_factor: 1.0,
                decay_every: 1,
            },
            epochs: 200,
            ..Default::default()
        };
        let r = linear_probe(&reps, &labels, &cfg).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
        assert!(r.losses.last().unwrap() < &r.losses[0]);
        assert!(matches!(linear_probe(&reps, &vec![1; 60], &cfg), Err(EvalError::TooFewSpeakers(1))));
    }

    #[test]
    fn frozen_fine_tune_equals_probe() {
        let m = tiny_model();
        let ex = LogMelExtractor::new(SpectrogramConfig::default()).unwrap();
        let items: Vec<LabeledItem<f64>> = (0..6)
            .map(|i| LabeledItem {
                crops: crop_features(&tone(200.0 + 300.0 * (i % 3) as f64, 1.2, i as u64), &ex, 8000, 2).unwrap(),
                label: i % 3,
            })
            .collect();
        let training = ClassifierTraining {
            epochs: 15,
            ..Default::default()
        };
        let ft = fine_tune(&m, &items, &FineTuneConfig { training, freeze_encoder: true }).unwrap();
        let reps = item_representations(&m, &items).unwrap();
        let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let probe = linear_probe(&reps, &labels, &training).unwrap();
        assert_eq!(ft.head, probe.head);
        assert_eq!(ft.losses, probe.losses);
        assert_eq!(ft.model, m);

        let full = fine_tune(&m, &items, &FineTuneConfig { training, freeze_encoder: false }).unwrap();
        assert_ne!(full.model, m);
        assert!(full.losses.last().unwrap() < &full.losses[0]);
    }
}
