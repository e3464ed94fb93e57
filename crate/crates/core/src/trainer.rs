//! Two-view training: batch assembly with independent augmentation per view,
//! the shared-weight update, the epoch loop with held-out evaluation and
//! early stopping, metrics, and bit-exact checkpoint/resume.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error as ThisError;

use crate::audio_io::{sample_disjoint_pair, Manifest, ManifestEntry};
use crate::augment::{apply_policy, AugmentPolicy};
use crate::config::TrainConfig;
use crate::eval::{run_trials, EmbedConfig, EvalResult, TrialList, WaveSource};
use crate::features::{FeatureMatrix, LogMelExtractor};
use crate::losses::{mean_dim_std, LossConfig};
use crate::nn::Model;
use crate::objective::forward_backward;
use crate::optim::{Adam, EarlyStop, StopDecision};
use crate::rng::{epoch_stream, item_stream};
use crate::scalar::{to_f64, Scalar};
use crate::Error;

const MAGIC: &[u8; 8] = b"SSLSVCK\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, ThisError)]
pub enum TrainError {
    #[error("manifest has {entries} utterances but a batch needs {batch}")]
    ManifestTooSmall { batch: usize, entries: usize },
    #[error("checkpoint is not a training checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
}

/// What a training run reads.
pub struct TrainData<'a, T> {
    pub manifest: &'a Manifest,
    pub source: &'a dyn WaveSource<T>,
    pub policy: &'a AugmentPolicy<T>,
    /// Held-out trials scored between epochs; `None` disables evaluation.
    pub trials: Option<&'a TrialList>,
}

/// Assembles the two aligned views of a batch. Each utterance draws its
/// chunk placement and each view's augmentation from its own stream, so the
/// result does not depend on worker count or scheduling.
#[allow(clippy::too_many_arguments)]
pub fn build_batch<T: Scalar>(
    entries: &[&ManifestEntry],
    source: &dyn WaveSource<T>,
    policy: &AugmentPolicy<T>,
    extractor: &LogMelExtractor<T>,
    chunk: usize,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<FeatureMatrix<T>>, Vec<FeatureMatrix<T>>), Error> {
    let views = entries
        .par_iter()
        .map(|e| -> Result<_, Error> {
            let w = source.load(&e.path)?;
            let id = e.utterance_id.as_str();
            let (a, b, _) = sample_disjoint_pair(&w, chunk, &mut item_stream(seed, epoch, id, "crop"))?;
            let a = apply_policy(&a, policy, &mut item_stream(seed, epoch, id, "augment-a"))?;
            let b = apply_policy(&b, policy, &mut item_stream(seed, epoch, id, "augment-b"))?;
            Ok((extractor.features(&a)?, extractor.features(&b)?))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(views.into_iter().unzip())
}

/// Manifest indices of each batch of one epoch: a seeded shuffle cut into
/// `batch_size` pieces; a final piece with fewer than 2 items is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_stream(seed, epoch, "shuffle"));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Unweighted value of every loss term.
    pub terms: Vec<(String, f64)>,
    /// Mean per-dimension std of the first view's embeddings (or
    /// representations for losses applied only there).
    pub emb_std: f64,
}

/// Forward both views through the one parameter set, backpropagate the
/// configured loss and take one Adam step.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    view_a: &[FeatureMatrix<T>],
    view_b: &[FeatureMatrix<T>],
    loss: &LossConfig,
    lr: f64,
) -> Result<StepStats, Error> {
    let step = forward_backward(model, view_a, view_b, loss)?;
    if !step.grads.is_finite() {
        return Err(Error::NonFiniteLoss("gradient has non-finite entries".into()));
    }
    adam.step(model.params_mut(), &step.grads.tensors, lr)?;
    let monitored = step.z.as_ref().map_or(&step.y.0, |z| &z.0);
    Ok(StepStats {
        loss: to_f64(step.loss.value),
        terms: step.loss.diagnostics.terms.iter().map(|t| (t.name.clone(), to_f64(t.value))).collect(),
        emb_std: to_f64(mean_dim_std(monitored)),
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub terms: Vec<(String, f64)>,
    pub emb_std: f64,
    pub eval: Option<EvalResult>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn tsv_header(&self) -> String {
        let mut h = String::from("epoch\tloss");
        for (name, _) in &self.terms {
            let _ = write!(h, "\tterm:{name}");
        }
        h + "\temb_std\teval_eer\teval_mindcf\tlr\tseconds"
    }

    pub fn tsv_row(&self) -> String {
        let mut r = format!("{}\t{:.8}", self.epoch, self.loss);
        for (_, v) in &self.terms {
            let _ = write!(r, "\t{v:.8}");
        }
        let (eer, dcf) = self.eval.map_or((f64::NAN, f64::NAN), |e| (e.eer, e.min_dcf));
        let _ = write!(r, "\t{:.6}\t{eer:.4}\t{dcf:.6}\t{:.3e}\t{:.3}", self.emb_std, self.lr, self.seconds);
        r
    }
}

/// Training state; everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub early_stop: EarlyStop,
    pub best_epoch: Option<usize>,
    pub stopped: bool,
    /// Metrics of the epochs run by this process.
    pub history: Vec<EpochMetrics>,
    /// Model of the best evaluation so far in this process.
    pub best_model: Option<Model<T>>,
    extractor: LogMelExtractor<T>,
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub best_eer: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self, Error> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Model::new(config.model_config(), &mut init)?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let adam = Adam::new(config.adam(), &shapes);
        let extractor = LogMelExtractor::new(config.spectrogram())?;
        Ok(Self {
            early_stop: EarlyStop::new(config.train.patience),
            config,
            model,
            adam,
            epoch: 0,
            best_epoch: None,
            stopped: false,
            history: Vec::new(),
            best_model: None,
            extractor,
        })
    }

    pub fn extractor(&self) -> &LogMelExtractor<T> {
        &self.extractor
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            chunk_samples: self.config.chunk_samples(),
            n_crops: self.config.eval.n_crops,
        }
    }

    /// Number of optimizer steps in one epoch over `manifest_len` items.
    pub fn steps_per_epoch(&self, manifest_len: usize) -> usize {
        epoch_batches(manifest_len, self.config.train.batch_size, 0, 0).len()
    }

    /// Runs the next epoch and, when due, the held-out evaluation.
    pub fn run_epoch(&mut self, data: &TrainData<'_, T>) -> Result<EpochMetrics, Error> {
        let cfg = &self.config;
        let n = cfg.train.batch_size;
        if data.manifest.len() < n {
            return Err(TrainError::ManifestTooSmall {
                batch: n,
                entries: data.manifest.len(),
            }
            .into());
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let seed = cfg.train.seed;
        let lr = cfg.schedule().lr_at_epoch(epoch);
        let loss_cfg = cfg.loss_config();
        let chunk = cfg.chunk_samples();

        let batches = epoch_batches(data.manifest.len(), n, seed, epoch);
        let mut loss = 0.0;
        let mut emb_std = 0.0;
        let mut terms: Vec<(String, f64)> = Vec::new();
        for idx in &batches {
            let entries: Vec<&ManifestEntry> = idx.iter().map(|&i| &data.manifest.entries[i]).collect();
            let (a, b) = build_batch(&entries, data.source, data.policy, &self.extractor, chunk, seed, epoch)?;
            let s = train_step(&mut self.model, &mut self.adam, &a, &b, &loss_cfg, lr)?;
            loss += s.loss;
            emb_std += s.emb_std;
            if terms.is_empty() {
                terms = s.terms;
            } else {
                for (acc, (_, v)) in terms.iter_mut().zip(s.terms) {
                    acc.1 += v;
                }
            }
        }
        let k = batches.len().max(1) as f64;
        for t in &mut terms {
            t.1 /= k;
        }
        self.epoch += 1;

        let mut eval = None;
        if let Some(trials) = data.trials {
            if self.epoch % self.config.train.eval_every == 0 {
                let outcome = run_trials(&self.model, &self.extractor, trials, data.source, &self.embed_config())?;
                if self.early_stop.best.is_none_or(|b| outcome.result.eer < b) {
                    self.best_epoch = Some(self.epoch);
                    self.best_model = Some(self.model.clone());
                }
                if self.early_stop.update(outcome.result.eer) == StopDecision::Stop {
                    self.stopped = true;
                }
                eval = Some(outcome.result);
            }
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps: batches.len(),
            loss: loss / k,
            terms,
            emb_std: emb_std / k,
            eval,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains until the epoch budget is spent or early stopping fires. With
    /// `out`, appends `metrics.tsv`, rewrites `last.ckpt` after every epoch
    /// and `best.model` whenever the held-out EER improves.
    pub fn fit(&mut self, data: &TrainData<'_, T>, out: Option<&Path>) -> Result<FitSummary, Error> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
            let cfg_path = dir.join("config.toml");
            std::fs::write(&cfg_path, self.config.to_text()).map_err(|source| io_err(&cfg_path, source))?;
        }
        let first = self.epoch;
        while self.epoch < self.config.train.max_epochs && !self.stopped {
            let before = self.best_epoch;
            let m = self.run_epoch(data)?;
            info!(
                "epoch {} loss {:.5} emb_std {:.4} eer {} lr {:.2e} ({:.1}s)",
                m.epoch,
                m.loss,
                m.emb_std,
                m.eval.map_or("-".to_string(), |e| format!("{:.2}%", e.eer)),
                m.lr,
                m.seconds
            );
            if let Some(dir) = out {
                append_metrics(&dir.join("metrics.tsv"), &m)?;
                self.save_checkpoint(&dir.join("last.ckpt"))?;
                if self.best_epoch != before {
                    let path = dir.join("best.model");
                    let bytes = self.best_model.as_ref().expect("best model recorded").to_bytes();
                    std::fs::write(&path, bytes).map_err(|source| io_err(&path, source))?;
                }
            }
        }
        if self.stopped {
            info!("early stop after epoch {} (best epoch {:?})", self.epoch, self.best_epoch);
        }
        Ok(FitSummary {
            epochs_run: self.epoch - first,
            early_stopped: self.stopped,
            best_eer: self.early_stop.best,
            best_epoch: self.best_epoch,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        let text = self.config.to_text();
        w.write_u64::<LittleEndian>(text.len() as u64).unwrap();
        w.extend_from_slice(text.as_bytes());
        w.write_u64::<LittleEndian>(self.epoch as u64).unwrap();
        w.write_u8(u8::from(self.stopped)).unwrap();
        let es = &self.early_stop;
        w.write_u64::<LittleEndian>(es.patience as u64).unwrap();
        w.write_f64::<LittleEndian>(es.best.unwrap_or(f64::NAN)).unwrap();
        w.write_u64::<LittleEndian>(es.since_best as u64).unwrap();
        w.write_u64::<LittleEndian>(self.best_epoch.map_or(u64::MAX, |e| e as u64)).unwrap();
        let model = self.model.to_bytes();
        w.write_u64::<LittleEndian>(model.len() as u64).unwrap();
        w.extend_from_slice(&model);
        self.adam.write_to(&mut w).unwrap();
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|source| io_err(path, source))
    }

    /// Restores a run. `config` is what the caller wants to continue with;
    /// differences from the stored configuration are returned (and logged)
    /// as warnings. The model architecture must match.
    pub fn from_bytes(bytes: &[u8], config: Option<TrainConfig>) -> Result<(Self, Vec<String>), Error> {
        let corrupt = |what: &str| Error::from(TrainError::Corrupt(what.to_string()));
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TrainError::BadMagic.into());
        }
        let mut r = &bytes[MAGIC.len()..];
        let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("header"))?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        if bytes.len() < 32 + 12 {
            return Err(corrupt("too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = &body[MAGIC.len() + 4..];
        let read_u64 = |r: &mut &[u8]| r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"));
        let text_len = read_u64(&mut r)? as usize;
        if text_len > r.len() {
            return Err(corrupt("config length"));
        }
        let text = std::str::from_utf8(&r[..text_len]).map_err(|_| corrupt("config text"))?;
        let stored = TrainConfig::parse(text, Path::new(""), Path::new("<checkpoint>"))?;
        r = &r[text_len..];
        let epoch = read_u64(&mut r)? as usize;
        let stopped = r.read_u8().map_err(|_| corrupt("truncated"))? != 0;
        let _stored_patience = read_u64(&mut r)?;
        let best = r.read_f64::<LittleEndian>().map_err(|_| corrupt("truncated"))?;
        let since_best = read_u64(&mut r)? as usize;
        let best_epoch = read_u64(&mut r)?;
        let model_len = read_u64(&mut r)? as usize;
        if model_len > r.len() {
            return Err(corrupt("model length"));
        }

        let config = config.unwrap_or_else(|| stored.clone());
        config.validate()?;
        let warnings: Vec<String> = stored.diff(&config).into_iter().map(|d| format!("config differs from checkpoint: {d}")).collect();
        for w in &warnings {
            warn!("{w}");
        }
        let model = Model::from_bytes_expecting(&r[..model_len], &config.model_config())?;
        r = &r[model_len..];
        let mut adam: Adam<T> = Adam::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        adam.config = config.adam();
        let mut early_stop = EarlyStop::new(config.train.patience);
        early_stop.best = (!best.is_nan()).then_some(best);
        early_stop.since_best = since_best;
        let extractor = LogMelExtractor::new(config.spectrogram())?;
        Ok((
            Self {
                config,
                model,
                adam,
                epoch,
                early_stop,
                best_epoch: (best_epoch != u64::MAX).then_some(best_epoch as usize),
                stopped,
                history: Vec::new(),
                best_model: None,
                extractor,
            },
            warnings,
        ))
    }

    pub fn load_checkpoint(path: &Path, config: Option<TrainConfig>) -> Result<(Self, Vec<String>), Error> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| io_err(path, source))?;
        Self::from_bytes(&bytes, config)
    }
}

/// A trained network from either a trainer checkpoint or a bare model file,
/// with the training configuration when the file carries one. With
/// `expected`, the architecture must match it.
pub fn load_model<T: Scalar>(path: &Path, expected: Option<&TrainConfig>) -> Result<(Model<T>, Option<TrainConfig>), Error> {
    let bytes = std::fs::read(path).map_err(|source| io_err(path, source))?;
    if bytes.starts_with(MAGIC) {
        let (t, _) = Trainer::<T>::from_bytes(&bytes, expected.cloned())?;
        Ok((t.model, Some(t.config)))
    } else {
        let model = match expected {
            Some(cfg) => Model::from_bytes_expecting(&bytes, &cfg.model_config())?,
            None => Model::from_bytes(&bytes)?,
        };
        Ok((model, None))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from(path),
        source,
    }
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<(), Error> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| io_err(path, source))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&m.tsv_header());
        text.push('\n');
    }
    text.push_str(&m.tsv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|source| io_err(path, source))
}
