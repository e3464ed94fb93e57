//! Training configuration file: UTF-8 `key = value` lines with dotted keys
//! (TOML syntax), e.g. `loss.vicreg.nu = 0.04`. Unknown keys are errors.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `train.batch_size` | 64 | utterances per batch (≥ 2) |
//! | `train.chunk_seconds` | 2.0 | length of each view |
//! | `train.max_epochs` | 500 | epoch budget |
//! | `train.seed` | 0 | master seed |
//! | `train.eval_every` | 1 | epochs between held-out evaluations |
//! | `train.patience` | 50 | evaluations without improvement before stopping |
//! | `eval.n_crops` | 5 | evenly spaced crops averaged per test utterance |
//! | `features.win_length`, `hop_length`, `n_fft`, `n_mels`, `f_min`, `f_max`, `log_floor` | 400, 160, 512, 40, 0, 8000, 1e-10 | log-mel front end |
//! | `model.encoder_hidden` | [128, 128] | frame MLP widths |
//! | `model.rep_dim` | 64 | representation size |
//! | `model.proj_dim` | 2048 | embedding size |
//! | `model.bn_momentum`, `model.bn_eps` | 0.1, 1e-5 | projector batch norm |
//! | `loss.kind` | "vicreg" | infonce, barlow, vicreg, comp1, comp2, reg_y, reg_z |
//! | `loss.alpha` | 0.1 | regularizer weight of reg_y / reg_z |
//! | `loss.infonce.tau` | 0.07 | temperature |
//! | `loss.infonce.denominator` | "cross_view" | or "within_view" |
//! | `loss.vicreg.lambda`, `mu`, `nu`, `eps` | 1, 1, 0.04, 1e-4 | VICReg weights |
//! | `loss.barlow.lambda`, `loss.barlow.eps` | 0.05, 1e-8 | Barlow Twins weights |
//! | `optim.lr`, `decay_factor`, `decay_every` | 0.001, 0.95, 10 | step-decay schedule |
//! | `optim.beta1`, `beta2`, `eps` | 0.9, 0.999, 1e-8 | Adam |
//! | `augment.enabled` | true | distort views |
//! | `augment.p_noise`, `augment.p_reverb` | 0.75, 0.5 | branch probabilities |
//! | `augment.noise_dir`, `augment.rir_dir` | `<data>/noise`, `<data>/rir` | corpora (relative to the config file) |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use log::warn;

use crate::augment::{AugmentPolicy, NoiseCorpus, RirCorpus};
use crate::features::SpectrogramConfig;
use crate::losses::{BarlowConfig, Denominator, InfoNceConfig, LossConfig, LossKind, VicregWeights};
use crate::nn::ModelConfig;
use crate::optim::{AdamConfig, LrSchedule};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: {message}")]
    Parse { origin: PathBuf, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub chunk_seconds: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 64,
            chunk_seconds: 2.0,
            max_epochs: 500,
            seed: 0,
            eval_every: 1,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_crops: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_crops: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        let d = SpectrogramConfig::default();
        Self {
            win_length: d.win_length,
            hop_length: d.hop_length,
            n_fft: d.n_fft,
            n_mels: d.n_mels,
            f_min: d.f_min,
            f_max: d.f_max,
            log_floor: d.log_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder_hidden: Vec<usize>,
    pub rep_dim: usize,
    pub proj_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            encoder_hidden: d.encoder_hidden,
            rep_dim: d.rep_dim,
            proj_dim: d.proj_dim,
            bn_momentum: d.bn_momentum,
            bn_eps: d.bn_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoNceSection {
    pub tau: f64,
    pub denominator: DenominatorName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorName {
    #[default]
    CrossView,
    WithinView,
}

impl Default for InfoNceSection {
    fn default() -> Self {
        Self {
            tau: InfoNceConfig::default().tau,
            denominator: DenominatorName::CrossView,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VicregSection {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub eps: f64,
}

impl Default for VicregSection {
    fn default() -> Self {
        let d = VicregWeights::default();
        Self {
            lambda: d.lambda,
            mu: d.mu,
            nu: d.nu,
            eps: d.eps_var,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarlowSection {
    pub lambda: f64,
    pub eps: f64,
}

impl Default for BarlowSection {
    fn default() -> Self {
        let d = BarlowConfig::default();
        Self {
            lambda: d.lambda,
            eps: d.eps_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: String,
    pub alpha: f64,
    pub infonce: InfoNceSection,
    pub vicreg: VicregSection,
    pub barlow: BarlowSection,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossKind::Vicreg.name().to_string(),
            alpha: LossConfig::default().alpha,
            infonce: InfoNceSection::default(),
            vicreg: VicregSection::default(),
            barlow: BarlowSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let (s, a) = (LrSchedule::default(), AdamConfig::default());
        Self {
            lr: s.initial,
            decay_factor: s.decay_factor,
            decay_every: s.decay_every,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub enabled: bool,
    pub p_noise: f64,
    pub p_reverb: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rir_dir: Option<PathBuf>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            enabled: true,
            p_noise: 0.75,
            p_reverb: 0.5,
            noise_dir: None,
            rir_dir: None,
        }
    }
}

/// Everything that determines a training run besides data and seed flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub eval: EvalSection,
    pub features: FeaturesSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub augment: AugmentSection,
}

impl TrainConfig {
    /// Parses and validates; relative corpus directories resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_path_buf(),
            message: e.to_string().replace('\n', " ").trim().to_string(),
        })?;
        for dir in [&mut cfg.augment.noise_dir, &mut cfg.augment.rir_dir].into_iter().flatten() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Canonical rendering, one `key = value` line per setting.
    pub fn to_text(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &toml::Value::Table(table), &mut lines);
        lines.join("\n") + "\n"
    }

    /// SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Lines of `self` that differ from `other`, as `key: old -> new`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let parse = |c: &Self| -> Vec<(String, String)> {
            c.to_text()
                .lines()
                .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
                .collect()
        };
        let (a, b) = (parse(self), parse(other));
        let mut keys: Vec<&String> = a.iter().chain(&b).map(|(k, _)| k).collect();
        keys.sort();
        keys.dedup();
        let get = |m: &[(String, String)], k: &str| m.iter().find(|(kk, _)| kk == k).map(|(_, v)| v.clone());
        keys.into_iter()
            .filter_map(|k| {
                let (x, y) = (get(&a, k), get(&b, k));
                (x != y).then(|| {
                    format!("{k}: {} -> {}", x.unwrap_or_else(|| "unset".into()), y.unwrap_or_else(|| "unset".into()))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(ConfigError::Invalid(format!("train.batch_size must be at least 2, got {}", t.batch_size)));
        }
        if !(t.chunk_seconds > 0.0) || self.chunk_samples() == 0 {
            return Err(ConfigError::Invalid(format!("train.chunk_seconds must be positive, got {}", t.chunk_seconds)));
        }
        if t.eval_every == 0 {
            return Err(ConfigError::Invalid("train.eval_every must be at least 1".into()));
        }
        if self.eval.n_crops == 0 {
            return Err(ConfigError::Invalid("eval.n_crops must be at least 1".into()));
        }
        for (k, p) in [("augment.p_noise", self.augment.p_noise), ("augment.p_reverb", self.augment.p_reverb)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("{k} = {p} outside [0, 1]")));
            }
        }
        self.loss_kind()?;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.spectrogram().validate().map_err(|e| invalid(&e))?;
        self.model_config().validate().map_err(|e| invalid(&e))?;
        self.schedule().validate().map_err(|e| invalid(&e))?;
        let l = &self.loss;
        if !(l.infonce.tau > 0.0) || !(l.alpha >= 0.0) || !(l.vicreg.eps > 0.0) || !(l.barlow.eps > 0.0) {
            return Err(ConfigError::Invalid("loss: tau and eps must be positive, alpha non-negative".into()));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(ConfigError::Invalid("optim: betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_samples(&self) -> usize {
        (self.train.chunk_seconds * f64::from(crate::audio_io::SAMPLE_RATE)).round() as usize
    }

    pub fn loss_kind(&self) -> Result<LossKind, ConfigError> {
        self.loss.kind.parse().map_err(|_| {
            let names: Vec<&str> = LossKind::ALL.iter().map(|k| k.name()).collect();
            ConfigError::Invalid(format!("loss.kind {:?} is not one of {}", self.loss.kind, names.join(", ")))
        })
    }

    pub fn spectrogram(&self) -> SpectrogramConfig {
        let f = &self.features;
        SpectrogramConfig {
            sample_rate: crate::audio_io::SAMPLE_RATE,
            win_length: f.win_length,
            hop_length: f.hop_length,
            n_fft: f.n_fft,
            n_mels: f.n_mels,
            f_min: f.f_min,
            f_max: f.f_max,
            log_floor: f.log_floor,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_mels: self.features.n_mels,
            encoder_hidden: m.encoder_hidden.clone(),
            rep_dim: m.rep_dim,
            proj_dim: m.proj_dim,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
        }
    }

    /// Panics on an unknown loss name; call [`Self::validate`] first.
    pub fn loss_config(&self) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            kind: self.loss_kind().expect("validated loss kind"),
            infonce: InfoNceConfig {
                tau: l.infonce.tau,
                denominator: match l.infonce.denominator {
                    DenominatorName::CrossView => Denominator::CrossView,
                    DenominatorName::WithinView => Denominator::WithinView,
                },
            },
            vicreg: VicregWeights {
                lambda: l.vicreg.lambda,
                mu: l.vicreg.mu,
                nu: l.vicreg.nu,
                eps_var: l.vicreg.eps,
            },
            barlow: BarlowConfig {
                lambda: l.barlow.lambda,
                eps_std: l.barlow.eps,
            },
            alpha: l.alpha,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.optim.lr,
            decay_factor: self.optim.decay_factor,
            decay_every: self.optim.decay_every,
        }
    }

    /// The view-distortion policy; corpora default to `<data>/noise` and
    /// `<data>/rir`. A branch whose corpus is missing or empty is switched
    /// off with a warning; both missing is an error.
    pub fn augment_policy<T: Scalar>(&self, data_dir: &Path) -> Result<AugmentPolicy<T>, crate::Error> {
        let a = &self.augment;
        if !a.enabled {
            return Ok(AugmentPolicy::disabled());
        }
        let noise_dir = a.noise_dir.clone().unwrap_or_else(|| data_dir.join("noise"));
        let rir_dir = a.rir_dir.clone().unwrap_or_else(|| data_dir.join("rir"));
        let noise = if noise_dir.is_dir() { NoiseCorpus::load_dir(&noise_dir)? } else { NoiseCorpus::default() };
        let rir = if rir_dir.is_dir() { RirCorpus::load_dir(&rir_dir)? } else { RirCorpus::default() };
        if noise.is_empty() && rir.files.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "augmentation is enabled but neither {} nor {} holds WAV files",
                noise_dir.display(),
                rir_dir.display()
            ))
            .into());
        }
        let mut p_noise = a.p_noise;
        let mut p_reverb = a.p_reverb;
        if noise.is_empty() && p_noise > 0.0 {
            warn!("no noise files under {}; noise branch disabled", noise_dir.display());
            p_noise = 0.0;
        }
        if rir.files.is_empty() && p_reverb > 0.0 {
            warn!("no impulse responses under {}; reverberation branch disabled", rir_dir.display());
            p_reverb = 0.0;
        }
        Ok(AugmentPolicy::new(p_noise, p_reverb, noise, rir)?)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            epsilon: self.optim.eps,
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        TrainConfig::parse(text, Path::new("/cfg"), Path::new("train.conf"))
    }

    #[test]
    fn defaults_and_dotted_keys() {
        let c = parse("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.chunk_samples(), 32000);
        let c = parse("loss.vicreg.nu = 0.5\nloss.kind = \"comp2\"\nmodel.encoder_hidden = [32]\naugment.rir_dir = \"r\"\n").unwrap();
        assert_eq!(c.loss_config().vicreg.nu, 0.5);
        assert_eq!(c.loss_config().kind, LossKind::Comp2);
        assert_eq!(c.model_config().encoder_hidden, vec![32]);
        assert_eq!(c.augment.rir_dir, Some(PathBuf::from("/cfg/r")));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = parse("loss.vicreg.nuu = 0.04\n").unwrap_err();
        assert!(e.to_string().contains("nuu"), "{e}");
        assert!(parse("trian.seed = 1\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(matches!(parse("train.batch_size = 1\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("loss.kind = \"simclr\"\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("train.chunk_seconds = 0.0\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("augment.p_noise = 1.5\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = parse("train.seed = 9\nloss.alpha = 0.0\naugment.noise_dir = \"/n\"\n").unwrap();
        let back = parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(c.to_text().contains("train.seed = 9\n"));
    }

    #[test]
    fn diff_names_changed_keys() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.loss.kind = "barlow".into();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.diff(&b), vec!["loss.kind: \"vicreg\" -> \"barlow\"".to_string()]);
    }
}
