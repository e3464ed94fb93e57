//! Self-supervised speaker embeddings: two-view training with VICReg,
//! Barlow Twins and InfoNCE objectives (plus their composites), waveform
//! augmentation, log-mel features, a small network with hand-written
//! gradients, and EER/minDCF evaluation.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! aliases below fix it to `f64`, which is what training uses.

pub mod audio_io;
pub mod augment;
pub mod config;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

use thiserror::Error;

/// Umbrella error for operations spanning several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] audio_io::AudioError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error("loss became non-finite; terms: {0}")]
    NonFiniteLoss(String),
    #[error("{0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Waveform = audio_io::Waveform<f64>;
pub type FeatureMatrix = features::FeatureMatrix<f64>;
pub type LogMelExtractor = features::LogMelExtractor<f64>;
pub type Model = nn::Model<f64>;
pub type ModelGrads = nn::ModelGrads<f64>;
pub type LossOutput = losses::LossOutput<f64>;
pub type Adam = optim::Adam<f64>;
pub type Trainer = trainer::Trainer<f64>;
