//! `sslsv` command-line front end.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use sslsv::audio_io::{load_wav, save_wav, Manifest};
use sslsv::augment::{apply_policy_logged, AugmentPolicy, NoiseCorpus, RirCorpus};
use sslsv::config::TrainConfig;
use sslsv::eval::{
    augmented_labeled_items,
    extract_embedding, label_efficiency_run, labeled_items, run_trials, Adaptation, ClassifierTraining, EmbedConfig, FileSource,
    TrialList,
};
use sslsv::gradcheck;
use sslsv::optim::LrSchedule;
use sslsv::rng::derive;
use sslsv::synth::{self, SynthConfig, SynthCorpus};
use sslsv::trainer::{load_model, TrainData, Trainer};
use sslsv::{Error, LogMelExtractor, Model};

#[derive(Debug, Parser)]
#[command(name = "sslsv", version, about = "Self-supervised speaker embeddings: training, evaluation and tooling")]
struct Cli {
    /// Worker threads for batch assembly and scoring [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder on unlabelled utterances.
    Train(TrainArgs),
    /// Score a trial list and print EER / minDCF.
    Evaluate(EvaluateArgs),
    /// Print the representation of one WAV file.
    Extract(ExtractArgs),
    /// Train a linear speaker classifier on frozen representations.
    Probe(AdaptArgs),
    /// Fine-tune the whole network with a speaker classifier.
    Finetune(AdaptArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write one augmented copy of a WAV file.
    AugmentPreview(AugmentPreviewArgs),
    /// Generate the deterministic synthetic speaker corpus.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training configuration (TOML key = value lines)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Data directory: manifest.tsv, optional trials.txt, noise/ and rir/
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for config.toml, metrics.tsv, last.ckpt and best.model
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Master seed, overriding train.seed
    #[arg(long, env = "SSLSV_SEED")]
    seed: Option<u64>,
    /// Epoch budget, overriding train.max_epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from <out>/last.ckpt
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Trainer checkpoint (last.ckpt) or model file (best.model)
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Configuration for the features and expected architecture [default: the checkpoint's own, else built-in defaults]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Evenly spaced crops averaged per utterance [default: eval.n_crops]
    #[arg(long, value_name = "K")]
    n_crops: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trial list: `label enrol test` per line
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// Also write per-trial scores as TSV
    #[arg(long, value_name = "FILE")]
    scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input WAV (16 kHz mono 16-bit)
    #[arg(long, value_name = "FILE")]
    wav: PathBuf,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Data directory: manifest.tsv with speaker labels and trials.txt
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Trial list to score [default: <data>/trials.txt]
    #[arg(long, value_name = "FILE")]
    trials: Option<PathBuf>,
    /// Fraction of labelled utterances used, stratified per speaker
    #[arg(long, default_value_t = 1.0)]
    label_fraction: f64,
    /// Training epochs
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Mini-batch size [default: full batch]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for the subset, head initialisation, batching and augmentation
    #[arg(long, env = "SSLSV_SEED", default_value_t = 0)]
    seed: u64,
    /// Distort the labelled crops with <data>/noise and <data>/rir
    #[arg(long)]
    augment: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for the random instances
    #[arg(long, env = "SSLSV_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AugmentPreviewArgs {
    /// Input WAV
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output WAV
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Seed of the distortion draw
    #[arg(long, env = "SSLSV_SEED", default_value_t = 0)]
    seed: u64,
    /// Noise corpus with speech/, music/ and noise/ subdirectories
    #[arg(long, value_name = "DIR")]
    noise_dir: Option<PathBuf>,
    /// Directory of room impulse responses
    #[arg(long, value_name = "DIR")]
    rir_dir: Option<PathBuf>,
    /// Probability of the noise branch
    #[arg(long, default_value_t = 1.0)]
    p_noise: f64,
    /// Probability of the reverberation branch
    #[arg(long, default_value_t = 1.0)]
    p_reverb: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Training speakers
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    /// Utterances per training speaker
    #[arg(long, default_value_t = 20)]
    utts_per_speaker: usize,
    /// Held-out trial speakers; 0 draws trials from the training speakers
    #[arg(long, default_value_t = SynthConfig::default().test_speakers)]
    test_speakers: usize,
    /// Utterances per held-out speaker
    #[arg(long, default_value_t = SynthConfig::default().test_utts_per_speaker)]
    test_utts_per_speaker: usize,
    /// Record the held-out utterances with the first training voices
    /// (closed-set trials for label-efficiency runs)
    #[arg(long)]
    reuse_train_voices: bool,
    /// Trials, half target and half non-target
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Corpus seed
    #[arg(long, env = "SSLSV_SEED", default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Extract(a) => extract(a),
        Command::Probe(a) => adapt(a, Adaptation::Probe),
        Command::Finetune(a) => adapt(a, Adaptation::FineTune),
        Command::Gradcheck(a) => return Ok(run_gradcheck(a)),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::SynthData(a) => synth_data(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut config = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.train.max_epochs = epochs;
    }
    config.validate()?;
    let manifest = Manifest::load(a.data.join("manifest.tsv"))?;
    let trials_path = a.data.join("trials.txt");
    let trials = if trials_path.is_file() {
        Some(TrialList::load(&trials_path)?)
    } else {
        warn!("{} not found; training without held-out evaluation", trials_path.display());
        None
    };
    let policy: AugmentPolicy<f64> = config.augment_policy(&a.data)?;
    let mut paths: Vec<PathBuf> = manifest.entries.iter().map(|e| e.path.clone()).collect();
    if let Some(t) = &trials {
        paths.extend(t.unique_paths());
    }
    let audio = synth::preload::<f64>(paths)?;
    let ckpt = a.out.join("last.ckpt");
    let mut trainer = if a.resume && ckpt.is_file() {
        let (t, _) = Trainer::load_checkpoint(&ckpt, Some(config))?;
        info!("resuming from {} at epoch {}", ckpt.display(), t.epoch);
        t
    } else {
        if a.resume {
            warn!("{} not found; starting from scratch", ckpt.display());
        }
        Trainer::new(config)?
    };
    let data = TrainData {
        manifest: &manifest,
        source: &audio,
        policy: &policy,
        trials: trials.as_ref(),
    };
    let summary = trainer.fit(&data, Some(&a.out))?;
    let best = summary.best_eer.map_or("-".to_string(), |e| format!("{e:.2}%"));
    println!(
        "epochs {}  early_stopped {}  best_eer {}  best_epoch {}",
        summary.epochs_run,
        summary.early_stopped,
        best,
        summary.best_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    Ok(())
}

/// The network plus the feature front end and crop settings to run it with.
fn load_for_inference(m: &ModelArgs) -> Result<(Model, LogMelExtractor, EmbedConfig), Error> {
    let explicit = m.config.as_ref().map(TrainConfig::load).transpose()?;
    let (model, stored) = load_model::<f64>(&m.checkpoint, explicit.as_ref())?;
    let config = explicit.or(stored).unwrap_or_default();
    let extractor = LogMelExtractor::new(config.spectrogram())?;
    let embed = EmbedConfig {
        chunk_samples: config.chunk_samples(),
        n_crops: m.n_crops.unwrap_or(config.eval.n_crops),
    };
    Ok((model, extractor, embed))
}

fn evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let (model, extractor, embed) = load_for_inference(&a.model)?;
    let trials = TrialList::load(&a.trials)?;
    let outcome = run_trials(&model, &extractor, &trials, &FileSource, &embed)?;
    if let Some(path) = &a.scores {
        std::fs::write(path, outcome.scores_tsv(&trials)).map_err(|source| Error::Io { path: path.clone(), source })?;
    }
    let r = outcome.result;
    println!(
        "trials {}  EER {:.2}%  minDCF {:.4} (raw {:.5})  eer_threshold {:.6}",
        trials.trials.len(),
        r.eer,
        r.min_dcf,
        r.min_dcf_raw,
        r.eer_threshold
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<(), Error> {
    let (model, extractor, embed) = load_for_inference(&a.model)?;
    let wave = load_wav(&a.wav)?;
    let y = extract_embedding(&model, &extractor, &wave, embed.chunk_samples, embed.n_crops)?;
    let line: Vec<String> = y.iter().map(|v| v.to_string()).collect();
    println!("{}", line.join(" "));
    Ok(())
}

fn adapt(a: AdaptArgs, how: Adaptation) -> Result<(), Error> {
    let (model, extractor, embed) = load_for_inference(&a.model)?;
    let manifest = Manifest::load(a.data.join("manifest.tsv"))?;
    let trials = TrialList::load(a.trials.unwrap_or_else(|| a.data.join("trials.txt")))?;
    let mut paths: Vec<PathBuf> = manifest.entries.iter().map(|e| e.path.clone()).collect();
    paths.extend(trials.unique_paths());
    let audio = synth::preload::<f64>(paths)?;
    let (items, speakers) = if a.augment {
        let policy = TrainConfig::default().augment_policy(&a.data)?;
        augmented_labeled_items(&manifest, &audio, &extractor, &embed, &policy, a.seed)?
    } else {
        labeled_items(&manifest, &audio, &extractor, &embed)?
    };
    let training = ClassifierTraining {
        schedule: LrSchedule {
            initial: a.lr,
            decay_factor: 1.0,
            decay_every: 1,
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let run = label_efficiency_run(&model, &extractor, &items, a.label_fraction, how, &training, &trials, &audio, &embed)?;
    let r = run.outcome.result;
    println!(
        "fraction {}  labelled {}/{} ({} speakers)  train_accuracy {:.2}%  EER {:.2}%  minDCF {:.4}",
        run.fraction,
        run.labelled,
        items.len(),
        speakers.len(),
        100.0 * run.train_accuracy,
        r.eer,
        r.min_dcf
    );
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> ExitCode {
    let results = gradcheck::run_suite(a.seed);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>8}  {:>7}  status", "check", "max_rel_err", "checked", "skipped");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.3e}  {:>8}  {:>7}  {status}",
            r.name, r.max_rel_error, r.checked, r.skipped
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(out, "{} checks, {failed} failed (tolerance {:e})", results.len(), gradcheck::TOLERANCE);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn augment_preview(a: AugmentPreviewArgs) -> Result<(), Error> {
    if a.noise_dir.is_none() && a.rir_dir.is_none() {
        return Err(Error::Invalid("augment-preview needs --noise-dir and/or --rir-dir".into()));
    }
    let noise = a.noise_dir.as_deref().map(NoiseCorpus::load_dir).transpose()?.unwrap_or_default();
    let rir = a.rir_dir.as_deref().map(RirCorpus::load_dir).transpose()?.unwrap_or_default();
    let p_noise = if noise.is_empty() { 0.0 } else { a.p_noise };
    let p_reverb = if rir.files.is_empty() { 0.0 } else { a.p_reverb };
    let policy = AugmentPolicy::new(p_noise, p_reverb, noise, rir)?;
    let wave = load_wav::<f64>(&a.input)?;
    let (out, log) = apply_policy_logged(&wave, &policy, &mut derive(a.seed, &[b"augment-preview"]))?;
    save_wav(&out, &a.out)?;
    match &log.noise {
        Some(n) => println!("noise {} file {} at {:.2} dB", n.category, n.file_index, n.snr_db),
        None if log.skipped_silent => println!("noise skipped (silent input)"),
        None => println!("noise none"),
    }
    match log.rir_index {
        Some(i) => println!("reverb rir {i}"),
        None => println!("reverb none"),
    }
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<(), Error> {
    let cfg = SynthConfig {
        seed: a.seed,
        speakers: a.speakers,
        utts_per_speaker: a.utts_per_speaker,
        test_speakers: a.test_speakers,
        test_utts_per_speaker: a.test_utts_per_speaker,
        test_reuses_train_voices: a.reuse_train_voices,
        trials: a.trials,
        ..SynthConfig::default()
    };
    let corpus = SynthCorpus::<f64>::generate(&cfg)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {} training + {} held-out utterances, {} trials, {} noise files, {} impulse responses to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.trials.trials.len(),
        corpus.noise_files.len(),
        corpus.rir_files.len(),
        Path::new(&a.out).display()
    );
    Ok(())
}
