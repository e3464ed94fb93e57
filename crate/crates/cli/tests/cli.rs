use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sslsv::config::TrainConfig;
use sslsv::nn::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sslsv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslsv"))
        .args(args)
        .env_remove("SSLSV_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect()
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walkdir(&p));
        } else {
            out.push(p);
        }
    }
    out
}

const TINY: &[&str] = &[
    "--speakers",
    "3",
    "--utts-per-speaker",
    "4",
    "--test-speakers",
    "3",
    "--test-utts-per-speaker",
    "2",
    "--trials",
    "6",
];

fn tiny_corpus(dir: &Path, seed: &str) -> Output {
    let mut args = vec!["synth-data", "--out", dir.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(TINY);
    sslsv(&args)
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("train", &["--config", "--data", "--out", "--seed", "--epochs", "--resume", "--workers"]),
        ("evaluate", &["--checkpoint", "--trials", "--config", "--n-crops", "--scores"]),
        ("extract", &["--checkpoint", "--wav", "--config", "--n-crops"]),
        ("probe", &["--checkpoint", "--data", "--label-fraction", "--trials", "--epochs", "--lr", "--batch-size", "--seed", "--augment"]),
        ("finetune", &["--checkpoint", "--data", "--label-fraction", "--trials", "--epochs", "--lr", "--batch-size", "--seed", "--augment"]),
        ("gradcheck", &["--seed"]),
        ("augment-preview", &["--in", "--out", "--seed", "--noise-dir", "--rir-dir", "--p-noise", "--p-reverb"]),
        ("synth-data", &["--speakers", "--utts-per-speaker", "--test-speakers", "--test-utts-per-speaker", "--reuse-train-voices", "--trials", "--out", "--seed"]),
    ];
    for (cmd, flags) in expected {
        let o = sslsv(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help failed");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help does not mention {f}:\n{text}");
        }
    }
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(sslsv(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(sslsv(&["evaluate", "--trials", "x"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = sslsv(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("vicreg") && text.contains("0 failed"), "{text}");
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(tiny_corpus(a.path(), "7").status.success());
    assert!(tiny_corpus(b.path(), "7").status.success());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.contains_key(Path::new("manifest.tsv")) && ta.contains_key(Path::new("trials.txt")));
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    assert!(tiny_corpus(c.path(), "8").status.success());
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn seed_falls_back_to_environment_and_flag_wins() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let d = tempfile::tempdir().unwrap();
        let mut args = vec!["synth-data", "--out", d.path().to_str().unwrap()];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        args.extend_from_slice(TINY);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sslsv"));
        cmd.args(&args).env_remove("SSLSV_SEED");
        if let Some(e) = env {
            cmd.env("SSLSV_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        tree(d.path())
    };
    let five = run(None, Some("5"));
    assert_eq!(run(Some("5"), None), five);
    assert_eq!(run(Some("9"), Some("5")), five);
    assert_ne!(run(Some("9"), None), five);
}

#[test]
fn augment_preview_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    assert!(tiny_corpus(d.path(), "1").status.success());
    let input = d.path().join("train/spk000/spk000_u00.wav");
    let noise = d.path().join("noise");
    let rir = d.path().join("rir");
    let out = |name: &str, seed: &str| {
        let path = d.path().join(name);
        let o = sslsv(&[
            "augment-preview",
            "--in",
            input.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
            "--seed",
            seed,
            "--noise-dir",
            noise.to_str().unwrap(),
            "--rir-dir",
            rir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("reverb rir"));
        std::fs::read(path).unwrap()
    };
    let a = out("a.wav", "3");
    assert_eq!(a, out("b.wav", "3"));
    assert_ne!(a, out("c.wav", "4"));
    assert_ne!(a, std::fs::read(&input).unwrap());

    let o = sslsv(&["augment-preview", "--in", input.to_str().unwrap(), "--out", "x.wav"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_evaluate_extract_probe_finetune() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(tiny_corpus(&data, "2").status.success());
    let cfg = d.path().join("config.toml");
    std::fs::write(
        &cfg,
        "train.batch_size = 4\ntrain.max_epochs = 2\nmodel.encoder_hidden = [16]\nmodel.rep_dim = 8\nmodel.proj_dim = 8\neval.n_crops = 2\n",
    )
    .unwrap();
    let out = d.path().join("run");
    let (data_s, out_s, cfg_s) = (data.to_str().unwrap(), out.to_str().unwrap(), cfg.to_str().unwrap());

    let o = sslsv(&["train", "--config", cfg_s, "--data", data_s, "--out", out_s, "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs 1"));
    let o = sslsv(&["train", "--config", cfg_s, "--data", data_s, "--out", out_s, "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs 1"), "resume runs only the remaining epoch: {}", stdout(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    for f in ["config.toml", "last.ckpt", "best.model"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let ckpt = out.join("last.ckpt");
    let trials = data.join("trials.txt");
    let scores = d.path().join("scores.tsv");
    let o = sslsv(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--trials",
        trials.to_str().unwrap(),
        "--scores",
        scores.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("EER") && stdout(&o).contains("minDCF"));
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), 6);

    // A bare model file needs the feature settings from a config.
    let best = out.join("best.model");
    let o = sslsv(&["evaluate", "--checkpoint", best.to_str().unwrap(), "--trials", trials.to_str().unwrap(), "--config", cfg_s]);
    assert!(o.status.success(), "{}", stderr(&o));

    let wav = data.join("train/spk000/spk000_u00.wav");
    let o = sslsv(&["extract", "--checkpoint", ckpt.to_str().unwrap(), "--wav", wav.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let values: Vec<f64> = stdout(&o).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 8);
    assert!(values.iter().all(|v| v.is_finite()));

    for (cmd, extra) in [("probe", None), ("finetune", None), ("finetune", Some("--augment"))] {
        let mut args = vec![cmd, "--checkpoint", ckpt.to_str().unwrap(), "--data", data_s, "--label-fraction", "0.5", "--epochs", "3"];
        args.extend(extra);
        let o = sslsv(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(stdout(&o).contains("labelled 6/12"), "{cmd}: {}", stdout(&o));
    }
}

#[test]
fn evaluate_rejects_mismatched_architecture() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(tiny_corpus(&data, "3").status.success());
    let mc = ModelConfig {
        encoder_hidden: vec![16],
        rep_dim: 8,
        proj_dim: 8,
        ..ModelConfig::default()
    };
    let model: Model<f64> = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = d.path().join("m.model");
    std::fs::write(&path, model.to_bytes()).unwrap();
    let cfg_path = d.path().join("c.toml");
    let mut cfg = TrainConfig::default();
    cfg.model.encoder_hidden = vec![16];
    cfg.model.rep_dim = 12;
    cfg.model.proj_dim = 8;
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let o = sslsv(&[
        "evaluate",
        "--checkpoint",
        path.to_str().unwrap(),
        "--trials",
        data.join("trials.txt").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("rep_dim") || err.contains("shape"), "{err}");
}

#[test]
fn missing_input_is_a_one_line_error() {
    let o = sslsv(&["extract", "--checkpoint", "/no/such/file", "--wav", "/no/such.wav"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}
