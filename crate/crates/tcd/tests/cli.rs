//! End-to-end exercises of the `tcd` binary: synthetic data generation,
//! train/infer/eval round trips, bitwise-identical resumes, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcd")).args(args).output().expect("binary must launch")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Fresh scratch directory under the system temp root.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tcd-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

const SMALL_CFG: &str = "titans_blocks = 4
embedding_dim = 8
patch_size = 8
chunk_size = 8
heads = 2
image_size = 32
decoder_channels = 4
memory_interval = 1
persistent_tokens = 1
steps = 8
lr = 0.01
seed = 3
";

#[test]
fn synth_is_deterministic_and_scores_perfectly_against_itself() {
    let root = scratch("synth");
    let (a, b) = (root.join("a"), root.join("b"));
    for dir in [&a, &b] {
        let out = tcd(&["synth", "--out", dir.to_str().unwrap(), "--count", "3", "--size", "32", "--seed", "5"]);
        assert!(out.status.success(), "synth failed: {out:?}");
    }
    let (fa, fb) = (read_sorted(&a), read_sorted(&b));
    assert_eq!(fa.len(), 9, "expected 3 triples");
    assert_eq!(fa, fb, "same seed must produce byte-identical datasets");
    // A directory evaluated against itself is a perfect prediction.
    let out = tcd(&["eval", "--pred", a.to_str().unwrap(), "--gt", a.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("# tcd-metrics-v1"), "missing header: {text}");
    let mean = text.lines().last().unwrap();
    assert_eq!(
        mean,
        "mean,1.000000000,1.000000000,1.000000000,1.000000000,1.000000000,1.000000000,0.000000000,0",
        "self-evaluation must be exactly perfect"
    );
    fs::remove_dir_all(&root).ok();
}

#[test]
fn train_infer_eval_round_trip() {
    let root = scratch("round");
    let data = root.join("data");
    tcd(&["synth", "--out", data.to_str().unwrap(), "--count", "2", "--size", "32", "--seed", "9"]);
    let cfg = root.join("small.cfg");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let run = root.join("run");
    let out = tcd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("model.tcdckpt");
    assert!(ckpt.exists(), "missing checkpoint");
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("# tcd-loss-v1\nstep,loss,bce,dice\n"), "bad loss header: {loss}");
    assert_eq!(loss.lines().count(), 2 + 8, "one row per training step");
    let preds = root.join("preds");
    let out = tcd(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "infer failed: {}", String::from_utf8_lossy(&out.stderr));
    for stem in ["synth0009", "synth0010"] {
        assert!(preds.join(format!("{stem}_pred.pgm")).exists(), "missing {stem} mask");
        let prob_path = preds.join(format!("{stem}_prob.tcdt"));
        let mut f = fs::File::open(&prob_path).unwrap();
        let probs = tcd::tensor::read_tensor::<f64>(&mut f).unwrap();
        assert_eq!(probs.shape(), &[32, 32]);
        assert!(probs.data().iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }
    let out = tcd(&["eval", "--pred", preds.to_str().unwrap(), "--gt", data.to_str().unwrap()]);
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().last().unwrap().starts_with("mean,"));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn resume_reproduces_the_straight_run_bitwise() {
    let root = scratch("resume");
    let data = root.join("data");
    tcd(&["synth", "--out", data.to_str().unwrap(), "--count", "2", "--size", "32", "--seed", "2"]);
    let cfg = root.join("small.cfg");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let (straight, split) = (root.join("straight"), root.join("split"));
    let dstr = data.to_str().unwrap();
    let train = |args: &[&str]| {
        let out = tcd(args);
        assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    };
    train(&["train", "--config", cfg.to_str().unwrap(), "--data", dstr, "--out", straight.to_str().unwrap()]);
    train(&["train", "--config", cfg.to_str().unwrap(), "--data", dstr, "--out", split.to_str().unwrap(), "--steps", "4"]);
    train(&[
        "train",
        "--resume",
        split.join("model.tcdckpt").to_str().unwrap(),
        "--data",
        dstr,
        "--out",
        split.to_str().unwrap(),
        "--steps",
        "8",
    ]);
    for file in ["model.tcdckpt", "loss.csv"] {
        let a = fs::read(straight.join(file)).unwrap();
        let b = fs::read(split.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between straight and resumed runs");
    }
    fs::remove_dir_all(&root).ok();
}

#[test]
fn exit_codes_follow_the_contract() {
    // Unknown subcommand: usage error.
    let out = tcd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    // Missing data directory: data error.
    let root = scratch("exit");
    let out = tcd(&["train", "--data", root.join("nope").to_str().unwrap(), "--out", root.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // --config and --resume are mutually exclusive.
    let out = tcd(&[
        "train",
        "--config",
        "x.cfg",
        "--resume",
        "y.tcdckpt",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    // The oracle suite is green.
    let out = tcd(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "gradcheck: {}", stdout(&out));
    assert!(stdout(&out).contains("43/43 checks passed"), "unexpected: {}", stdout(&out));
    fs::remove_dir_all(&root).ok();
}
