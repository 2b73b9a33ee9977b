//! The `tcd` command line: synthesize data, train, infer, evaluate, run
//! the gradient oracle suite, and ablate fusion variants.
//!
//! All commands run in f64 — the determinism and gradient guarantees are
//! stated at that precision. Exit codes: 0 success, 2 usage/config/data
//! errors, 3 numeric failures (including failed gradient checks).

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{fusion_name, parse_fusion, Config};
use crate::decoder::predict;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, BitMask, MetricReport};
use crate::pipeline::checkpoint;
use crate::pipeline::data::{list_stems, load_dir, load_dir_unlabeled, read_pgm_mask, save_pair, write_pgm_mask};
use crate::pipeline::model::Model;
use crate::pipeline::optim::Optimizer;
use crate::pipeline::suite::gradient_suite;
use crate::pipeline::synth::synth_pair;
use crate::pipeline::train::{train_steps, StepLoss};
use crate::pipeline::probs_to_mask;

#[derive(Parser)]
#[command(name = "tcd", version, about = "Bi-temporal change detection with a test-time neural memory encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic before/after pairs with ground-truth change masks.
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Square image size; must be a positive multiple of 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Inserted/deleted objects per pair.
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Seed of the first pair; pair i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a directory of `<id>_a.ppm` / `<id>_b.ppm` / `<id>_m.pgm` triples.
    Train {
        /// Config file; defaults apply when omitted.
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        /// Training data directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.tcdckpt and loss.csv.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint (its embedded config applies).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's total step budget (extends resumed runs).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict change maps for a directory of pairs (masks optional).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `<id>_a.ppm` / `<id>_b.ppm` pairs.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `<id>_pred.pgm` and `<id>_prob.tcdt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of predicted masks (`<id>_pred.pgm`, or `<id>_m.pgm`).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth masks (`<id>_m.pgm`).
        #[arg(long)]
        gt: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Boundary-match tolerance in pixels.
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        /// Half-width of the boundary band for the trimap score.
        #[arg(long, default_value_t = 3.0)]
        trimap_width: f64,
    },
    /// Run the finite-difference gradient oracle suite.
    Gradcheck,
    /// Train every fusion variant for a few steps and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Steps per variant.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let r = match cli.cmd {
        Cmd::Synth { out, count, size, objects, seed } => cmd_synth(&out, count, size, objects, seed),
        Cmd::Train { config, data, out, resume, steps } => {
            cmd_train(config.as_deref(), &data, &out, resume.as_deref(), steps)
        }
        Cmd::Infer { checkpoint, data, out } => cmd_infer(&checkpoint, &data, &out),
        Cmd::Eval { pred, gt, out, tau, trimap_width } => cmd_eval(&pred, &gt, out.as_deref(), tau, trimap_width),
        Cmd::Gradcheck => return run_gradcheck(),
        Cmd::Ablate { config, data, steps, out } => cmd_ablate(config.as_deref(), &data, steps, out.as_deref()),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tcd: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(out: &Path, count: usize, size: usize, objects: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    for i in 0..count {
        let pair = synth_pair::<f64>(seed + i as u64, size, objects)?;
        save_pair(out, &pair)?;
    }
    println!("wrote {count} pairs of size {size} to {}", out.display());
    Ok(())
}

/// Writes the loss trace, adding the header only when the file is new, so
/// resumed runs append to the same trace.
fn append_loss_csv(path: &Path, rows: &[StepLoss]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut w = BufWriter::new(file);
    if fresh {
        write!(w, "# tcd-loss-v1\nstep,loss,bce,dice\n")?;
    }
    for r in rows {
        write!(w, "{},{:.17e},{:.17e},{:.17e}\n", r.step, r.loss, r.bce, r.dice)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    let (mut cfg, mut model, mut optim, start) = match resume {
        Some(p) => {
            let ck = checkpoint::load::<f64>(p)?;
            let step = ck.step;
            let (cfg, model, optim) = checkpoint::restore(&ck)?;
            (cfg, model, optim, step)
        }
        None => {
            let cfg = load_config(config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Model::<f64>::init(&cfg, &mut rng)?;
            let optim = Optimizer::<f64>::new(&cfg);
            (cfg, model, optim, 0)
        }
    };
    if let Some(s) = steps {
        cfg.steps = s;
        cfg.validate()?;
    }
    let data = load_dir::<f64>(data_dir)?;
    if cfg.steps <= start {
        println!("checkpoint already at step {start} of {}; nothing to train", cfg.steps);
        return Ok(());
    }
    let todo = cfg.steps - start;
    println!(
        "training {todo} steps on {} pairs ({} parameters, fusion {})",
        data.len(),
        model.param_count(),
        fusion_name(cfg.fusion),
    );
    let t0 = Instant::now();
    let mut report = |r: &StepLoss| {
        if (r.step + 1) % 100 == 0 || r.step + 1 == cfg.steps {
            println!(
                "step {}/{} loss {:.6} bce {:.6} dice {:.6} [{:.1}s]",
                r.step + 1,
                cfg.steps,
                r.loss,
                r.bce,
                r.dice,
                t0.elapsed().as_secs_f64(),
            );
        }
    };
    let trace = train_steps(&mut model, &mut optim, &data, start, todo, Some(&mut report))?;
    append_loss_csv(&out.join("loss.csv"), &trace)?;
    let ckpt = out.join("model.tcdckpt");
    checkpoint::save(&ckpt, &cfg, start + todo, &mut model, &optim)?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let ck = checkpoint::load::<f64>(ckpt)?;
    let (_cfg, model, _optim) = checkpoint::restore(&ck)?;
    let pairs = load_dir_unlabeled::<f64>(data_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    for pair in &pairs {
        let logits = model.forward(&pair.t1, &pair.t2)?;
        let map = predict(&logits)?;
        let mask = BitMask::new(map.h, map.w, map.mask.clone())?;
        write_pgm_mask(&out.join(format!("{}_pred.pgm", pair.id)), &mask)?;
        let prob_path = out.join(format!("{}_prob.tcdt", pair.id));
        let file = File::create(&prob_path)
            .map_err(|e| Error::Io(format!("create {}: {e}", prob_path.display())))?;
        let mut w = BufWriter::new(file);
        crate::tensor::write_tensor(&mut w, &map.probs)?;
        w.flush()?;
        println!("{}: {}/{} pixels changed", pair.id, mask.count_ones(), map.h * map.w);
    }
    println!("wrote {} predictions to {}", pairs.len(), out.display());
    Ok(())
}

fn eval_workers(jobs: usize) -> usize {
    let cap = std::env::var("TCD_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(4);
    cap.min(jobs.max(1))
}

fn metric_row(id: &str, m: &MetricReport) -> String {
    format!(
        "{id},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}\n",
        m.precision, m.recall, m.f1, m.iou, m.bf1, m.trimap_miou, m.hausdorff, m.degenerate,
    )
}

fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>, tau: f64, trimap_width: f64) -> Result<()> {
    if !(tau > 0.0) || !(trimap_width > 0.0) {
        return Err(Error::Config("--tau and --trimap-width must be positive".into()));
    }
    let stems = list_stems(gt, "_m.pgm")?;
    if stems.is_empty() {
        return Err(Error::Io(format!("no *_m.pgm masks in {}", gt.display())));
    }
    // Each job resolves its prediction as <id>_pred.pgm, falling back to
    // <id>_m.pgm so a mask directory can be scored against another directly.
    let jobs: Vec<(String, PathBuf, PathBuf)> = stems
        .iter()
        .map(|s| {
            let p_pred = pred.join(format!("{s}_pred.pgm"));
            let p = if p_pred.exists() { p_pred } else { pred.join(format!("{s}_m.pgm")) };
            (s.clone(), p, gt.join(format!("{s}_m.pgm")))
        })
        .collect();
    let workers = eval_workers(jobs.len());
    let mut results: Vec<Option<Result<MetricReport>>> = (0..jobs.len()).map(|_| None).collect();
    let chunks: Vec<&mut [Option<Result<MetricReport>>]> =
        chunked_mut(&mut results, (jobs.len() + workers - 1) / workers);
    std::thread::scope(|scope| {
        let mut offset = 0;
        for chunk in chunks {
            let lo = offset;
            offset += chunk.len();
            let jobs = &jobs;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let (_, p, g) = &jobs[lo + k];
                    *slot = Some(score_one(p, g, tau, trimap_width));
                }
            });
        }
    });
    let mut csv = String::from("# tcd-metrics-v1\nid,precision,recall,f1,iou,bf1,trimap_miou,hausdorff,degenerate\n");
    let mut sums = [0.0f64; 7];
    let mut degen = 0usize;
    for (i, slot) in results.into_iter().enumerate() {
        let m = slot.expect("all jobs assigned")?;
        for (s, v) in sums.iter_mut().zip([
            m.precision,
            m.recall,
            m.f1,
            m.iou,
            m.bf1,
            m.trimap_miou,
            m.hausdorff,
        ]) {
            *s += v;
        }
        degen += m.degenerate as usize;
        csv.push_str(&metric_row(&jobs[i].0, &m));
    }
    let n = jobs.len() as f64;
    csv.push_str(&format!(
        "mean,{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{degen}\n",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n,
        sums[5] / n,
        sums[6] / n,
    ));
    match out {
        Some(p) => {
            fs::write(p, csv).map_err(|e| Error::Io(format!("write {}: {e}", p.display())))?;
            println!("scored {} pairs -> {}", jobs.len(), p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Splits `data` into runs of at most `size`; plain slices keep the merge
/// order identical to the job order regardless of worker count.
fn chunked_mut<T>(data: &mut [T], size: usize) -> Vec<&mut [T]> {
    let mut out = Vec::new();
    let mut rest = data;
    while !rest.is_empty() {
        let take = size.min(rest.len());
        let (head, tail) = rest.split_at_mut(take);
        out.push(head);
        rest = tail;
    }
    out
}

fn score_one(pred: &Path, gt: &Path, tau: f64, trimap_width: f64) -> Result<MetricReport> {
    let p = read_pgm_mask(pred)?;
    let g = read_pgm_mask(gt)?;
    evaluate(&p, &g, tau, trimap_width)
}

fn run_gradcheck() -> i32 {
    let t0 = Instant::now();
    let results = match gradient_suite() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("tcd: gradient suite aborted: {e}");
            return 3;
        }
    };
    let mut failed = 0;
    for r in &results {
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.pass());
        println!("{verdict} {:<26} rel_err {:>10.3e}  (tol {:.0e})", r.name, r.err, r.tol);
    }
    println!(
        "{}/{} checks passed in {:.1}s",
        results.len() - failed,
        results.len(),
        t0.elapsed().as_secs_f64(),
    );
    if failed == 0 {
        0
    } else {
        3
    }
}

const ABLATE_VARIANTS: [&str; 5] = ["ts_sum", "ts_conv", "siam_diff", "siam_conc", "early_fusion"];

fn cmd_ablate(config: Option<&Path>, data_dir: &Path, steps: usize, out: Option<&Path>) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("--steps must be positive".into()));
    }
    let base = load_config(config)?;
    let data = load_dir::<f64>(data_dir)?;
    let mut csv = String::from("# tcd-ablate-v1\nvariant,steps,loss,bce,dice,train_f1\n");
    for name in ABLATE_VARIANTS {
        let mut cfg = base.clone();
        cfg.fusion = parse_fusion(name)?;
        cfg.steps = steps;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model::<f64>::init(&cfg, &mut rng)?;
        let mut optim = Optimizer::<f64>::new(&cfg);
        let trace = train_steps(&mut model, &mut optim, &data, 0, steps, None)?;
        let last = trace.last().expect("steps > 0");
        let f1 = train_set_f1(&model, &data)?;
        println!("{name}: loss {:.6} train_f1 {:.4} after {steps} steps", last.loss, f1);
        csv.push_str(&format!(
            "{name},{steps},{:.9},{:.9},{:.9},{:.9}\n",
            last.loss, last.bce, last.dice, f1,
        ));
    }
    match out {
        Some(p) => {
            fs::write(p, csv).map_err(|e| Error::Io(format!("write {}: {e}", p.display())))?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Mean per-pair F1 of thresholded predictions against the training masks.
pub fn train_set_f1(model: &Model<f64>, data: &[crate::pipeline::SamplePair<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    for pair in data {
        let logits = model.forward(&pair.t1, &pair.t2)?;
        let map = predict(&logits)?;
        let pred = probs_to_mask(&map.probs);
        let m = crate::metrics::pixel_metrics(&crate::metrics::confusion(&pred, &pair.mask)?);
        sum += m.f1;
    }
    Ok(sum / data.len() as f64)
}
