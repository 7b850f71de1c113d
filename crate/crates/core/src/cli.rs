//! Command-line front end: `datagen`, `gradcheck`, `train`, `eval`, `analyze`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{git_describe, write_atomic, Checkpoint, RunManifest};
use crate::config::{parse_value, TrainConfig};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::gradsuite::run_suite;
use crate::harness::{
    analyze_compactness, evaluate, for_each_prediction, metrics_csv, report_csv, train_with_progress,
};
use crate::infn::Variant;
use crate::numerics::{OpKind, Tensor};
use crate::synth::{generate, overlap_histogram, read_split, write_split, SynthSample};

/// Directory searched for config files given by bare name, and for
/// `default.toml` when no config is given.
pub const CONFIG_DIR_ENV: &str = "DINF_CONFIG_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dinf", version, about = "Denoising RoI-feature filters on a synthetic occlusion benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train and eval splits.
    Datagen(DatagenArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// PCA of instance features and per-class compactness.
    Analyze(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Config file (flat dotted keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set synth.noise_sigma=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Filter preset: `desk` or `full`.
    #[arg(default_value = "desk")]
    pub preset: String,
    /// Filter iterations in the composite check.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Corrupt the backward pass of one primitive (negative control).
    #[arg(long, value_name = "OP")]
    pub fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory with `train.bin`/`eval.bin`; generated from the config if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Plain prediction head without filter iterations.
    #[arg(long)]
    pub no_dinf: bool,
    /// Use ReLU between the dynamic kernels instead of soft thresholding.
    #[arg(long)]
    pub relu_interaction: bool,
    /// Disable the IoU focal factor.
    #[arg(long)]
    pub no_iff: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_eval: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with `eval.bin`; generated from the checkpoint config if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub k_eval: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn resolve_config_path(p: Option<&Path>) -> Option<PathBuf> {
    let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    match p {
        Some(p) if p.exists() => Some(p.to_path_buf()),
        Some(p) => Some(dir.map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())),
        None => dir.map(|d| d.join("default.toml")).filter(|f| f.exists()),
    }
}

/// Defaults, then the config file, then `--set` overrides.
pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = resolve_config_path(args.config.as_deref()) {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        cfg.apply_text(&text)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {o}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), &parse_value(v.trim()))?;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut TrainConfig, a: &TrainArgs) -> Result<()> {
    if a.no_dinf && a.relu_interaction {
        return Err(Error::Config("--no-dinf conflicts with --relu-interaction".into()));
    }
    if a.no_dinf && (a.k.is_some_and(|k| k > 0) || a.k_eval.is_some_and(|k| k > 0)) {
        return Err(Error::Config("--no-dinf conflicts with --k/--k-eval above 0".into()));
    }
    if a.no_iff && a.gamma.is_some() {
        return Err(Error::Config("--no-iff conflicts with --gamma".into()));
    }
    if a.no_dinf {
        cfg.variant = Variant::Plain;
        cfg.k = 0;
        cfg.k_eval = 0;
    }
    if a.relu_interaction {
        cfg.variant = Variant::ReluInteraction;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(k) = a.k_eval {
        cfg.k_eval = k;
    }
    if a.no_iff {
        cfg.iff.gamma = None;
    }
    if let Some(g) = a.gamma {
        cfg.iff.gamma = Some(g);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_manifest(out: &Path, command: &str, cfg: &TrainConfig, start: Instant) -> Result<()> {
    RunManifest {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        seed: cfg.seed,
        git_describe: git_describe(),
        duration_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    }
    .save(&out.join("manifest.toml"))
}

fn histogram_text(name: &str, samples: &[SynthSample]) -> String {
    let [light, heavy] = overlap_histogram(samples);
    let n = samples.len().max(1) as f64;
    format!(
        "{name}: {} samples, overlap [0,0.5): {light} ({:.1}%), [0.5,1]: {heavy} ({:.1}%)\n",
        samples.len(),
        100.0 * light as f64 / n,
        100.0 * heavy as f64 / n
    )
}

fn check_grid(samples: &[SynthSample], filter: &FilterConfig) -> Result<()> {
    if let Some(s) = samples.first() {
        if s.feature.shape() != filter.roi_shape() {
            return Err(Error::Config(format!(
                "data features {:?} do not match the model's {:?}",
                s.feature.shape(),
                filter.roi_shape()
            )));
        }
    }
    Ok(())
}

fn load_split(dir: &Path, name: &str, cfg: &TrainConfig) -> Result<Vec<SynthSample>> {
    let path = dir.join(format!("{name}.bin"));
    let split = read_split(&path)?;
    check_grid(&split.samples, &cfg.filter)?;
    Ok(split.samples)
}

fn datagen(a: &DatagenArgs, out: &mut String) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&a.config)?;
    cfg.resolve()?;
    create_dir(&a.out)?;
    let data = generate(&cfg.synth)?;
    let echo = cfg.to_text();
    write_split(&a.out.join("train.bin"), &echo, &cfg.synth, &data.train)?;
    write_split(&a.out.join("eval.bin"), &echo, &cfg.synth, &data.eval)?;
    out.push_str(&histogram_text("train", &data.train));
    out.push_str(&histogram_text("eval", &data.eval));
    if data.regenerations > 0 {
        let _ = writeln!(out, "regenerated {} samples after infeasible occluder placement", data.regenerations);
    }
    write_manifest(&a.out, "datagen", &cfg, start)
}

fn gradcheck(a: &GradcheckArgs, out: &mut String) -> Result<bool> {
    let filter = FilterConfig::preset(&a.preset)?;
    let fault = match &a.fault {
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown primitive `{name}`")))?,
        ),
        None => None,
    };
    let report = run_suite(filter, a.k, fault)?;
    for e in &report.entries {
        let r = &e.report;
        let _ = writeln!(
            out,
            "{:<20} {}  max_err {:.3e}  tol {:.0e}  checked {}  excluded {}",
            e.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_error,
            r.tol,
            r.checked,
            r.excluded
        );
    }
    if let Some(w) = report.worst() {
        let detail = w
            .report
            .worst
            .as_ref()
            .map(|e| format!(" at {}[{}]: analytic {:.6e}, numeric {:.6e}", e.param, e.index, e.analytic, e.numeric))
            .unwrap_or_default();
        let _ = writeln!(out, "worst offender: {}{detail}", w.name);
    }
    Ok(report.passed())
}

fn train(a: &TrainArgs, out: &mut String) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&a.config)?;
    apply_train_flags(&mut cfg, a)?;
    cfg.resolve()?;
    let (train_set, eval_set) = match &a.data {
        Some(dir) => (load_split(dir, "train", &cfg)?, load_split(dir, "eval", &cfg)?),
        None => {
            let d = generate(&cfg.synth)?;
            (d.train, d.eval)
        }
    };
    create_dir(&a.out)?;
    let quiet = a.quiet;
    let outcome = train_with_progress(&cfg, &train_set, &eval_set, |rec| {
        if !quiet {
            let last = rec.eval.as_ref().and_then(|e| e.iterations.last());
            match last {
                Some(m) => eprintln!(
                    "epoch {:>3}  loss {:.4}  i={} acc {:.3} miou {:.3}",
                    rec.epoch, rec.train_loss, m.i, m.acc, m.miou
                ),
                None => eprintln!("epoch {:>3}  loss {:.4}", rec.epoch, rec.train_loss),
            }
        }
    })?;
    Checkpoint::new(cfg.clone(), &outcome.params)?.save(&a.out.join("checkpoint.bin"))?;
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&outcome.history, cfg.k_eval))?;
    if let Some(report) = outcome.history.last().and_then(|r| r.eval.as_ref()) {
        write_text(&a.out.join("eval.csv"), &report_csv(report))?;
        out.push_str(&report_csv(report));
    }
    write_manifest(&a.out, "train", &cfg, start)
}

fn eval_inputs(a: &EvalArgs) -> Result<(Checkpoint, TrainConfig, Vec<SynthSample>)> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(k) = a.k_eval {
        cfg.k_eval = k;
    }
    cfg.resolve()?;
    let samples = match &a.data {
        Some(dir) => load_split(dir, "eval", &cfg)?,
        None => generate(&cfg.synth)?.eval,
    };
    Ok((ck, cfg, samples))
}

fn eval(a: &EvalArgs, out: &mut String) -> Result<()> {
    let start = Instant::now();
    let (ck, cfg, samples) = eval_inputs(a)?;
    let report = evaluate(&ck.params, &cfg.model(), &cfg.iff, &samples, cfg.k_eval)?;
    create_dir(&a.out)?;
    let csv = report_csv(&report);
    write_text(&a.out.join("eval.csv"), &csv)?;
    out.push_str(&csv);
    write_manifest(&a.out, "eval", &cfg, start)
}

fn analyze(a: &EvalArgs, out: &mut String) -> Result<()> {
    let start = Instant::now();
    let (ck, cfg, samples) = eval_inputs(a)?;
    crate::harness::check_compatible(&ck.params, &cfg.model())?;
    let iters = cfg.k_eval + 1;
    let mut feats: Vec<Vec<Tensor>> = vec![Vec::with_capacity(samples.len()); iters];
    for_each_prediction(&ck.params, &cfg.model(), &samples, cfg.k_eval, |_, set| {
        for (i, it) in set.iterations.iter().enumerate() {
            feats[i].push(it.instance.clone());
        }
        Ok(())
    })?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut proj = String::from("i,class,pc1,pc2\n");
    let mut comp = String::from("i,class,compactness,explained1,explained2,total_variance\n");
    for (i, f) in feats.iter().enumerate() {
        let c = analyze_compactness(f, &labels)?;
        for (p, l) in c.projections.iter().zip(&labels) {
            let _ = writeln!(proj, "{i},{l},{},{}", p[0], p[1]);
        }
        let [e1, e2] = c.pca.explained;
        let tv = c.pca.total_variance;
        for (l, v) in &c.per_class {
            let _ = writeln!(comp, "{i},{l},{v},{e1},{e2},{tv}");
        }
        let _ = writeln!(comp, "{i},all,{},{e1},{e2},{tv}", c.total);
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("projections.csv"), &proj)?;
    write_text(&a.out.join("compactness.csv"), &comp)?;
    out.push_str(&comp);
    write_manifest(&a.out, "analyze", &cfg, start)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command; returns the exit code, the text for stdout and
/// the error message, if any.
pub fn run(cli: &Cli) -> (i32, String, Option<String>) {
    let mut out = String::new();
    let result = match &cli.command {
        Command::Datagen(a) => datagen(a, &mut out).map(|_| EXIT_OK),
        Command::Gradcheck(a) => {
            gradcheck(a, &mut out).map(|ok| if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Train(a) => train(a, &mut out).map(|_| EXIT_OK),
        Command::Eval(a) => eval(a, &mut out).map(|_| EXIT_OK),
        Command::Analyze(a) => analyze(a, &mut out).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => (code, out, None),
        Err(e) => (exit_code(&e), out, Some(format!("error: {e}"))),
    }
}
