//! Acceptance criteria 1–9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dinf::config::TrainConfig;
use dinf::filter::{compute_thresholds, dinf_apply, soft_threshold, Activation, FilterConfig, StmParams};
use dinf::gradsuite::run_suite;
use dinf::harness::{evaluate, for_each_prediction, pca2, train, EvalReport};
use dinf::infn::{count_parameters, infn_forward, init_params, InfnConfig, Variant};
use dinf::losses::{iff_loss, iff_weight, iou, smooth_l1, BBox, IffConfig};
use dinf::numerics::{Tape, Tensor};
use dinf::synth::{generate, Dataset, SynthConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

type Check = Result<String, String>;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_secs as f64,
        format!("took {:.1} s, limit {limit_secs} s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 1

fn formula_exactness() -> Check {
    let start = Instant::now();
    let tol = 1e-12;
    let roi = |x: f64| Tensor::new(vec![1, 1, 1], vec![x]).unwrap();
    let soft = |x: f64, t: f64| soft_threshold(&roi(x), &Tensor::vector(vec![t])).unwrap().data()[0];
    let sig = |z: f64| {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![z]));
        let s = tape.sigmoid(v);
        tape.value(s).data()[0]
    };
    let g = |gamma: f64| IffConfig {
        gamma: Some(gamma),
        ..IffConfig::default()
    };
    let ln2 = 2f64.ln();
    let bx = |a: f64, b: f64, c: f64, d: f64| BBox::new(a, b, c, d).unwrap();
    let x = Tensor::new(vec![1, 1, 4], vec![-3.5, -0.25, 0.0, 7.0]).unwrap();
    let checks: Vec<(&str, f64, f64)> = vec![
        ("soft(2,0.5)", soft(2.0, 0.5), 1.5),
        ("soft(0.3,0.5)", soft(0.3, 0.5), 0.0),
        ("soft(-0.3,0.5)", soft(-0.3, 0.5), 0.0),
        ("soft(-2,0.5)", soft(-2.0, 0.5), -1.5),
        (
            "soft(x,0)=x",
            soft_threshold(&x, &Tensor::vector(vec![0.0])).unwrap().max_abs_diff(&x),
            0.0,
        ),
        ("sigmoid(0)", sig(0.0), 0.5),
        ("sigmoid(1)", sig(1.0), 0.7310585786300049),
        ("smooth_l1(0.5)", smooth_l1(0.5), 0.125),
        ("smooth_l1(1)", smooth_l1(1.0), 0.5),
        ("smooth_l1(2)", smooth_l1(2.0), 1.5),
        ("iff(1,γ=0.1)", iff_weight(1.0, &g(0.1)), 0.0),
        ("iff(0.5,γ=0)", iff_weight(0.5, &g(0.0)), ln2),
        ("iff(0.5,γ=2)", iff_weight(0.5, &g(2.0)), 0.25 * ln2),
        ("iff(0,γ=2)", iff_weight(0.0, &g(2.0)), -(0.99f64).powi(2) * 0.01f64.ln()),
        ("iou(identical)", iou(&bx(0.1, 0.1, 0.4, 0.6), &bx(0.1, 0.1, 0.4, 0.6)), 1.0),
        ("iou(disjoint)", iou(&bx(0.0, 0.0, 0.2, 0.2), &bx(0.5, 0.5, 0.9, 0.9)), 0.0),
        ("iou(1/7)", iou(&bx(0.0, 0.0, 0.5, 0.5), &bx(0.25, 0.25, 0.75, 0.75)), 1.0 / 7.0),
        (
            "iff_loss(pred=gt)",
            iff_loss(&bx(0.1, 0.2, 0.3, 0.4), &bx(0.1, 0.2, 0.3, 0.4), &g(0.1)),
            0.0,
        ),
    ];
    let s40 = sig(40.0);
    ensure(s40 > 1.0 - 1e-15 && s40 <= 1.0, format!("sigmoid(40) = {s40}"))?;
    let mut worst = 0.0f64;
    for (name, got, want) in &checks {
        let err = (got - want).abs();
        ensure(err < tol, format!("{name}: {got} vs {want}"))?;
        worst = worst.max(err);
    }
    within(start.elapsed(), 1)?;
    Ok(format!("{} values, max abs error {worst:.1e}", checks.len() + 1))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Check {
    let start = Instant::now();
    let report = run_suite(FilterConfig::desk(), 3, None).map_err(|e| e.to_string())?;
    if let Some(w) = report.worst() {
        return Err(format!("{} failed: max error {:.3e}", w.name, w.report.max_error));
    }
    let composite = report.entries.last().unwrap();
    let prim_max = report.entries[..report.entries.len() - 1]
        .iter()
        .map(|e| e.report.max_error)
        .fold(0.0, f64::max);
    let negative = run_suite(FilterConfig::desk(), 3, Some(dinf::numerics::OpKind::SoftThreshold))
        .map_err(|e| e.to_string())?;
    ensure(!negative.passed(), "corrupted soft-threshold backward went unnoticed")?;
    within(start.elapsed(), 120)?;
    Ok(format!(
        "{} primitives max err {prim_max:.1e} (tol 1e-6); composite K=3 max err {:.1e} (tol 1e-4) over {} entries, {} kink-excluded; fault control caught",
        report.entries.len() - 1,
        composite.report.max_error,
        composite.report.checked,
        composite.report.excluded
    ))
}

// ---------------------------------------------------------------- 3

fn structural_laws() -> Check {
    let start = Instant::now();
    let filter = FilterConfig::desk();
    let cfg = InfnConfig {
        k: 6,
        k_eval: 6,
        filter,
        num_classes: 4,
        variant: Variant::Dinf,
    };
    let mut params = init_params(&cfg, 1).map_err(|e| e.to_string())?;
    let shape = params.value("dinf.gen.weight").unwrap().shape().to_vec();
    let bound = 1.5 / (filter.instance_dim as f64).sqrt();
    params
        .set_value("dinf.gen.weight", Tensor::uniform(&shape, bound, &mut common::rng(2)))
        .unwrap();
    let f0 = common::normal(&filter.roi_shape(), &mut common::rng(3));
    for k in 0..=6 {
        let n = infn_forward(&f0, &params, &cfg, k).map_err(|e| e.to_string())?.len();
        ensure(n == k + 1, format!("K={k} gave {n} predictions"))?;
    }
    let count = |k: usize| count_parameters(&init_params(&InfnConfig { k, k_eval: k, ..cfg }, 0).unwrap());
    ensure(count(1) == count(6), format!("parameter count K=1 {} vs K=6 {}", count(1), count(6)))?;

    let set = infn_forward(&f0, &params, &cfg, 3).map_err(|e| e.to_string())?;
    let it = &set.iterations;
    let sum: Vec<f64> = (0..f0.len())
        .map(|j| f0.data()[j] + it[1].feature.data()[j] + it[2].feature.data()[j])
        .collect();
    let err = common::max_abs_diff(it[3].filter_input.as_ref().unwrap().data(), &sum);
    ensure(err < 1e-12, format!("dense sum off by {err:.1e}"))?;

    let mut tc = TrainConfig::default();
    tc.k = 4;
    tc.k_eval = 4;
    tc.epochs = 1;
    tc.synth = SynthConfig {
        n_train: 256,
        n_eval: 64,
        ..SynthConfig::default()
    };
    tc.resolve().map_err(|e| e.to_string())?;
    let data = generate(&tc.synth).map_err(|e| e.to_string())?;
    let out = train(&tc, &data.train, &data.eval).map_err(|e| e.to_string())?;
    for k_eval in 0..=4 {
        let r = evaluate(&out.params, &tc.model(), &tc.iff, &data.eval, k_eval).map_err(|e| e.to_string())?;
        ensure(r.iterations.len() == k_eval + 1, format!("K_eval={k_eval}"))?;
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "K+1 predictions for K=0..6; {} parameters at K=1 and K=6; dense-sum error {err:.1e}; K=4 model evaluated at K_eval=0..4",
        count(1)
    ))
}

// ---------------------------------------------------------------- 4

fn filter_properties() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(40);
    let n = 1000;
    let soft = |x: &[f64], t: f64| -> Vec<f64> {
        let x = Tensor::new(vec![1, 1, x.len()], x.to_vec()).unwrap();
        soft_threshold(&x, &Tensor::vector(vec![t])).unwrap().into_data()
    };
    for _ in 0..n {
        let t = rng.gen_range(0.0..5.0);
        let x = common::uniform_vec(16, -20.0, 20.0, &mut rng);
        let y = common::uniform_vec(16, -20.0, 20.0, &mut rng);
        let (sx, sy) = (soft(&x, t), soft(&y, t));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let sn = soft(&neg, t);
        for j in 0..16 {
            ensure((sx[j] - sy[j]).abs() <= (x[j] - y[j]).abs() + 1e-12, "shrinkage expands a distance")?;
            ensure(sn[j] == -sx[j], "shrinkage is not odd")?;
            ensure(sx[j].abs() <= x[j].abs(), "shrinkage grows a magnitude")?;
        }
    }
    for _ in 0..n {
        let c = rng.gen_range(1..9);
        let cells = rng.gen_range(1..17);
        let x = common::normal(&[c, 1, cells], &mut rng).scale(rng.gen_range(0.1..10.0));
        let p = StmParams {
            fc1_weight: common::normal(&[c, c], &mut rng).scale(3.0),
            fc1_bias: common::normal(&[c], &mut rng),
            fc2_weight: common::normal(&[c, c], &mut rng).scale(3.0),
            fc2_bias: common::normal(&[c], &mut rng).scale(3.0),
        };
        let tau = compute_thresholds(&x, &p).map_err(|e| e.to_string())?;
        for ch in 0..c {
            let m = x.data()[ch * cells..(ch + 1) * cells].iter().map(|v| v.abs()).sum::<f64>() / cells as f64;
            let t = tau.data()[ch];
            ensure(t >= 0.0 && t <= m * (1.0 + 1e-15), format!("tau {t} outside [0, {m}]"))?;
        }
    }
    let cfg = common::tiny_filter();
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let mut r = common::rng(1000 + trial);
        let p = common::random_dinf(&cfg, Activation::SoftThreshold, &mut r);
        let f = common::normal(&cfg.roi_shape(), &mut r);
        let v = common::normal(&[cfg.instance_dim], &mut r);
        let out = dinf_apply(&f, &v, &p, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(common::max_abs_diff(out.data(), &common::reference_dinf(f.data(), v.data(), &p, &cfg)));
    }
    ensure(worst < 1e-12, format!("filter differs from loop reference by {worst:.1e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!(
        "{n} instances each: non-expansive, odd, |y|<=|x|, 0<=tau<=gap(|x|); filter vs loop reference {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 5

fn iff_properties() -> Check {
    let start = Instant::now();
    let gammas = [0.0, 0.1, 0.5, 1.0, 2.0];
    let floor = IffConfig::default().iou_floor;
    let grid: Vec<f64> = (0..1000).map(|i| floor + (1.0 - floor) * i as f64 / 999.0).collect();
    let cfg = |g: f64| IffConfig {
        gamma: Some(g),
        ..IffConfig::default()
    };
    for g in gammas {
        let mu: Vec<f64> = grid.iter().map(|&u| iff_weight(u, &cfg(g))).collect();
        ensure(mu.windows(2).all(|w| w[1] < w[0]), format!("not strictly decreasing at γ={g}"))?;
        ensure(iff_weight(1.0, &cfg(g)) == 0.0, format!("μ(1) != 0 at γ={g}"))?;
    }
    for &u in &grid {
        let mu: Vec<f64> = gammas.iter().map(|&g| iff_weight(u, &cfg(g))).collect();
        ensure(mu.windows(2).all(|w| w[1] <= w[0]), format!("μ grows with γ at IoU {u}"))?;
    }

    // Gradient of the weighted regression term equals μ times the finite
    // difference gradient of plain SmoothL1.
    let gt = BBox::new(0.2, 0.1, 0.7, 0.8).unwrap();
    let mut worst = 0.0f64;
    for g in gammas {
        for p in [[0.25, 0.05, 0.6, 0.9], [0.1, 0.3, 0.5, 0.95], [0.3, 0.2, 0.9, 0.6]] {
            let c = cfg(g);
            let mu = iff_weight(iou(&BBox::from_slice(&p).unwrap(), &gt), &c);
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::zeros(&[1, 2]));
            let boxes = tape.param(Tensor::new(vec![1, 4], p.to_vec()).unwrap());
            let gtt = Tensor::new(vec![1, 4], gt.to_array().to_vec()).unwrap();
            let loss = dinf::losses::batch_loss(&mut tape, &[(logits, boxes)], &[0], &gtt, &c).map_err(|e| e.to_string())?;
            let grads = tape.backward(loss).map_err(|e| e.to_string())?;
            let analytic = grads.get(boxes).unwrap().data().to_vec();
            for j in 0..4 {
                let h = 1e-6;
                let reg = |d: f64| {
                    let mut q = p;
                    q[j] += d;
                    dinf::losses::reg_loss(&BBox::from_slice(&q).unwrap(), &gt)
                };
                let fd = (reg(h) - reg(-h)) / (2.0 * h);
                worst = worst.max((analytic[j] - mu * fd).abs());
            }
        }
    }
    ensure(worst < 1e-8, format!("detachment identity off by {worst:.1e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!(
        "strictly decreasing on 1000-point grid for γ in {gammas:?}; μ(1)=0; non-increasing in γ; detachment identity error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 6, 7

struct Run {
    first_loss: f64,
    last_loss: f64,
    report: EvalReport,
    elapsed: Duration,
}

impl Run {
    fn halved(&self) -> bool {
        self.last_loss < 0.5 * self.first_loss
    }
}

fn desk_run(data: &Dataset, variant: Variant, iff: IffConfig, seed: u64) -> Result<Run, String> {
    let start = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.variant = variant;
    cfg.iff = iff;
    cfg.eval_every = 0;
    if variant == Variant::Plain {
        cfg.k = 0;
        cfg.k_eval = 0;
    }
    cfg.resolve().map_err(|e| e.to_string())?;
    let out = train(&cfg, &data.train, &data.eval).map_err(|e| e.to_string())?;
    let first = out.history.first().ok_or("no epochs")?;
    let last = out.history.last().unwrap();
    Ok(Run {
        first_loss: first.train_loss,
        last_loss: last.train_loss,
        report: last.eval.clone().ok_or("no final evaluation")?,
        elapsed: start.elapsed(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Experiments {
    plain: Vec<Run>,
    dinf: Vec<Run>,
    relu: Run,
    no_iff: Vec<Run>,
    data_secs: f64,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn run_experiments(log: &mut impl FnMut(&str)) -> Result<Experiments, String> {
    let start = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.resolve().map_err(|e| e.to_string())?;
    let data = generate(&cfg.synth).map_err(|e| e.to_string())?;
    let data_secs = start.elapsed().as_secs_f64();
    let mut go = |name: &str, variant, iff, seed| -> Result<Run, String> {
        let r = desk_run(&data, variant, iff, seed)?;
        log(&format!(
            "  [{name} seed {seed}] loss {:.4} -> {:.4} in {:.0} s",
            r.first_loss,
            r.last_loss,
            r.elapsed.as_secs_f64()
        ));
        Ok(r)
    };
    let mut plain = Vec::new();
    let mut dinf = Vec::new();
    for s in SEEDS {
        plain.push(go("plain", Variant::Plain, IffConfig::default(), s)?);
        dinf.push(go("dinf", Variant::Dinf, IffConfig::default(), s)?);
    }
    let relu = go("relu-interaction", Variant::ReluInteraction, IffConfig::default(), 0)?;
    let mut no_iff = Vec::new();
    for s in SEEDS {
        no_iff.push(go("dinf no-iff", Variant::Dinf, IffConfig::disabled(), s)?);
    }
    Ok(Experiments {
        plain,
        dinf,
        relu,
        no_iff,
        data_secs,
    })
}

fn heavy(r: &Run, i: usize, f: impl Fn(&dinf::harness::IterationMetrics) -> Option<f64>) -> f64 {
    f(r.report.at(i).expect("iteration evaluated")).expect("heavy subset is non-empty")
}

fn dinf_experiment(x: &Experiments) -> (bool, String, Duration) {
    let secs = x.data_secs
        + x.plain.iter().chain(&x.dinf).map(|r| r.elapsed.as_secs_f64()).sum::<f64>()
        + x.relu.elapsed.as_secs_f64();
    let runs: Vec<&Run> = x.plain.iter().chain(&x.dinf).chain(std::iter::once(&x.relu)).collect();
    let a = runs.iter().all(|r| r.halved());
    let worst_ratio = runs.iter().map(|r| r.last_loss / r.first_loss).fold(0.0, f64::max);
    let snr_in = mean(x.dinf.iter().map(|r| heavy(r, 1, |m| m.snr_in_heavy)));
    let snr_out = mean(x.dinf.iter().map(|r| heavy(r, 1, |m| m.snr_out_heavy)));
    let b = snr_out > snr_in;
    let acc_dinf = mean(x.dinf.iter().map(|r| heavy(r, 1, |m| m.acc_heavy)));
    let acc_plain = mean(x.plain.iter().map(|r| heavy(r, 0, |m| m.acc_heavy)));
    let c = acc_dinf >= acc_plain;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    let mut d = String::new();
    let _ = write!(
        d,
        "(a) {} worst final/first loss {worst_ratio:.3}; (b) {} heavy SNR_out {snr_out:.2} dB vs SNR_in {snr_in:.2} dB; (c) {} heavy acc DINF {acc_dinf:.4} vs plain {acc_plain:.4}; per-seed heavy acc DINF {:?} plain {:?}, SNR_out {:?}",
        mark(a),
        mark(b),
        mark(c),
        x.dinf.iter().map(|r| round4(heavy(r, 1, |m| m.acc_heavy))).collect::<Vec<_>>(),
        x.plain.iter().map(|r| round4(heavy(r, 0, |m| m.acc_heavy))).collect::<Vec<_>>(),
        x.dinf.iter().map(|r| round4(heavy(r, 1, |m| m.snr_out_heavy))).collect::<Vec<_>>(),
    );
    (a && b && c, d, Duration::from_secs_f64(secs))
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn iff_experiment(x: &Experiments) -> (bool, String, Duration) {
    let secs = x.no_iff.iter().map(|r| r.elapsed.as_secs_f64()).sum::<f64>();
    let with = mean(x.dinf.iter().map(|r| heavy(r, 1, |m| m.miou_heavy)));
    let without = mean(x.no_iff.iter().map(|r| heavy(r, 1, |m| m.miou_heavy)));
    let d = format!(
        "heavy mIoU with IFF {with:.4} vs without {without:.4}; per seed with {:?} without {:?}",
        x.dinf.iter().map(|r| round4(heavy(r, 1, |m| m.miou_heavy))).collect::<Vec<_>>(),
        x.no_iff.iter().map(|r| round4(heavy(r, 1, |m| m.miou_heavy))).collect::<Vec<_>>(),
    );
    (with >= without, d, Duration::from_secs_f64(secs))
}

// ---------------------------------------------------------------- 8, 9

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dinf")
}

fn dinf_cmd(args: &[&str]) -> Result<String, String> {
    let o = Command::new(bin())
        .args(args)
        .env_remove("DINF_CONFIG_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("`dinf {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAIN: [&str; 8] = [
    "--set",
    "synth.n_train=600",
    "--set",
    "synth.n_eval=300",
    "--epochs",
    "3",
    "--k",
    "3",
];

fn analysis_pipeline(dir: &Path) -> Check {
    let start = Instant::now();
    let data = dir.join("data8");
    let run = dir.join("run8");
    let an = dir.join("an8");
    dinf_cmd(&["datagen", "--out", p(&data), "--set", "synth.n_train=600", "--set", "synth.n_eval=300"])?;
    let mut args = vec!["train", "--data", p(&data), "--out", p(&run), "--quiet"];
    args.extend_from_slice(&SMALL_TRAIN[4..]);
    dinf_cmd(&args)?;
    let ck_path = run.join("checkpoint.bin");
    dinf_cmd(&["analyze", "--checkpoint", p(&ck_path), "--data", p(&data), "--k-eval", "3", "--out", p(&an)])?;

    let comp = fs::read_to_string(an.join("compactness.csv")).map_err(|e| e.to_string())?;
    let proj = fs::read_to_string(an.join("projections.csv")).map_err(|e| e.to_string())?;
    ensure(proj.lines().next() == Some("i,class,pc1,pc2"), "projection header")?;
    ensure(proj.lines().count() == 1 + 4 * 300, "one projection row per sample and iteration")?;

    let ck = dinf::checkpoint::Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let split = dinf::synth::read_split(&data.join("eval.bin")).map_err(|e| e.to_string())?;
    let model = InfnConfig { k_eval: 3, ..ck.config.model() };
    let mut feats: Vec<Vec<Tensor>> = vec![Vec::new(); 4];
    for_each_prediction(&ck.params, &model, &split.samples, 3, |_, set| {
        for (i, it) in set.iterations.iter().enumerate() {
            feats[i].push(it.instance.clone());
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    let mut trend = Vec::new();
    for (i, f) in feats.iter().enumerate() {
        let n = f.len();
        let d = f[0].len();
        let x = DMatrix::from_fn(n, d, |r, c| f[r].data()[c]);
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let mut vals: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let row = comp
            .lines()
            .find(|l| l.starts_with(&format!("{i},all,")))
            .ok_or(format!("no compactness row for i={i}"))?;
        let cols: Vec<f64> = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        for k in 0..2 {
            worst = worst.max((cols[1 + k] - vals[k]).abs());
        }
        let lib = pca2(f).map_err(|e| e.to_string())?;
        worst = worst.max((lib.explained[0] - vals[0]).abs()).max((lib.explained[1] - vals[1]).abs());
        trend.push(format!("i={i}: {:.3e}", cols[0]));
    }
    ensure(worst < 1e-8, format!("explained variance off by {worst:.1e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!("top-2 explained variance vs dense eigensolver {worst:.1e}; compactness {}", trend.join(", ")))
}

fn reproducibility(dir: &Path) -> Check {
    let start = Instant::now();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let d = dir.join(format!("data9{name}"));
        dinf_cmd(&["datagen", "--out", p(&d)])?;
        let r = dir.join(format!("run9{name}"));
        let mut args = vec!["train", "--data", p(&d), "--out", p(&r), "--quiet"];
        args.extend_from_slice(&SMALL_TRAIN[4..]);
        dinf_cmd(&args)?;
        let read = |f: &Path| fs::read(f).map_err(|e| e.to_string());
        bytes.push((
            read(&d.join("train.bin"))?,
            read(&d.join("eval.bin"))?,
            read(&r.join("checkpoint.bin"))?,
            read(&r.join("metrics.csv"))?,
        ));
    }
    let (a, b) = (&bytes[0], &bytes[1]);
    ensure(a.0 == b.0 && a.1 == b.1, "datasets differ")?;
    ensure(a.2 == b.2, "checkpoints differ")?;
    ensure(a.3 == b.3, "metrics differ")?;
    Ok(format!(
        "default datasets ({} + {} bytes) and checkpoints ({} bytes) byte-identical across runs; {:.0} s",
        a.0.len(),
        a.1.len(),
        a.2.len(),
        start.elapsed().as_secs_f64()
    ))
}

// ----------------------------------------------------------------

fn timed(id: &'static str, title: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let r = f();
    let elapsed = start.elapsed();
    let (passed, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Outcome {
        id,
        title,
        passed,
        detail,
        elapsed,
    }
}

fn report(o: &Outcome) {
    println!(
        "criterion {}: {}  {}  [{:.1} s]  {}",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.title,
        o.elapsed.as_secs_f64(),
        o.detail
    );
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut outcomes = Vec::new();
    let mut push = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    push(timed("1", "formula exactness", formula_exactness));
    push(timed("2", "gradient suite", gradient_suite));
    push(timed("3", "structural laws", structural_laws));
    push(timed("4", "filter properties", filter_properties));
    push(timed("5", "IFF properties", iff_properties));

    println!("running desk-scale experiments (plain, DINF, ReLU-interaction, DINF without IFF)");
    match run_experiments(&mut |line| println!("{line}")) {
        Ok(x) => {
            let (ok, detail, elapsed) = dinf_experiment(&x);
            push(Outcome {
                id: "6",
                title: "desk-scale DINF experiment",
                passed: ok,
                detail,
                elapsed,
            });
            let (ok, detail, elapsed) = iff_experiment(&x);
            push(Outcome {
                id: "7",
                title: "desk-scale IFF experiment",
                passed: ok,
                detail,
                elapsed,
            });
        }
        Err(e) => {
            for (id, title) in [("6", "desk-scale DINF experiment"), ("7", "desk-scale IFF experiment")] {
                push(Outcome {
                    id,
                    title,
                    passed: false,
                    detail: e.clone(),
                    elapsed: Duration::ZERO,
                });
            }
        }
    }
    push(timed("8", "analysis pipeline", || analysis_pipeline(dir.path())));
    push(timed("9", "reproducibility", || reproducibility(dir.path())));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", outcomes.len());
    } else {
        println!("acceptance: FAIL ({} of {} criteria failed: {})", failed.len(), outcomes.len(), failed.join(", "));
        std::process::exit(1);
    }
}
