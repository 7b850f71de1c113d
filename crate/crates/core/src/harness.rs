//! Training, evaluation and the PCA compactness analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::infn::{forward_on, init_params, predict_batch, InfnConfig, PredictionSet};
use crate::losses::{cross_entropy, iff_loss, iou, BBox, IffConfig};
use crate::losses::batch_loss;
use crate::numerics::{ParameterStore, Tape, Tensor, Var};
use crate::synth::{snr, SynthSample};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 250;

const BATCH_ORDER_STREAM: u64 = 1;

/// `m ← momentum·m + g`, `p ← p − lr·m`, then clears the gradients.
pub fn sgd_step(params: &mut ParameterStore, lr: f64, momentum: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad().all_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    for (_, p) in params.iter_mut() {
        let g = p.grad.data().to_vec();
        for ((m, v), g) in p.momentum.data_mut().iter_mut().zip(p.value.data_mut()).zip(g) {
            *m = momentum * *m + g;
            *v -= lr * *m;
        }
    }
    params.zero_grad();
    Ok(())
}

/// Rescales accumulated gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before rescaling.
pub fn clip_grad_norm(params: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm_sq().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Stacks sample features into `[B×C×S×S]`, with labels and `[B×4]` boxes.
pub fn stack_batch(samples: &[&SynthSample]) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let feats: Vec<&Tensor> = samples.iter().map(|s| &s.feature).collect();
    let f = Tensor::stack(&feats)?;
    let labels = samples.iter().map(|s| s.label).collect();
    let boxes: Vec<f64> = samples.iter().flat_map(|s| s.gt_box.to_array()).collect();
    let b = Tensor::new(vec![samples.len(), 4], boxes)?;
    Ok((f, labels, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub history: Vec<EpochRecord>,
}

pub fn train(cfg: &TrainConfig, train_set: &[SynthSample], eval_set: &[SynthSample]) -> Result<TrainOutcome> {
    train_with_progress(cfg, train_set, eval_set, |_| {})
}

/// Mini-batch SGD on the summed multi-iteration loss; `progress` sees every
/// epoch record as it is produced.
pub fn train_with_progress(
    cfg: &TrainConfig,
    train_set: &[SynthSample],
    eval_set: &[SynthSample],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model();
    let mut params = init_params(&model, cfg.seed)?;
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_ORDER_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SynthSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut params, &model, &batch, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss;
            batches += 1;
        }
        let due = (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) || epoch == cfg.epochs;
        let eval = if due && !eval_set.is_empty() {
            Some(evaluate(&params, &model, &cfg.iff, eval_set, cfg.k_eval)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            eval,
        };
        progress(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

/// One forward/backward pass and parameter update; returns the batch loss.
/// Parameters are left untouched when the loss is not finite.
fn train_step(
    params: &mut ParameterStore,
    model: &InfnConfig,
    batch: &[&SynthSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (f, labels, gt) = stack_batch(batch)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let f0 = tape.constant(f);
    let its = forward_on(&mut tape, f0, &bound, model, cfg.k)?;
    let outputs: Vec<(Var, Var)> = its.iter().map(|it| (it.logits, it.boxes)).collect();
    let loss = batch_loss(&mut tape, &outputs, &labels, &gt, &cfg.iff)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    params.accumulate(&grads, &bound)?;
    if let Some(max) = cfg.clip_grad_norm {
        clip_grad_norm(params, max);
    }
    sgd_step(params, cfg.learning_rate, cfg.momentum)?;
    Ok(value)
}

/// Rejects parameter sets whose names or shapes differ from what `model`
/// builds.
pub fn check_compatible(params: &ParameterStore, model: &InfnConfig) -> Result<()> {
    let expected = init_params(model, 0)?;
    let want: Vec<(&str, &[usize])> = expected.iter().map(|(n, p)| (n, p.value().shape())).collect();
    let have: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value().shape())).collect();
    if want != have {
        return Err(Error::Config(
            "checkpoint parameters do not match the model configuration".into(),
        ));
    }
    Ok(())
}

/// Runs the model over `samples` in chunks and hands every prediction set to
/// `visit` together with its sample index.
pub fn for_each_prediction(
    params: &ParameterStore,
    model: &InfnConfig,
    samples: &[SynthSample],
    k_eval: usize,
    mut visit: impl FnMut(usize, &PredictionSet) -> Result<()>,
) -> Result<()> {
    for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let (f, _, _) = stack_batch(&refs)?;
        for (j, set) in predict_batch(&f, params, model, k_eval)?.iter().enumerate() {
            visit(c * EVAL_CHUNK + j, set)?;
        }
    }
    Ok(())
}

/// Metrics of one iteration index over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub i: usize,
    pub n: usize,
    pub n_heavy: usize,
    /// Mean per-sample loss of this iteration's prediction.
    pub loss: f64,
    pub acc: f64,
    pub acc_heavy: Option<f64>,
    pub miou: f64,
    pub miou_heavy: Option<f64>,
    pub snr_in: f64,
    pub snr_out: f64,
    pub snr_in_heavy: Option<f64>,
    pub snr_out_heavy: Option<f64>,
    /// Label-weighted compactness of the instance features after PCA to 2-d.
    pub compactness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iterations: Vec<IterationMetrics>,
}

impl EvalReport {
    pub fn at(&self, i: usize) -> Option<&IterationMetrics> {
        self.iterations.get(i)
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    loss: f64,
    correct: f64,
    iou: f64,
    snr_in: f64,
    snr_out: f64,
}

impl Acc {
    fn mean(&self, v: f64) -> Option<f64> {
        (self.n > 0).then(|| v / self.n as f64)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &z) in logits.data().iter().enumerate() {
        if z > logits.data()[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    params: &ParameterStore,
    model: &InfnConfig,
    iff: &IffConfig,
    samples: &[SynthSample],
    k_eval: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    check_compatible(params, model)?;
    let iters = k_eval + 1;
    let mut all: Vec<Acc> = (0..iters).map(|_| Acc::default()).collect();
    let mut heavy: Vec<Acc> = (0..iters).map(|_| Acc::default()).collect();
    let mut instances: Vec<Vec<Tensor>> = vec![Vec::with_capacity(samples.len()); iters];
    for_each_prediction(params, model, samples, k_eval, |idx, set| {
        let s = &samples[idx];
        let snr_in = snr(&s.feature, &s.clean)?;
        for (i, out) in set.iterations.iter().enumerate() {
            let pred = BBox::from_slice(out.boxes.data())?;
            let loss = cross_entropy(&out.logits, s.label)? + iff.reg_weight * iff_loss(&pred, &s.gt_box, iff);
            let hit = (argmax(&out.logits) == s.label) as u8 as f64;
            let snr_out = snr(&out.feature, &s.clean)?;
            let q = iou(&pred, &s.gt_box);
            let targets: &mut [&mut Acc] = if s.is_heavy() {
                &mut [&mut all[i], &mut heavy[i]]
            } else {
                &mut [&mut all[i]]
            };
            for a in targets.iter_mut() {
                a.n += 1;
                a.loss += loss;
                a.correct += hit;
                a.iou += q;
                a.snr_in += snr_in;
                a.snr_out += snr_out;
            }
            instances[i].push(out.instance.clone());
        }
        Ok(())
    })?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut iterations = Vec::with_capacity(iters);
    for (i, (a, h)) in all.iter().zip(&heavy).enumerate() {
        let compactness = if samples.len() >= 3 {
            analyze_compactness(&instances[i], &labels)?.total
        } else {
            0.0
        };
        let m = |v: f64| a.mean(v).expect("non-empty evaluation set");
        iterations.push(IterationMetrics {
            i,
            n: a.n,
            n_heavy: h.n,
            loss: m(a.loss),
            acc: m(a.correct),
            acc_heavy: h.mean(h.correct),
            miou: m(a.iou),
            miou_heavy: h.mean(h.iou),
            snr_in: m(a.snr_in),
            snr_out: m(a.snr_out),
            snr_in_heavy: h.mean(h.snr_in),
            snr_out_heavy: h.mean(h.snr_out),
            compactness,
        });
    }
    Ok(EvalReport { iterations })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "epoch,i,loss,acc,acc_heavy,miou,miou_heavy,snr_in,snr_out,compactness";

/// Training history as CSV: one row per epoch and iteration index. `loss` is
/// the epoch's mean training loss; the other columns come from the eval split
/// and are empty for epochs without an evaluation.
pub fn metrics_csv(history: &[EpochRecord], k_eval: usize) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for rec in history {
        for i in 0..=k_eval {
            let m = rec.eval.as_ref().and_then(|e| e.at(i));
            let _ = match m {
                Some(m) => writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    rec.epoch,
                    i,
                    rec.train_loss,
                    m.acc,
                    opt(m.acc_heavy),
                    m.miou,
                    opt(m.miou_heavy),
                    m.snr_in,
                    m.snr_out,
                    m.compactness
                ),
                None => writeln!(s, "{},{},{},,,,,,,", rec.epoch, i, rec.train_loss),
            };
        }
    }
    s
}

pub const REPORT_HEADER: &str =
    "i,n,n_heavy,loss,acc,acc_heavy,miou,miou_heavy,snr_in,snr_out,snr_in_heavy,snr_out_heavy,compactness";

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for m in &report.iterations {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.i,
            m.n,
            m.n_heavy,
            m.loss,
            m.acc,
            opt(m.acc_heavy),
            m.miou,
            opt(m.miou_heavy),
            m.snr_in,
            m.snr_out,
            opt(m.snr_in_heavy),
            opt(m.snr_out_heavy),
            m.compactness
        );
    }
    s
}

/// Top-2 principal components of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components; zero vectors when the data has no variance.
    pub components: [Vec<f64>; 2],
    /// Variance along each component (sample covariance, divisor `n − 1`).
    pub explained: [f64; 2],
    pub total_variance: f64,
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 100_000;

/// Leading eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(a: &[f64], d: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut v = start.to_vec();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut w = vec![0.0; d];
    for _ in 0..POWER_MAX_ITERS {
        for (r, wr) in w.iter_mut().enumerate() {
            *wr = a[r * d..(r + 1) * d].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, vec![0.0; d]);
        }
        let sign = if w.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        let mut diff = 0.0;
        for (x, y) in w.iter().zip(v.iter_mut()) {
            let nx = sign * x / norm;
            diff += (nx - *y) * (nx - *y);
            *y = nx;
        }
        if diff.sqrt() < POWER_TOL {
            break;
        }
    }
    for (r, wr) in w.iter_mut().enumerate() {
        *wr = a[r * d..(r + 1) * d].iter().zip(&v).map(|(x, y)| x * y).sum();
    }
    let lambda = w.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
    (lambda, v)
}

/// Makes the largest-magnitude coordinate positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Two-component PCA via power iteration with deflation on the covariance.
pub fn pca2(features: &[Tensor]) -> Result<Pca> {
    let n = features.len();
    if n < 3 {
        return Err(Error::Invalid(format!("PCA needs at least 3 features, got {n}")));
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::shape("pca", format!("feature of length {} among length {d}", f.len())));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f.data()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut x = Vec::with_capacity(n * d);
    for f in features {
        x.extend(f.data().iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; d * d];
    // cov = xᵀx / (n − 1)
    unsafe {
        matrixmultiply::dgemm(
            d, n, d,
            1.0 / (n - 1) as f64,
            x.as_ptr(), 1, d as isize,
            x.as_ptr(), d as isize, 1,
            0.0,
            cov.as_mut_ptr(), d as isize, 1,
        );
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    if total_variance > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..2 {
            let start = Tensor::standard_normal(&[d], &mut rng).into_data();
            let (lambda, mut v) = power_iteration(&cov, d, &start);
            if lambda <= total_variance * 1e-15 {
                break;
            }
            canonical_sign(&mut v);
            for r in 0..d {
                for c in 0..d {
                    cov[r * d + c] -= lambda * v[r] * v[c];
                }
            }
            explained[k] = lambda;
            components[k] = v;
        }
    }
    Ok(Pca {
        mean,
        components,
        explained,
        total_variance,
    })
}

impl Pca {
    pub fn project(&self, f: &Tensor) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = f.data().iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compactness {
    pub pca: Pca,
    pub projections: Vec<[f64; 2]>,
    /// Mean squared distance to the class centroid in the 2-d projection.
    pub per_class: BTreeMap<usize, f64>,
    /// Per-class values weighted by class frequency.
    pub total: f64,
}

pub fn analyze_compactness(features: &[Tensor], labels: &[usize]) -> Result<Compactness> {
    if features.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let pca = pca2(features)?;
    let projections: Vec<[f64; 2]> = features.iter().map(|f| pca.project(f)).collect();
    let mut groups: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
    for (p, &l) in projections.iter().zip(labels) {
        groups.entry(l).or_default().push(*p);
    }
    let mut per_class = BTreeMap::new();
    let mut total = 0.0;
    for (&label, pts) in &groups {
        let k = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / k;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / k;
        let c = pts.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>() / k;
        per_class.insert(label, c);
        total += c * k;
    }
    total /= projections.len() as f64;
    Ok(Compactness {
        pca,
        projections,
        per_class,
        total,
    })
}
