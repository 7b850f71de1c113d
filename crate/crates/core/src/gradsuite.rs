//! Finite-difference checks over every tape primitive and over the full
//! filter + iterative network + IFF loss composite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::filter::FilterConfig;
use crate::infn::{forward_on, init_params, InfnConfig, Variant};
use crate::losses::{batch_loss_weighted, iff_weights, BBox, IffConfig};
use crate::numerics::{
    gradcheck_with, Bound, GradCheckOptions, GradCheckReport, OpKind, ParameterStore, Tape, Tensor, Var,
};
use crate::synth::{generate, SynthConfig};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(|e| !e.report.passed)
    }

    /// The failing entry with the largest error.
    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.failures()
            .max_by(|a, b| a.report.max_error.total_cmp(&b.report.max_error))
    }
}

type Objective = Box<dyn Fn(&mut Tape, &Bound) -> Result<Var>>;

/// Contracts `out` against a fixed random tensor so every output entry
/// contributes a distinct weight to the scalar.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::standard_normal(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

fn store(entries: &[(&str, Tensor)]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone()).expect("distinct names");
    }
    s.seal();
    s
}

/// `(name, params, objective)` for one check per primitive.
pub fn primitive_cases() -> Vec<(&'static str, ParameterStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut n = |shape: &[usize]| Tensor::standard_normal(shape, &mut rng);
    let mut cases: Vec<(&'static str, ParameterStore, Objective)> = Vec::new();

    macro_rules! unary {
        ($name:literal, $shape:expr, $f:expr) => {
            cases.push((
                $name,
                store(&[("x", n(&$shape))]),
                Box::new(|t: &mut Tape, b: &Bound| {
                    let x = b.get("x")?;
                    let f: fn(&mut Tape, Var) -> Result<Var> = $f;
                    let y = f(t, x)?;
                    contract(t, y, 1)
                }),
            ));
        };
    }
    macro_rules! binary {
        ($name:literal, $sa:expr, $sb:expr, $f:expr) => {
            cases.push((
                $name,
                store(&[("a", n(&$sa)), ("b", n(&$sb))]),
                Box::new(|t: &mut Tape, b: &Bound| {
                    let (x, y) = (b.get("a")?, b.get("b")?);
                    let f: fn(&mut Tape, Var, Var) -> Result<Var> = $f;
                    let z = f(t, x, y)?;
                    contract(t, z, 2)
                }),
            ));
        };
    }

    binary!("matmul", [4, 5], [5, 3], |t, a, b| t.matmul(a, b));
    binary!("bmm", [2, 3, 4], [2, 4, 2], |t, a, b| t.bmm(a, b));
    binary!("add", [3, 4], [3, 4], |t, a, b| t.add(a, b));
    binary!("sub", [3, 4], [3, 4], |t, a, b| t.sub(a, b));
    binary!("mul", [3, 4], [3, 4], |t, a, b| t.mul(a, b));
    binary!("mul_per_channel", [2, 3, 2, 2], [2, 3], |t, a, b| t.mul(a, b));
    binary!("add_bias", [3, 4], [4], |t, a, b| t.add_bias(a, b));
    unary!("abs", [3, 4], |t, x| Ok(t.abs(x)));
    unary!("neg", [3, 4], |t, x| Ok(t.neg(x)));
    unary!("scale", [3, 4], |t, x| Ok(t.scale(x, -1.7)));
    unary!("sigmoid", [3, 4], |t, x| Ok(t.sigmoid(x)));
    unary!("relu", [3, 4], |t, x| Ok(t.relu(x)));
    unary!("gap", [3, 2, 2], |t, x| t.gap(x));
    unary!("reshape", [3, 4], |t, x| t.reshape(x, &[2, 6]));
    unary!("slice_last", [3, 5], |t, x| t.slice_last(x, 1, 3));
    unary!("smooth_l1", [4, 4], |t, x| {
        let x = t.scale(x, 1.5);
        Ok(t.smooth_l1(x))
    });
    unary!("sum_last", [3, 4], |t, x| Ok(t.sum_last(x)));
    unary!("sum_all", [3, 4], |t, x| Ok(t.sum_all(x)));
    unary!("cross_entropy", [3, 4], |t, x| t.cross_entropy(x, &[0, 3, 1]));
    unary!("corner_sort", [3, 4], |t, x| t.corner_sort(x));

    let tau = n(&[2, 3]).map(|v| 0.35 + 0.15 * v.tanh());
    cases.push((
        "soft_threshold",
        store(&[("x", n(&[2, 3, 3, 3])), ("tau", tau)]),
        Box::new(|t: &mut Tape, b: &Bound| {
            let y = t.soft_threshold(b.get("x")?, b.get("tau")?)?;
            contract(t, y, 3)
        }),
    ));
    cases
}

/// Model and data for the composite check: a small batch from the synthetic
/// benchmark and a DINF model whose kernel generator has random (rather than
/// zero) weights, so the dynamic path is exercised.
pub fn composite_setup(filter: FilterConfig, k: usize) -> Result<(InfnConfig, ParameterStore, Tensor, Vec<usize>, Tensor)> {
    let model = InfnConfig {
        k,
        k_eval: k,
        filter,
        num_classes: 4,
        variant: Variant::Dinf,
    };
    let init = init_params(&model, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParameterStore::new();
    for (name, p) in init.iter() {
        let v = if name == "dinf.gen.weight" {
            Tensor::uniform(p.value().shape(), 2.0 / (filter.instance_dim as f64).sqrt(), &mut rng)
        } else {
            p.value().clone()
        };
        params.insert(name, v)?;
    }
    params.seal();
    let data = generate(&SynthConfig {
        channels: filter.channels,
        spatial: filter.spatial,
        n_train: 2,
        n_eval: 0,
        seed: 11,
        ..SynthConfig::default()
    })?;
    let feats: Vec<&Tensor> = data.train.iter().map(|s| &s.feature).collect();
    let f = Tensor::stack(&feats)?;
    let labels = data.train.iter().map(|s| s.label).collect();
    let boxes: Vec<f64> = data.train.iter().flat_map(|s| s.gt_box.to_array()).collect();
    let gt = Tensor::new(vec![data.train.len(), 4], boxes)?;
    Ok((model, params, f, labels, gt))
}

/// Full composite check. The IFF weights are computed once at the base
/// point and then held fixed, which is exactly the function whose gradient
/// the tape produces (the weight is detached).
pub fn check_composite(filter: FilterConfig, k: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, params, f, labels, gt) = composite_setup(filter, k)?;
    let iff = IffConfig::default();
    let gts: Vec<BBox> = gt.data().chunks(4).map(BBox::from_slice).collect::<Result<_>>()?;
    let weights = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let f0 = tape.constant(f.clone());
        let its = forward_on(&mut tape, f0, &bound, &model, k)?;
        its.iter()
            .map(|it| iff_weights(tape.value(it.boxes), &gts, &iff))
            .collect::<Result<Vec<_>>>()?
    };
    gradcheck_with(
        &params,
        |tape, bound| {
            let f0 = tape.constant(f.clone());
            let its = forward_on(tape, f0, bound, &model, k)?;
            let outputs: Vec<(Var, Var)> = its.iter().map(|it| (it.logits, it.boxes)).collect();
            batch_loss_weighted(tape, &outputs, &labels, &gt, &weights)
        },
        opts,
    )
}

/// Entries sampled per parameter tensor in the composite check.
pub fn composite_entries(filter: &FilterConfig) -> usize {
    if filter.instance_dim >= 1024 {
        8
    } else {
        48
    }
}

/// Runs every primitive check and the composite at `k`, optionally with a
/// corrupted backward pass for one primitive.
pub fn run_suite(filter: FilterConfig, k: usize, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for (name, params, f) in primitive_cases() {
        let report = gradcheck_with(
            &params,
            f,
            &GradCheckOptions {
                h: STEP,
                tol: PRIMITIVE_TOL,
                max_entries_per_param: None,
                fault,
            },
        )?;
        entries.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
    }
    let report = check_composite(
        filter,
        k,
        &GradCheckOptions {
            h: STEP,
            tol: COMPOSITE_TOL,
            max_entries_per_param: Some(composite_entries(&filter)),
            fault,
        },
    )?;
    entries.push(SuiteEntry {
        name: format!("composite(k={k})"),
        report,
    });
    Ok(SuiteReport { entries })
}
