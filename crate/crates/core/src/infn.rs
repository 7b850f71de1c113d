//! Iterative noise filter network: a prediction head plus repeated filter
//! applications with dense-sum connections, all sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter::{dinf_on, Activation, DinfParams, DinfVars, FilterConfig};
use crate::numerics::{init_linear, Bound, Linear, ParameterStore, Tape, Tensor, Var};

/// Which refinement stage sits between the head applications.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Prediction head only; the model has no filter parameters.
    Plain,
    /// Dynamic filter with learned soft thresholding.
    Dinf,
    /// Dynamic filter with ReLU between the two kernels.
    ReluInteraction,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Dinf => "dinf",
            Variant::ReluInteraction => "relu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "plain" => Ok(Variant::Plain),
            "dinf" => Ok(Variant::Dinf),
            "relu" => Ok(Variant::ReluInteraction),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }

    fn activation(self) -> Option<Activation> {
        match self {
            Variant::Plain => None,
            Variant::Dinf => Some(Activation::SoftThreshold),
            Variant::ReluInteraction => Some(Activation::Relu),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfnConfig {
    /// Filter iterations during training.
    pub k: usize,
    /// Filter iterations at inference.
    pub k_eval: usize,
    pub filter: FilterConfig,
    pub num_classes: usize,
    pub variant: Variant,
}

impl InfnConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.variant == Variant::Plain && (self.k > 0 || self.k_eval > 0) {
            return Err(Error::Config(format!(
                "the plain head has no filter iterations (k={}, k_eval={})",
                self.k, self.k_eval
            )));
        }
        Ok(())
    }
}

/// Head layers bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc_a: Linear,
    pub fc_b: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

impl HeadVars {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            fc_a: Linear::bind(bound, "head.fc_a")?,
            fc_b: Linear::bind(bound, "head.fc_b")?,
            cls: Linear::bind(bound, "head.cls")?,
            reg: Linear::bind(bound, "head.reg")?,
        })
    }
}

/// Registers head parameters: uniform `±1/√fan_in` weights, zero biases.
pub fn init_head(store: &mut ParameterStore, cfg: &InfnConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let f = cfg.filter;
    let fin = f.channels * f.spatial * f.spatial;
    let d = f.instance_dim;
    let b = |n: usize| 1.0 / (n as f64).sqrt();
    init_linear(store, "head.fc_a", fin, d, b(fin), rng)?;
    init_linear(store, "head.fc_b", d, d, b(d), rng)?;
    init_linear(store, "head.cls", d, cfg.num_classes, b(d), rng)?;
    init_linear(store, "head.reg", d, 4, b(d), rng)
}

/// Builds and seals the parameter store of a model. The parameter set does
/// not depend on `k` or `k_eval`.
pub fn init_params(cfg: &InfnConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_head(&mut store, cfg, &mut rng)?;
    if let Some(act) = cfg.variant.activation() {
        DinfParams::init(&cfg.filter, act, &mut rng).register(&mut store, "dinf", &cfg.filter)?;
    }
    store.seal();
    Ok(store)
}

pub fn count_parameters(params: &ParameterStore) -> usize {
    params.num_scalars()
}

/// `f: [B×C×S×S]` to instance features `[B×D]`, logits `[B×M]` and boxes
/// `[B×4]` in corner form.
pub fn head_on(tape: &mut Tape, f: Var, head: &HeadVars) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("head", format!("expected [B×C×S×S], got {shape:?}")));
    }
    let flat = tape.reshape(f, &[shape[0], shape[1] * shape[2] * shape[3]])?;
    let a = head.fc_a.forward(tape, flat)?;
    let a = tape.relu(a);
    let v = head.fc_b.forward(tape, a)?;
    let v = tape.relu(v);
    let logits = head.cls.forward(tape, v)?;
    let raw = head.reg.forward(tape, v)?;
    let raw = tape.sigmoid(raw);
    let boxes = tape.corner_sort(raw)?;
    Ok((v, logits, boxes))
}

/// Tape handles of one iteration's outputs.
#[derive(Clone, Copy, Debug)]
pub struct IterationVars {
    /// Feature entering the head (`f0` at iteration 0, the filter output after).
    pub feature: Var,
    /// Dense-sum input of the filter; absent at iteration 0.
    pub filter_input: Option<Var>,
    pub instance: Var,
    pub logits: Var,
    pub boxes: Var,
}

/// Runs iteration 0 and `k` filter iterations on a batch `f0: [B×C×S×S]`.
pub fn forward_on(
    tape: &mut Tape,
    f0: Var,
    bound: &Bound,
    cfg: &InfnConfig,
    k: usize,
) -> Result<Vec<IterationVars>> {
    let head = HeadVars::bind(bound)?;
    let filter = if k > 0 {
        if cfg.variant == Variant::Plain {
            return Err(Error::Config("the plain head cannot run filter iterations".into()));
        }
        Some(DinfVars::bind(bound, "dinf")?)
    } else {
        None
    };
    let (v, logits, boxes) = head_on(tape, f0, &head)?;
    let mut out = vec![IterationVars {
        feature: f0,
        filter_input: None,
        instance: v,
        logits,
        boxes,
    }];
    let mut dense = f0;
    for it in 1..=k {
        let vars = filter.as_ref().expect("filter bound when k > 0");
        if it > 1 {
            dense = tape.add(dense, out[it - 1].feature)?;
        }
        let prev = out[it - 1].instance;
        let fk = dinf_on(tape, dense, prev, vars, &cfg.filter)?;
        let (v, logits, boxes) = head_on(tape, fk, &head)?;
        out.push(IterationVars {
            feature: fk,
            filter_input: Some(dense),
            instance: v,
            logits,
            boxes,
        });
    }
    Ok(out)
}

/// Outputs of one iteration for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutput {
    pub logits: Tensor,
    pub boxes: Tensor,
    pub instance: Tensor,
    pub feature: Tensor,
    pub filter_input: Option<Tensor>,
}

/// All `k_eval + 1` predictions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub iterations: Vec<IterationOutput>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Predictions for a batch `f0: [B×C×S×S]` with `k_eval` filter iterations.
pub fn predict_batch(
    f0: &Tensor,
    params: &ParameterStore,
    cfg: &InfnConfig,
    k_eval: usize,
) -> Result<Vec<PredictionSet>> {
    let [c, s, _] = cfg.filter.roi_shape();
    if f0.ndim() != 4 || f0.shape()[1..] != [c, s, s] {
        return Err(Error::shape(
            "infn",
            format!("RoI features {:?}, expected [B×{c}×{s}×{s}]", f0.shape()),
        ));
    }
    let b = f0.shape()[0];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = tape.constant(f0.clone());
    let its = forward_on(&mut tape, fv, &bound, cfg, k_eval)?;
    let mut sets: Vec<PredictionSet> = (0..b)
        .map(|_| PredictionSet {
            iterations: Vec::with_capacity(its.len()),
        })
        .collect();
    for it in &its {
        let take = |v: Var, i: usize| tape.value(v).index_outer(i);
        for (i, set) in sets.iter_mut().enumerate() {
            set.iterations.push(IterationOutput {
                logits: take(it.logits, i),
                boxes: take(it.boxes, i),
                instance: take(it.instance, i),
                feature: take(it.feature, i),
                filter_input: it.filter_input.map(|fi| take(fi, i)),
            });
        }
    }
    Ok(sets)
}

/// Predictions for a single RoI feature `f0: [C×S×S]`.
pub fn infn_forward(
    f0: &Tensor,
    params: &ParameterStore,
    cfg: &InfnConfig,
    k_eval: usize,
) -> Result<PredictionSet> {
    let mut shape = vec![1];
    shape.extend_from_slice(f0.shape());
    let batch = f0.reshape(&shape)?;
    Ok(predict_batch(&batch, params, cfg, k_eval)?.remove(0))
}
