//! Soft-thresholding module with learned channel-wise thresholds, and the
//! dynamic instance noise filter built around it.
//!
//! The filter takes an RoI feature `f: [C×S×S]` and an instance feature
//! `v: [D]`. A dense layer maps `v` to `C·2·C_mid` values which are split
//! into two dynamic 1×1 kernels: `w1: [C_mid×C]` (forward transform) and
//! `w2: [C×C_mid]` (inverse transform). The transformed feature is shrunk by
//! channel-wise soft thresholds and mapped back:
//!
//! ```text
//! h   = w1 · f               (1×1 conv, C -> C_mid)
//! τ   = gap(|h|) ⊙ sigmoid(fc2(relu(fc1(gap(|h|)))))
//! out = w2 · soft(h, τ)      (1×1 conv, C_mid -> C)
//! ```
//!
//! Kernel layout inside the generator output `g` (row-major, bit-exact):
//! `g[0 .. C·C_mid]` is `w1` with `w1[i][j] = g[i·C + j]`, and
//! `g[C·C_mid .. 2·C·C_mid]` is `w2` with `w2[i][j] = g[C·C_mid + i·C_mid + j]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParameterStore, Tape, Tensor, Var};

/// Layer widths of the filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub channels: usize,
    pub mid_channels: usize,
    pub spatial: usize,
    pub instance_dim: usize,
}

impl FilterConfig {
    /// RoI-head sized widths: 256 channels, 64 mid channels, 7×7, 1024-d.
    pub fn full() -> Self {
        Self {
            channels: 256,
            mid_channels: 64,
            spatial: 7,
            instance_dim: 1024,
        }
    }

    /// Laptop-sized widths with the same 4:1 channel ratio.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            mid_channels: 8,
            spatial: 7,
            instance_dim: 256,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown filter preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mid_channels == 0 || self.spatial == 0 || self.instance_dim == 0
        {
            return Err(Error::Config(format!("filter widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Length of the kernel generator output, `C·2·C_mid`.
    pub fn generator_width(&self) -> usize {
        self.channels * 2 * self.mid_channels
    }

    pub fn roi_shape(&self) -> [usize; 3] {
        [self.channels, self.spatial, self.spatial]
    }
}

/// Non-linearity between the two dynamic kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Learned channel-wise soft thresholding.
    SoftThreshold,
    /// Plain ReLU (the dynamic-interaction baseline).
    Relu,
}

/// Threshold network: two square dense layers over `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct StmParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl StmParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            fc1_weight: Tensor::zeros(&[channels, channels]),
            fc1_bias: Tensor::zeros(&[channels]),
            fc2_weight: Tensor::zeros(&[channels, channels]),
            fc2_bias: Tensor::zeros(&[channels]),
        }
    }

    /// Weights uniform in `±1/√C`, zero biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            fc1_weight: Tensor::uniform(&[channels, channels], bound, rng),
            fc1_bias: Tensor::zeros(&[channels]),
            fc2_weight: Tensor::uniform(&[channels, channels], bound, rng),
            fc2_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1_bias.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let ok = self.fc1_weight.shape() == [c, c]
            && self.fc2_weight.shape() == [c, c]
            && self.fc2_bias.shape() == [c];
        if !ok {
            return Err(Error::shape(
                "stm",
                format!(
                    "dense layers must be square over {c} channels: fc1 {:?}, fc2 {:?}",
                    self.fc1_weight.shape(),
                    self.fc2_weight.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        self.validate()?;
        store.insert(format!("{prefix}.fc1.weight"), self.fc1_weight.clone())?;
        store.insert(format!("{prefix}.fc1.bias"), self.fc1_bias.clone())?;
        store.insert(format!("{prefix}.fc2.weight"), self.fc2_weight.clone())?;
        store.insert(format!("{prefix}.fc2.bias"), self.fc2_bias.clone())
    }

    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc1_weight: store.value(&format!("{prefix}.fc1.weight"))?.clone(),
            fc1_bias: store.value(&format!("{prefix}.fc1.bias"))?.clone(),
            fc2_weight: store.value(&format!("{prefix}.fc2.weight"))?.clone(),
            fc2_bias: store.value(&format!("{prefix}.fc2.bias"))?.clone(),
        })
    }

    fn bind(&self, tape: &mut Tape) -> StmVars {
        StmVars {
            fc1: Linear {
                weight: tape.param(self.fc1_weight.clone()),
                bias: tape.param(self.fc1_bias.clone()),
            },
            fc2: Linear {
                weight: tape.param(self.fc2_weight.clone()),
                bias: tape.param(self.fc2_bias.clone()),
            },
        }
    }
}

/// Dense layer producing both dynamic kernels from an instance feature.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGenParams {
    pub gen_weight: Tensor,
    pub gen_bias: Tensor,
}

impl KernelGenParams {
    pub fn zeros(cfg: &FilterConfig) -> Self {
        Self {
            gen_weight: Tensor::zeros(&[cfg.instance_dim, cfg.generator_width()]),
            gen_bias: Tensor::zeros(&[cfg.generator_width()]),
        }
    }

    /// Zero weights and a small uniform (±1e-3) bias, so the filter starts
    /// close to a fixed, nearly silent map.
    pub fn init<R: Rng + ?Sized>(cfg: &FilterConfig, rng: &mut R) -> Self {
        Self {
            gen_weight: Tensor::zeros(&[cfg.instance_dim, cfg.generator_width()]),
            gen_bias: Tensor::uniform(&[cfg.generator_width()], 1e-3, rng),
        }
    }

    fn validate(&self, cfg: &FilterConfig) -> Result<()> {
        let w = cfg.generator_width();
        if self.gen_weight.shape() != [cfg.instance_dim, w] || self.gen_bias.shape() != [w] {
            return Err(Error::shape(
                "kernel_generator",
                format!(
                    "expected weight [{}×{w}] and bias [{w}], got {:?} and {:?}",
                    cfg.instance_dim,
                    self.gen_weight.shape(),
                    self.gen_bias.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str, cfg: &FilterConfig) -> Result<()> {
        self.validate(cfg)?;
        store.insert(format!("{prefix}.weight"), self.gen_weight.clone())?;
        store.insert(format!("{prefix}.bias"), self.gen_bias.clone())
    }

    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gen_weight: store.value(&format!("{prefix}.weight"))?.clone(),
            gen_bias: store.value(&format!("{prefix}.bias"))?.clone(),
        })
    }
}

/// The two 1×1 kernels generated for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernels {
    /// `[C_mid×C]`, maps C channels to C_mid.
    pub w1: Tensor,
    /// `[C×C_mid]`, maps C_mid channels back to C.
    pub w2: Tensor,
}

/// All parameters of one filter.
#[derive(Clone, Debug, PartialEq)]
pub struct DinfParams {
    pub generator: KernelGenParams,
    /// Threshold network over the `C_mid` intermediate; absent for the ReLU
    /// variant.
    pub stm: Option<StmParams>,
}

impl DinfParams {
    pub fn activation(&self) -> Activation {
        if self.stm.is_some() {
            Activation::SoftThreshold
        } else {
            Activation::Relu
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &FilterConfig, activation: Activation, rng: &mut R) -> Self {
        let generator = KernelGenParams::init(cfg, rng);
        let stm = match activation {
            Activation::SoftThreshold => Some(StmParams::init(cfg.mid_channels, rng)),
            Activation::Relu => None,
        };
        Self { generator, stm }
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str, cfg: &FilterConfig) -> Result<()> {
        self.generator.register(store, &format!("{prefix}.gen"), cfg)?;
        if let Some(stm) = &self.stm {
            if stm.channels() != cfg.mid_channels {
                return Err(Error::shape(
                    "dinf",
                    format!(
                        "threshold network has {} channels, filter has {} mid channels",
                        stm.channels(),
                        cfg.mid_channels
                    ),
                ));
            }
            stm.register(store, &format!("{prefix}.stm"))?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let stm_prefix = format!("{prefix}.stm");
        let stm = if store.contains(&format!("{stm_prefix}.fc1.weight")) {
            Some(StmParams::from_store(store, &stm_prefix)?)
        } else {
            None
        };
        Ok(Self {
            generator: KernelGenParams::from_store(store, &format!("{prefix}.gen"))?,
            stm,
        })
    }

    fn bind(&self, tape: &mut Tape) -> DinfVars {
        DinfVars {
            generator: Linear {
                weight: tape.param(self.generator.gen_weight.clone()),
                bias: tape.param(self.generator.gen_bias.clone()),
            },
            stm: self.stm.as_ref().map(|s| s.bind(tape)),
        }
    }
}

/// Threshold network bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StmVars {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Filter parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DinfVars {
    pub generator: Linear,
    pub stm: Option<StmVars>,
}

impl DinfVars {
    pub fn bind(bound: &crate::numerics::Bound, prefix: &str) -> Result<Self> {
        let stm_prefix = format!("{prefix}.stm");
        let stm = match bound.get(&format!("{stm_prefix}.fc1.weight")) {
            Ok(_) => Some(StmVars {
                fc1: Linear::bind(bound, &format!("{stm_prefix}.fc1"))?,
                fc2: Linear::bind(bound, &format!("{stm_prefix}.fc2"))?,
            }),
            Err(_) => None,
        };
        Ok(Self {
            generator: Linear::bind(bound, &format!("{prefix}.gen"))?,
            stm,
        })
    }
}

/// Thresholds `τ = gap(|x|) ⊙ sigmoid(fc2(relu(fc1(gap(|x|)))))` for
/// `x: [..., C, S, S]`; returns `[..., C]`.
pub fn compute_thresholds_on(tape: &mut Tape, x: Var, stm: &StmVars) -> Result<Var> {
    let a = tape.abs(x);
    let m = tape.gap(a)?;
    let m_shape = tape.shape(m).to_vec();
    let c = *m_shape.last().unwrap();
    let rows = m_shape.iter().product::<usize>() / c;
    let m2 = tape.reshape(m, &[rows, c])?;
    let z1 = stm.fc1.forward(tape, m2)?;
    let z1 = tape.relu(z1);
    let z = stm.fc2.forward(tape, z1)?;
    let alpha = tape.sigmoid(z);
    let alpha = tape.reshape(alpha, &m_shape)?;
    tape.mul(m, alpha)
}

/// Generator output for `v: [B×D]`, split into `w1: [B×C_mid×C]` and
/// `w2: [B×C×C_mid]`.
pub fn generate_kernels_on(
    tape: &mut Tape,
    v: Var,
    generator: &Linear,
    cfg: &FilterConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(v);
    if shape.len() != 2 || shape[1] != cfg.instance_dim {
        return Err(Error::shape(
            "generate_dynamic_kernels",
            format!("instance features {shape:?}, expected [B×{}]", cfg.instance_dim),
        ));
    }
    let b = shape[0];
    let (c, cm) = (cfg.channels, cfg.mid_channels);
    let g = generator.forward(tape, v)?;
    let w1 = tape.slice_last(g, 0, c * cm)?;
    let w1 = tape.reshape(w1, &[b, cm, c])?;
    let w2 = tape.slice_last(g, c * cm, c * cm)?;
    let w2 = tape.reshape(w2, &[b, c, cm])?;
    Ok((w1, w2))
}

/// Filters `f: [B×C×S×S]` with kernels generated from `v: [B×D]`.
pub fn dinf_on(
    tape: &mut Tape,
    f: Var,
    v: Var,
    vars: &DinfVars,
    cfg: &FilterConfig,
) -> Result<Var> {
    let (c, cm, s) = (cfg.channels, cfg.mid_channels, cfg.spatial);
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 || shape[1..] != [c, s, s] {
        return Err(Error::shape(
            "dinf",
            format!("RoI features {shape:?}, expected [B×{c}×{s}×{s}]"),
        ));
    }
    let b = shape[0];
    if tape.shape(v).first() != Some(&b) {
        return Err(Error::shape(
            "dinf",
            format!("{b} RoI features but instance features {:?}", tape.shape(v)),
        ));
    }
    let (w1, w2) = generate_kernels_on(tape, v, &vars.generator, cfg)?;
    let flat = tape.reshape(f, &[b, c, s * s])?;
    let h = tape.bmm(w1, flat)?;
    let h = tape.reshape(h, &[b, cm, s, s])?;
    let shrunk = match &vars.stm {
        Some(stm) => {
            let tau = compute_thresholds_on(tape, h, stm)?;
            tape.soft_threshold(h, tau)?
        }
        None => tape.relu(h),
    };
    let shrunk = tape.reshape(shrunk, &[b, cm, s * s])?;
    let out = tape.bmm(w2, shrunk)?;
    tape.reshape(out, &[b, c, s, s])
}

fn check_roi(op: &'static str, x: &Tensor) -> Result<()> {
    if x.ndim() < 3 {
        return Err(Error::shape(op, format!("expected [..., C, S, S], got {:?}", x.shape())));
    }
    Ok(())
}

/// Soft thresholding of `x: [C×S×S]` (or batched) by per-channel `tau`.
pub fn soft_threshold(x: &Tensor, tau: &Tensor) -> Result<Tensor> {
    check_roi("soft_threshold", x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(tau.clone());
    let y = tape.soft_threshold(xv, tv)?;
    Ok(tape.value(y).clone())
}

/// Per-channel thresholds for `x: [C×S×S]`; satisfies `0 ≤ τ[c] ≤ mean|x[c]|`.
pub fn compute_thresholds(x: &Tensor, p: &StmParams) -> Result<Tensor> {
    check_roi("compute_thresholds", x)?;
    p.validate()?;
    let c = x.shape()[x.ndim() - 3];
    if p.channels() != c {
        return Err(Error::shape(
            "compute_thresholds",
            format!("{c} channels but threshold network over {}", p.channels()),
        ));
    }
    let mut tape = Tape::new();
    let stm = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let tau = compute_thresholds_on(&mut tape, xv, &stm)?;
    Ok(tape.value(tau).clone())
}

/// Kernels for a single instance feature `v: [D]`.
pub fn generate_dynamic_kernels(
    v: &Tensor,
    p: &KernelGenParams,
    cfg: &FilterConfig,
) -> Result<DynamicKernels> {
    p.validate(cfg)?;
    if v.shape() != [cfg.instance_dim] {
        return Err(Error::shape(
            "generate_dynamic_kernels",
            format!("instance feature {:?}, expected [{}]", v.shape(), cfg.instance_dim),
        ));
    }
    let mut tape = Tape::new();
    let generator = Linear {
        weight: tape.constant(p.gen_weight.clone()),
        bias: tape.constant(p.gen_bias.clone()),
    };
    let vv = tape.constant(v.reshape(&[1, cfg.instance_dim])?);
    let (w1, w2) = generate_kernels_on(&mut tape, vv, &generator, cfg)?;
    let (c, cm) = (cfg.channels, cfg.mid_channels);
    Ok(DynamicKernels {
        w1: tape.value(w1).reshape(&[cm, c])?,
        w2: tape.value(w2).reshape(&[c, cm])?,
    })
}

/// Filters one RoI feature `f: [C×S×S]` using instance feature `v: [D]`.
pub fn dinf_apply(f: &Tensor, v: &Tensor, p: &DinfParams, cfg: &FilterConfig) -> Result<Tensor> {
    let [c, s, _] = cfg.roi_shape();
    if f.shape() != cfg.roi_shape() {
        return Err(Error::shape(
            "dinf",
            format!("RoI feature {:?}, expected {:?}", f.shape(), cfg.roi_shape()),
        ));
    }
    if v.shape() != [cfg.instance_dim] {
        return Err(Error::shape(
            "dinf",
            format!("instance feature {:?}, expected [{}]", v.shape(), cfg.instance_dim),
        ));
    }
    p.generator.validate(cfg)?;
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let fv = tape.constant(f.reshape(&[1, c, s, s])?);
    let vv = tape.constant(v.reshape(&[1, cfg.instance_dim])?);
    let out = dinf_on(&mut tape, fv, vv, &vars, cfg)?;
    tape.value(out).reshape(&[c, s, s])
}
