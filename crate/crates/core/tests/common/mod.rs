#![allow(dead_code)]

use dinf::filter::{Activation, DinfParams, FilterConfig, KernelGenParams, StmParams};
use dinf::numerics::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_filter() -> FilterConfig {
    FilterConfig {
        channels: 6,
        mid_channels: 3,
        spatial: 3,
        instance_dim: 5,
    }
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::standard_normal(shape, rng)
}

/// Filter parameters with every tensor random, including the generator
/// weights that the library initializes to zero.
pub fn random_dinf(cfg: &FilterConfig, activation: Activation, rng: &mut ChaCha8Rng) -> DinfParams {
    let g = cfg.generator_width();
    let generator = KernelGenParams {
        gen_weight: Tensor::uniform(&[cfg.instance_dim, g], 1.5 / (cfg.instance_dim as f64).sqrt(), rng),
        gen_bias: Tensor::uniform(&[g], 0.3, rng),
    };
    let cm = cfg.mid_channels;
    let stm = match activation {
        Activation::SoftThreshold => Some(StmParams {
            fc1_weight: normal(&[cm, cm], rng),
            fc1_bias: normal(&[cm], rng),
            fc2_weight: normal(&[cm, cm], rng),
            fc2_bias: normal(&[cm], rng),
        }),
        Activation::Relu => None,
    };
    DinfParams { generator, stm }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Per-channel thresholds of `x: [C×P]` (row-major, P spatial cells), by
/// explicit loops.
pub fn reference_thresholds(x: &[f64], c: usize, p: &StmParams) -> Vec<f64> {
    let cells = x.len() / c;
    let w1 = p.fc1_weight.data();
    let w2 = p.fc2_weight.data();
    let m: Vec<f64> = (0..c)
        .map(|ch| x[ch * cells..(ch + 1) * cells].iter().map(|v| v.abs()).sum::<f64>() / cells as f64)
        .collect();
    let mut z1 = vec![0.0; c];
    for j in 0..c {
        let mut s = p.fc1_bias.data()[j];
        for i in 0..c {
            s += m[i] * w1[i * c + j];
        }
        z1[j] = s.max(0.0);
    }
    (0..c)
        .map(|j| {
            let mut s = p.fc2_bias.data()[j];
            for i in 0..c {
                s += z1[i] * w2[i * c + j];
            }
            m[j] * sigmoid(s)
        })
        .collect()
}

/// Single-instance filter by explicit index arithmetic: generator, kernel
/// split, first kernel, shrinkage, second kernel.
pub fn reference_dinf(f: &[f64], v: &[f64], p: &DinfParams, cfg: &FilterConfig) -> Vec<f64> {
    let (c, cm, s, d) = (cfg.channels, cfg.mid_channels, cfg.spatial, cfg.instance_dim);
    let cells = s * s;
    let gw = cfg.generator_width();
    let wt = p.generator.gen_weight.data();
    let mut g = p.generator.gen_bias.data().to_vec();
    for (j, gj) in g.iter_mut().enumerate() {
        for k in 0..d {
            *gj += v[k] * wt[k * gw + j];
        }
    }
    let w1 = |m: usize, ch: usize| g[m * c + ch];
    let w2 = |ch: usize, m: usize| g[c * cm + ch * cm + m];
    let mut h = vec![0.0; cm * cells];
    for m in 0..cm {
        for q in 0..cells {
            for ch in 0..c {
                h[m * cells + q] += w1(m, ch) * f[ch * cells + q];
            }
        }
    }
    let y: Vec<f64> = match &p.stm {
        Some(stm) => {
            let tau = reference_thresholds(&h, cm, stm);
            h.iter().enumerate().map(|(i, &x)| soft(x, tau[i / cells])).collect()
        }
        None => h.iter().map(|x| x.max(0.0)).collect(),
    };
    let mut out = vec![0.0; c * cells];
    for ch in 0..c {
        for q in 0..cells {
            for m in 0..cm {
                out[ch * cells + q] += w2(ch, m) * y[m * cells + q];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
