//! Synthetic occluded-RoI benchmark.
//!
//! Each sample places one class prototype inside a target rectangle of an
//! `S×S` grid, then hides a fraction of that rectangle behind an occluder:
//! either another class's prototype ("pedestrian" pattern) or a rank-2
//! clutter field ("stuff" pattern). The occluder overwrites the target where
//! they intersect; partially covered cells are blended by their covered
//! area, so the recorded overlap is exact. Gaussian noise is added last.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::numerics::Tensor;

/// Overlap fraction at and above which a sample counts as heavily occluded.
pub const HEAVY_OVERLAP: f64 = 0.5;

/// Occluder side lengths below this many cells count as infeasible.
const MIN_OCCLUDER_SIDE: f64 = 0.25;
const MAX_PLACEMENT_RETRIES: usize = 100;

const PROTOTYPE_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Stuff,
    Pedestrian,
}

impl Pattern {
    fn code(self) -> u8 {
        match self {
            Pattern::Stuff => 0,
            Pattern::Pedestrian => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Pattern::Stuff),
            1 => Ok(Pattern::Pedestrian),
            _ => Err(Error::malformed("dataset", format!("unknown pattern code {c}"))),
        }
    }
}

/// One mixture component: probability and overlap range `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapBucket {
    pub prob: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub spatial: usize,
    pub noise_sigma: f64,
    pub overlap_mixture: [OverlapBucket; 3],
    /// Probability of the pedestrian pattern.
    pub pattern_ratio: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 32,
            spatial: 7,
            noise_sigma: 0.02,
            overlap_mixture: [
                OverlapBucket { prob: 0.7, lo: 0.0, hi: 0.3 },
                OverlapBucket { prob: 0.2, lo: 0.3, hi: 0.5 },
                OverlapBucket { prob: 0.1, lo: 0.5, hi: 0.9 },
            ],
            pattern_ratio: 0.5,
            n_train: 8000,
            n_eval: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.channels == 0 || self.spatial < 2 {
            return bad(format!(
                "invalid grid: {} channels, spatial {}",
                self.channels, self.spatial
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let total: f64 = self.overlap_mixture.iter().map(|b| b.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture probabilities sum to {total}, not 1"));
        }
        for b in &self.overlap_mixture {
            if !(b.prob >= 0.0 && 0.0 <= b.lo && b.lo <= b.hi && b.hi < 1.0) {
                return bad(format!("invalid mixture component {b:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.pattern_ratio) {
            return bad(format!("pattern_ratio must lie in [0,1], got {}", self.pattern_ratio));
        }
        Ok(())
    }

    /// Allowed target side lengths in cells: `ceil(0.4·S) ..= floor(0.9·S)`.
    pub fn side_range(&self) -> (usize, usize) {
        let s = self.spatial as f64;
        let lo = ((0.4 * s).ceil() as usize).max(1);
        let hi = ((0.9 * s).floor() as usize).max(lo);
        (lo, hi)
    }

    pub fn roi_shape(&self) -> [usize; 3] {
        [self.channels, self.spatial, self.spatial]
    }
}

/// Unit-norm class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Vec<Tensor>,
}

impl PrototypeBank {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(PROTOTYPE_STREAM);
        let prototypes = (0..cfg.num_classes)
            .map(|_| {
                let t = Tensor::standard_normal(&cfg.roi_shape(), &mut rng);
                let n = t.norm_sq().sqrt();
                t.scale(1.0 / n)
            })
            .collect();
        Self { prototypes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub feature: Tensor,
    pub label: usize,
    pub gt_box: BBox,
    /// Target signal on its visible cells.
    pub clean: Tensor,
    /// Fraction of the target rectangle covered by the occluder.
    pub overlap: f64,
    pub pattern: Pattern,
}

impl SynthSample {
    pub fn is_heavy(&self) -> bool {
        self.overlap >= HEAVY_OVERLAP
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self, index: usize) -> u64 {
        let tag = match self {
            Split::Train => 0u64,
            Split::Eval => 1u64,
        };
        (tag << 48) | index as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One generated sample with its occluder component kept separately.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub sample: SynthSample,
    pub occluder: Tensor,
    /// Whole-sample redraws caused by infeasible occluder placements.
    pub regenerations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynthSample>,
    pub eval: Vec<SynthSample>,
    /// Total redraws over both splits.
    pub regenerations: usize,
}

/// Area of `[a0,a1) ∩ [b0,b1)` on one axis.
fn span(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn sample_overlap(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let last = cfg.overlap_mixture.len() - 1;
    for (i, b) in cfg.overlap_mixture.iter().enumerate() {
        acc += b.prob;
        if u < acc || i == last {
            return if b.hi > b.lo { rng.gen_range(b.lo..b.hi) } else { b.lo };
        }
    }
    unreachable!()
}

/// Occluder rectangle `(x0, y0, x1, y1)` in cell units covering exactly
/// `o·w·h` of the target rectangle. It is anchored at a random target
/// corner and may extend outward past the target.
fn place_occluder(
    o: f64,
    rect: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Option<(f64, f64, f64, f64)> {
    let (c0, r0, w, h) = rect;
    let (c0, r0, w, h) = (c0 as f64, r0 as f64, w as f64, h as f64);
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let a: f64 = if o < 1.0 { rng.gen_range(o..=1.0) } else { 1.0 };
        let b = o / a;
        let (ow, oh) = (a * w, b * h);
        let right: bool = rng.gen();
        let bottom: bool = rng.gen();
        let ext_x: f64 = rng.gen_range(0.0..2.0);
        let ext_y: f64 = rng.gen_range(0.0..2.0);
        if ow < MIN_OCCLUDER_SIDE || oh < MIN_OCCLUDER_SIDE {
            continue;
        }
        let (x0, x1) = if right {
            (c0 + w - ow, c0 + w + ext_x)
        } else {
            (c0 - ext_x, c0 + ow)
        };
        let (y0, y1) = if bottom {
            (r0 + h - oh, r0 + h + ext_y)
        } else {
            (r0 - ext_y, r0 + oh)
        };
        return Some((x0, y0, x1, y1));
    }
    None
}

fn clutter(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (c, s) = (cfg.channels, cfg.spatial);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut data = vec![0.0; c * s * s];
    for _ in 0..2 {
        let a = normal(c);
        let u = normal(s);
        let v = normal(s);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    data[(ch * s + y) * s + x] += a[ch] * u[y] * v[x];
                }
            }
        }
    }
    let t = Tensor::new(vec![c, s, s], data).expect("shape matches data");
    let n = t.norm_sq().sqrt();
    t.scale(1.0 / n)
}

fn try_sample(
    cfg: &SynthConfig,
    bank: &PrototypeBank,
    rng: &mut ChaCha8Rng,
) -> Option<(SynthSample, Tensor)> {
    let (c, s) = (cfg.channels, cfg.spatial);
    let label = rng.gen_range(0..cfg.num_classes);
    let (lo, hi) = cfg.side_range();
    let h = rng.gen_range(lo..=hi);
    let w = rng.gen_range(lo..=hi);
    let r0 = rng.gen_range(0..=s - h);
    let c0 = rng.gen_range(0..=s - w);
    let o = sample_overlap(cfg, rng);
    let pattern = if rng.gen_bool(cfg.pattern_ratio) {
        Pattern::Pedestrian
    } else {
        Pattern::Stuff
    };

    let mut cover = vec![0.0; s * s];
    let mut covered_area = 0.0;
    if o > 0.0 {
        let (x0, y0, x1, y1) = place_occluder(o, (c0, r0, w, h), rng)?;
        for y in 0..s {
            for x in 0..s {
                let a = span(y as f64, y as f64 + 1.0, y0, y1) * span(x as f64, x as f64 + 1.0, x0, x1);
                cover[y * s + x] = a;
                if (r0..r0 + h).contains(&y) && (c0..c0 + w).contains(&x) {
                    covered_area += a;
                }
            }
        }
    }
    let overlap = covered_area / (w * h) as f64;

    let source = match pattern {
        Pattern::Pedestrian => {
            let other = (label + 1 + rng.gen_range(0..cfg.num_classes - 1)) % cfg.num_classes;
            bank.prototypes[other].clone()
        }
        Pattern::Stuff => clutter(cfg, rng),
    };
    let proto = bank.prototypes[label].data();
    let occ_src = source.data();
    let mut clean = vec![0.0; c * s * s];
    let mut occluder = vec![0.0; c * s * s];
    let mut feature = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let i = (ch * s + y) * s + x;
                let cv = cover[y * s + x];
                let inside = (r0..r0 + h).contains(&y) && (c0..c0 + w).contains(&x);
                if inside {
                    clean[i] = proto[i] * (1.0 - cv);
                }
                occluder[i] = occ_src[i] * cv;
                feature[i] = clean[i] + occluder[i];
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for f in feature.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *f += cfg.noise_sigma * z;
        }
    }
    let sf = s as f64;
    let gt_box = BBox::new(
        c0 as f64 / sf,
        r0 as f64 / sf,
        (c0 + w) as f64 / sf,
        (r0 + h) as f64 / sf,
    )
    .expect("target rectangle lies inside the grid");
    let shape = vec![c, s, s];
    Some((
        SynthSample {
            feature: Tensor::new(shape.clone(), feature).expect("shape matches data"),
            label,
            gt_box,
            clean: Tensor::new(shape.clone(), clean).expect("shape matches data"),
            overlap,
            pattern,
        },
        Tensor::new(shape, occluder).expect("shape matches data"),
    ))
}

/// Sample `index` of a split. Every sample draws from its own ChaCha stream,
/// so samples can be generated independently and in any order.
pub fn generate_one(
    cfg: &SynthConfig,
    bank: &PrototypeBank,
    split: Split,
    index: usize,
) -> GeneratedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream(index));
    let mut regenerations = 0;
    loop {
        if let Some((sample, occluder)) = try_sample(cfg, bank, &mut rng) {
            return GeneratedSample {
                sample,
                occluder,
                regenerations,
            };
        }
        regenerations += 1;
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let bank = PrototypeBank::new(cfg);
    let mut regenerations = 0;
    let mut split = |which: Split, n: usize| -> Vec<SynthSample> {
        (0..n)
            .map(|i| {
                let g = generate_one(cfg, &bank, which, i);
                regenerations += g.regenerations;
                g.sample
            })
            .collect()
    };
    let train = split(Split::Train, cfg.n_train);
    let eval = split(Split::Eval, cfg.n_eval);
    Ok(Dataset {
        train,
        eval,
        regenerations,
    })
}

/// Projection SNR in dB: `F` is split into its component along `T` and a
/// residual. The result is capped at +60 dB (vanishing residual) and
/// floored at −60 dB (vanishing signal component).
pub fn snr(feature: &Tensor, clean: &Tensor) -> Result<f64> {
    if feature.shape() != clean.shape() {
        return Err(Error::shape(
            "snr",
            format!("{:?} vs {:?}", feature.shape(), clean.shape()),
        ));
    }
    let tt = clean.norm_sq();
    if tt == 0.0 {
        return Err(Error::Invalid("snr: clean signal is all zero".into()));
    }
    let a = feature.dot(clean) / tt;
    let rr: f64 = feature
        .data()
        .iter()
        .zip(clean.data())
        .map(|(f, t)| {
            let r = f - a * t;
            r * r
        })
        .sum();
    let signal = a * a * tt;
    if signal == 0.0 {
        return Ok(-60.0);
    }
    if rr < 1e-12 * tt {
        return Ok(60.0);
    }
    Ok((10.0 * (signal / rr).log10()).clamp(-60.0, 60.0))
}

/// Counts of samples with overlap in `[0, 0.5)` and `[0.5, 1]`.
pub fn overlap_histogram(samples: &[SynthSample]) -> [usize; 2] {
    let heavy = samples.iter().filter(|s| s.is_heavy()).count();
    [samples.len() - heavy, heavy]
}

const MAGIC: &[u8; 4] = b"DSYN";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Writes one split. Layout (little-endian): magic `DSYN`, `u32` version,
/// `u64` length + UTF-8 config echo, `u64` sample count, `u32` channels,
/// `u32` spatial, then per sample `u32` label, `u8` pattern, `f64` overlap,
/// 4×`f64` box, `C·S·S` `f64` feature, `C·S·S` `f64` clean.
pub fn write_split(path: &Path, config_echo: &str, cfg: &SynthConfig, samples: &[SynthSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_echo.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_echo.as_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cfg.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.spatial as u32).to_le_bytes());
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    for s in samples {
        buf.clear();
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        buf.push(s.pattern.code());
        buf.extend_from_slice(&s.overlap.to_le_bytes());
        for v in s.gt_box.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in s.feature.data().iter().chain(s.clean.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::malformed("dataset", "file is truncated"))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// A split read back from disk.
#[derive(Clone, Debug)]
pub struct SplitFile {
    pub config_echo: String,
    pub channels: usize,
    pub spatial: usize,
    pub samples: Vec<SynthSample>,
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::malformed("dataset", format!("{} is not a dataset file", path.display())));
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            what: "dataset",
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let len = r.u64()? as usize;
    let mut echo = vec![0u8; len];
    r.inner
        .read_exact(&mut echo)
        .map_err(|_| Error::malformed("dataset", "file is truncated"))?;
    let config_echo =
        String::from_utf8(echo).map_err(|_| Error::malformed("dataset", "config echo is not UTF-8"))?;
    let n = r.u64()? as usize;
    let channels = r.u32()? as usize;
    let spatial = r.u32()? as usize;
    let size = channels * spatial * spatial;
    let shape = vec![channels, spatial, spatial];
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let label = r.u32()? as usize;
        let pattern = Pattern::from_code(r.bytes::<1>()?[0])?;
        let overlap = r.f64()?;
        let b = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let gt_box = BBox::from_slice(&b)?;
        let feature = (0..size).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let clean = (0..size).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        samples.push(SynthSample {
            feature: Tensor::new(shape.clone(), feature)?,
            label,
            gt_box,
            clean: Tensor::new(shape.clone(), clean)?,
            overlap,
            pattern,
        });
    }
    if r.inner.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::malformed("dataset", "trailing bytes after last sample"));
    }
    Ok(SplitFile {
        config_echo,
        channels,
        spatial,
        samples,
    })
}
