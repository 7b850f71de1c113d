//! Box geometry, regression and classification losses, and the IoU focal
//! factor that reweights regression by box quality.

use crate::error::{Error, Result};
use crate::infn::PredictionSet;
use crate::numerics::{Tape, Tensor, Var};

/// Axis-aligned box in normalized corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        let in_unit = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x1 > x2 || y1 > y2 {
            return Err(Error::Invalid(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [x1, y1, x2, y2] => Self::new(*x1, *y1, *x2, *y2),
            _ => Err(Error::shape("box", format!("need 4 coordinates, got {}", v.len()))),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union; zero for disjoint boxes or a zero-area union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Settings of the regression term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IffConfig {
    /// Focusing parameter; `None` disables the factor (μ = 1).
    pub gamma: Option<f64>,
    /// IoU values are clamped to `[iou_floor, 1]` before taking the log.
    pub iou_floor: f64,
    /// Weight λ of the regression term in the total loss.
    pub reg_weight: f64,
}

impl Default for IffConfig {
    fn default() -> Self {
        Self {
            gamma: Some(0.1),
            iou_floor: 0.01,
            reg_weight: 1.0,
        }
    }
}

impl IffConfig {
    pub fn disabled() -> Self {
        Self {
            gamma: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma must be >= 0, got {g}")));
            }
        }
        if !(self.iou_floor > 0.0 && self.iou_floor < 1.0) {
            return Err(Error::Config(format!(
                "iou_floor must lie in (0,1), got {}",
                self.iou_floor
            )));
        }
        if !(self.reg_weight > 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "reg_weight must be > 0, got {}",
                self.reg_weight
            )));
        }
        Ok(())
    }
}

/// `μ = -(1 - IoU)^γ · ln(IoU)` with IoU clamped to `[ε, 1]`.
///
/// Returns 1 when the factor is disabled. The value is a plain weight; no
/// gradient ever flows through it.
pub fn iff_weight(iou_val: f64, cfg: &IffConfig) -> f64 {
    let Some(gamma) = cfg.gamma else {
        return 1.0;
    };
    let u = iou_val.clamp(cfg.iou_floor, 1.0);
    let mu = -(1.0 - u).powf(gamma) * u.ln();
    // -0.0 at IoU = 1
    mu.max(0.0)
}

/// SmoothL1 summed over the four coordinates.
pub fn reg_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| smooth_l1(p - g))
        .sum()
}

pub fn iff_loss(pred: &BBox, gt: &BBox, cfg: &IffConfig) -> f64 {
    iff_weight(iou(pred, gt), cfg) * reg_loss(pred, gt)
}

/// `-log softmax(logits)[label]`, evaluated with max subtraction.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mx = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|v| (v - mx).exp());
    let s = e.sum();
    e.scale(1.0 / s)
}

/// Loss of one sample summed over every iteration's prediction; all
/// iterations share the same target.
pub fn total_loss(preds: &PredictionSet, label: usize, gt: &BBox, cfg: &IffConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in &preds.iterations {
        let pred = BBox::from_slice(p.boxes.data())?;
        total += cross_entropy(&p.logits, label)? + cfg.reg_weight * iff_loss(&pred, gt, cfg);
    }
    Ok(total)
}

/// Detached IFF weights `λ·μ` for predicted boxes `[B×4]` against `gts`.
pub fn iff_weights(boxes: &Tensor, gts: &[BBox], cfg: &IffConfig) -> Result<Vec<f64>> {
    boxes
        .data()
        .chunks(4)
        .zip(gts)
        .map(|(p, g)| {
            let pb = BBox::from_slice(p)?;
            Ok(cfg.reg_weight * iff_weight(iou(&pb, g), cfg))
        })
        .collect()
}

fn parse_targets(gt_boxes: &Tensor, b: usize) -> Result<Vec<BBox>> {
    if gt_boxes.shape() != [b, 4] {
        return Err(Error::shape(
            "batch_loss",
            format!("targets {:?} for batch of {b}", gt_boxes.shape()),
        ));
    }
    gt_boxes.data().chunks(4).map(BBox::from_slice).collect()
}

/// Batch-mean of [`total_loss`] on a tape. `outputs` holds one
/// `(logits[B×M], boxes[B×4])` pair per iteration.
pub fn batch_loss(
    tape: &mut Tape,
    outputs: &[(Var, Var)],
    labels: &[usize],
    gt_boxes: &Tensor,
    cfg: &IffConfig,
) -> Result<Var> {
    let gts = parse_targets(gt_boxes, labels.len())?;
    let weights = outputs
        .iter()
        .map(|&(_, boxes)| iff_weights(tape.value(boxes), &gts, cfg))
        .collect::<Result<Vec<_>>>()?;
    batch_loss_weighted(tape, outputs, labels, gt_boxes, &weights)
}

/// [`batch_loss`] with the per-iteration, per-sample regression weights
/// given explicitly (one `Vec` of length `B` per iteration).
pub fn batch_loss_weighted(
    tape: &mut Tape,
    outputs: &[(Var, Var)],
    labels: &[usize],
    gt_boxes: &Tensor,
    weights: &[Vec<f64>],
) -> Result<Var> {
    let b = labels.len();
    parse_targets(gt_boxes, b)?;
    if outputs.is_empty() {
        return Err(Error::Invalid("batch_loss: no predictions".into()));
    }
    if weights.len() != outputs.len() || weights.iter().any(|w| w.len() != b) {
        return Err(Error::Invalid("batch_loss: one weight per sample and iteration required".into()));
    }
    let gt = tape.constant(gt_boxes.clone());
    let mut acc: Option<Var> = None;
    for (&(logits, boxes), w) in outputs.iter().zip(weights) {
        let ce = tape.cross_entropy(logits, labels)?;
        let diff = tape.sub(boxes, gt)?;
        let sl = tape.smooth_l1(diff);
        let reg = tape.sum_last(sl);
        let mu = tape.constant(Tensor::vector(w.clone()));
        let weighted = tape.mul(reg, mu)?;
        let term = tape.add(ce, weighted)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let sum = tape.sum_all(acc.expect("outputs is non-empty"));
    Ok(tape.scale(sum, 1.0 / b as f64))
}
