//! Overlap metric, segmentation losses and the probability threshold.
//!
//! Soft losses take probabilities `[B, C, H, W]` and binary targets of the same
//! shape. Set-based losses (IoU, Tversky) are computed per `(sample, channel)`
//! plane and then averaged, so a large organ cannot drown out a small one.
//! Tensors of any other rank are treated as a single plane.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::grid::{BinaryMask, Grid};
use crate::tensor::{Float, Tensor};
use crate::NUM_CLASSES;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;
/// Weight of the Tversky term in both blended losses.
pub const TVERSKY_WEIGHT: f64 = 0.4;
/// Weight of the BCE or `1 - IoU` term in both blended losses.
pub const OTHER_WEIGHT: f64 = 0.6;
pub const DEFAULT_SMOOTH: f64 = 1.0;
pub const DEFAULT_TVERSKY_ALPHA: f64 = 0.5;
pub const DEFAULT_TVERSKY_BETA: f64 = 0.5;
/// `p >= THRESHOLD` is foreground.
pub const THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTag {
    /// `1 - IoU`
    IouLoss,
    /// `0.4 * Tversky + 0.6 * BCE`
    BceTversky,
    /// `0.4 * Tversky + 0.6 * (1 - IoU)`
    IouTversky,
}

impl LossTag {
    pub const ALL: [LossTag; 3] = [LossTag::IouLoss, LossTag::BceTversky, LossTag::IouTversky];

    pub fn label(self) -> &'static str {
        match self {
            LossTag::IouLoss => "IoU Loss",
            LossTag::BceTversky => "BCE + Tversky Loss",
            LossTag::IouTversky => "IoU + Tversky Loss",
        }
    }
}

impl std::str::FromStr for LossTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "iou" | "iou_loss" => Ok(LossTag::IouLoss),
            "bce_tversky" => Ok(LossTag::BceTversky),
            "iou_tversky" => Ok(LossTag::IouTversky),
            other => Err(format!(
                "unknown loss {other:?} (expected iou_loss, bce_tversky or iou_tversky)"
            )),
        }
    }
}

impl std::fmt::Display for LossTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossTag::IouLoss => "iou_loss",
            LossTag::BceTversky => "bce_tversky",
            LossTag::IouTversky => "iou_tversky",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossKind {
    pub tag: LossTag,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub smooth_eps: f64,
}

impl Default for LossKind {
    fn default() -> Self {
        Self::new(LossTag::BceTversky)
    }
}

impl LossKind {
    pub fn new(tag: LossTag) -> Self {
        Self {
            tag,
            tversky_alpha: DEFAULT_TVERSKY_ALPHA,
            tversky_beta: DEFAULT_TVERSKY_BETA,
            smooth_eps: DEFAULT_SMOOTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tversky_alpha >= 0.0 && self.tversky_beta >= 0.0) {
            return Err(Error::Config("tversky alpha and beta must be >= 0".into()));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::Config("smoothing epsilon must be > 0".into()));
        }
        Ok(())
    }
}

fn planes(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [b, c, h, w] => (b * c, h * w),
        _ => (1, shape.iter().product()),
    }
}

fn check_pair<F: Float>(
    tape: &Tape<F>,
    op: &'static str,
    pred: Var,
    truth: Var,
) -> std::result::Result<(), TensorError> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{:?}", tape.shape(pred)),
            got: tape.shape(truth).to_vec(),
        });
    }
    Ok(())
}

struct Bce {
    count: f64,
}

impl<F: Float> CustomOp<F> for Bce {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let scale = g[0].as_f64() / self.count;
        let d = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(&p, &t)| {
                let (p, t) = (p.as_f64(), t.as_f64());
                if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                    F::zero()
                } else {
                    F::from_f64_lossy(scale * ((1.0 - t) / (1.0 - p) - t / p))
                }
            })
            .collect();
        vec![Some(d), None]
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce<F: Float>(
    tape: &mut Tape<F>,
    pred: Var,
    truth: Var,
) -> std::result::Result<Var, TensorError> {
    check_pair(tape, "bce", pred, truth)?;
    let (p, t) = (tape.value(pred).data(), tape.value(truth).data());
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.as_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    let count = p.len() as f64;
    let out = Tensor::scalar(F::from_f64_lossy(total / count));
    Ok(tape.custom(&[pred, truth], out, Box::new(Bce { count })))
}

struct SoftIou {
    plane: usize,
    /// Per plane: `(intersection + eps, union + eps)`.
    terms: Vec<(f64, f64)>,
}

impl<F: Float> CustomOp<F> for SoftIou {
    fn name(&self) -> &'static str {
        "iou_soft"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let scale = g[0].as_f64() / self.terms.len() as f64;
        let t = inputs[1].data();
        let mut d = vec![F::zero(); t.len()];
        for (k, &(num, den)) in self.terms.iter().enumerate() {
            let range = k * self.plane..(k + 1) * self.plane;
            for (di, &ti) in d[range.clone()].iter_mut().zip(&t[range]) {
                let ti = ti.as_f64();
                // d(num)/dp = t, d(den)/dp = 1 - t
                *di = F::from_f64_lossy(scale * (ti * den - num * (1.0 - ti)) / (den * den));
            }
        }
        vec![Some(d), None]
    }
}

/// Differentiable IoU, `(Σpt + ε) / (Σp + Σt − Σpt + ε)`, averaged over planes.
pub fn iou_soft<F: Float>(
    tape: &mut Tape<F>,
    pred: Var,
    truth: Var,
    eps: f64,
) -> std::result::Result<Var, TensorError> {
    check_pair(tape, "iou_soft", pred, truth)?;
    let (groups, plane) = planes(tape.shape(pred));
    let (p, t) = (tape.value(pred).data(), tape.value(truth).data());
    let terms: Vec<(f64, f64)> = (0..groups)
        .map(|k| {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for i in k * plane..(k + 1) * plane {
                let (pi, ti) = (p[i].as_f64(), t[i].as_f64());
                inter += pi * ti;
                sp += pi;
                st += ti;
            }
            (inter + eps, sp + st - inter + eps)
        })
        .collect();
    let mean = terms.iter().map(|(n, d)| n / d).sum::<f64>() / groups as f64;
    let out = Tensor::scalar(F::from_f64_lossy(mean));
    Ok(tape.custom(&[pred, truth], out, Box::new(SoftIou { plane, terms })))
}

struct Tversky {
    plane: usize,
    alpha: f64,
    beta: f64,
    /// Per plane: `(TP + eps, TP + α·FP + β·FN + eps)`.
    terms: Vec<(f64, f64)>,
}

impl<F: Float> CustomOp<F> for Tversky {
    fn name(&self) -> &'static str {
        "tversky"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let scale = g[0].as_f64() / self.terms.len() as f64;
        let t = inputs[1].data();
        let mut d = vec![F::zero(); t.len()];
        for (k, &(num, den)) in self.terms.iter().enumerate() {
            let range = k * self.plane..(k + 1) * self.plane;
            for (di, &ti) in d[range.clone()].iter_mut().zip(&t[range]) {
                let ti = ti.as_f64();
                let dden = ti + self.alpha * (1.0 - ti) - self.beta * ti;
                *di = F::from_f64_lossy(-scale * (ti * den - num * dden) / (den * den));
            }
        }
        vec![Some(d), None]
    }
}

/// Tversky loss `1 − (TP + ε)/(TP + α·FP + β·FN + ε)` with soft counts,
/// averaged over planes. `α` weighs false positives, `β` false negatives.
pub fn tversky_loss<F: Float>(
    tape: &mut Tape<F>,
    pred: Var,
    truth: Var,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> std::result::Result<Var, TensorError> {
    check_pair(tape, "tversky_loss", pred, truth)?;
    let (groups, plane) = planes(tape.shape(pred));
    let (p, t) = (tape.value(pred).data(), tape.value(truth).data());
    let terms: Vec<(f64, f64)> = (0..groups)
        .map(|k| {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for i in k * plane..(k + 1) * plane {
                let (pi, ti) = (p[i].as_f64(), t[i].as_f64());
                tp += pi * ti;
                fp += pi * (1.0 - ti);
                fn_ += (1.0 - pi) * ti;
            }
            (tp + eps, tp + alpha * fp + beta * fn_ + eps)
        })
        .collect();
    let mean = terms.iter().map(|(n, d)| 1.0 - n / d).sum::<f64>() / groups as f64;
    let out = Tensor::scalar(F::from_f64_lossy(mean));
    Ok(tape.custom(
        &[pred, truth],
        out,
        Box::new(Tversky {
            plane,
            alpha,
            beta,
            terms,
        }),
    ))
}

/// The blended training objective selected by `kind`.
pub fn combined_loss<F: Float>(
    tape: &mut Tape<F>,
    kind: &LossKind,
    pred: Var,
    truth: Var,
) -> std::result::Result<Var, TensorError> {
    let w_tv = F::from_f64_lossy(TVERSKY_WEIGHT);
    let w_other = F::from_f64_lossy(OTHER_WEIGHT);
    let one_minus_iou = |tape: &mut Tape<F>| -> std::result::Result<Var, TensorError> {
        let iou = iou_soft(tape, pred, truth, kind.smooth_eps)?;
        Ok(tape.affine(iou, -F::one(), F::one()))
    };
    match kind.tag {
        LossTag::IouLoss => one_minus_iou(tape),
        LossTag::BceTversky | LossTag::IouTversky => {
            let tv = tversky_loss(
                tape,
                pred,
                truth,
                kind.tversky_alpha,
                kind.tversky_beta,
                kind.smooth_eps,
            )?;
            let other = match kind.tag {
                LossTag::BceTversky => bce(tape, pred, truth)?,
                _ => one_minus_iou(tape)?,
            };
            let a = tape.scale(tv, w_tv);
            let b = tape.scale(other, w_other);
            tape.add(a, b)
        }
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou_hard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "iou of {:?} and {:?} masks",
            a.dims(),
            b.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn threshold_value(p: f32) -> bool {
    p >= THRESHOLD
}

/// Binarizes a probability map.
pub fn threshold(probs: &Grid<f32>) -> BinaryMask {
    probs.map(|&p| threshold_value(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: [f64; NUM_CLASSES],
    pub mean_iou: f64,
    pub epoch: usize,
    pub split: Split,
}

impl MetricReport {
    pub fn new(per_class_iou: [f64; NUM_CLASSES], epoch: usize, split: Split) -> Self {
        Self {
            per_class_iou,
            mean_iou: per_class_iou.iter().sum::<f64>() / NUM_CLASSES as f64,
            epoch,
            split,
        }
    }
}

/// Folds per-slice, per-class IoU scores in insertion order.
#[derive(Debug, Clone, Default)]
pub struct IouAccumulator {
    sums: [f64; NUM_CLASSES],
    slices: usize,
}

impl IouAccumulator {
    pub fn add_slice(&mut self, pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<()> {
        if pred.len() != NUM_CLASSES || truth.len() != NUM_CLASSES {
            return Err(Error::Dimension(format!(
                "expected {NUM_CLASSES} masks per slice"
            )));
        }
        let mut scores = [0.0; NUM_CLASSES];
        for (c, score) in scores.iter_mut().enumerate() {
            *score = iou_hard(&pred[c], &truth[c])?;
        }
        self.sums.iter_mut().zip(scores).for_each(|(s, v)| *s += v);
        self.slices += 1;
        Ok(())
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    /// Per-class means; an empty accumulator reports zeros.
    pub fn report(&self, epoch: usize, split: Split) -> MetricReport {
        let per_class = if self.slices == 0 {
            [0.0; NUM_CLASSES]
        } else {
            self.sums.map(|s| s / self.slices as f64)
        };
        MetricReport::new(per_class, epoch, split)
    }
}
