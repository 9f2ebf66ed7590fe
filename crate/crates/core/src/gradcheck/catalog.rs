//! One small graph per differentiable operation, with input generators that
//! keep samples away from kinks (ReLU at zero, max-pool ties) where a central
//! difference would straddle two branches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{probe, Differentiable};
use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::error::TensorError;
use crate::losses::{bce, combined_loss, iou_soft, tversky_loss, LossKind, LossTag, DEFAULT_SMOOTH};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    Conv2d,
    Conv2dStrided,
    Depthwise,
    ConvTranspose,
    MaxPool,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Affine,
    Mean,
    Concat,
    BatchNormTrain,
    BatchNormEval,
    Bce,
    SoftIou,
    Tversky,
    Combined(LossTag),
    /// conv, batch norm, sigmoid, transposed conv, concat, 1×1 conv, loss.
    /// Weights are scaled down so logits stay well inside the BCE clamp.
    MiniNet,
}

impl OpCase {
    pub const ALL: [OpCase; 21] = [
        OpCase::Conv2d,
        OpCase::Conv2dStrided,
        OpCase::Depthwise,
        OpCase::ConvTranspose,
        OpCase::MaxPool,
        OpCase::Relu,
        OpCase::Sigmoid,
        OpCase::Add,
        OpCase::Mul,
        OpCase::Affine,
        OpCase::Mean,
        OpCase::Concat,
        OpCase::BatchNormTrain,
        OpCase::BatchNormEval,
        OpCase::Bce,
        OpCase::SoftIou,
        OpCase::Tversky,
        OpCase::Combined(LossTag::IouLoss),
        OpCase::Combined(LossTag::BceTversky),
        OpCase::Combined(LossTag::IouTversky),
        OpCase::MiniNet,
    ];

    pub fn name(&self) -> String {
        match self {
            OpCase::Combined(tag) => format!("combined_{tag}"),
            other => format!("{other:?}").to_lowercase(),
        }
    }

    /// Fresh random inputs and the matching `wrt` flags.
    pub fn sample(&self, seed: u64) -> (Vec<Tensor<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        match self {
            OpCase::Conv2d => (
                vec![normal(r, [2, 2, 5, 5]), normal(r, [3, 2, 3, 3]), normal(r, [3])],
                vec![true; 3],
            ),
            OpCase::Conv2dStrided => (
                vec![normal(r, [1, 2, 6, 6]), normal(r, [2, 2, 3, 3])],
                vec![true; 2],
            ),
            OpCase::Depthwise => (
                vec![normal(r, [2, 3, 4, 4]), normal(r, [3, 1, 3, 3])],
                vec![true; 2],
            ),
            OpCase::ConvTranspose => (
                vec![normal(r, [2, 3, 3, 3]), normal(r, [3, 2, 2, 2]), normal(r, [2])],
                vec![true; 3],
            ),
            OpCase::MaxPool => (vec![spaced(r, [2, 2, 4, 6])], vec![true]),
            OpCase::Relu => (vec![off_zero(r, [3, 7])], vec![true]),
            OpCase::Sigmoid => (vec![normal(r, [4, 5]).map(|v| 3.0 * v)], vec![true]),
            OpCase::Add | OpCase::Mul => (vec![normal(r, [2, 3, 4]), normal(r, [2, 3, 4])], vec![true; 2]),
            OpCase::Affine | OpCase::Mean => (vec![normal(r, [5, 3])], vec![true]),
            OpCase::Concat => (
                vec![normal(r, [2, 1, 3, 3]), normal(r, [2, 2, 3, 3])],
                vec![true; 2],
            ),
            OpCase::BatchNormTrain | OpCase::BatchNormEval => (
                vec![normal(r, [3, 2, 3, 3]), normal(r, [2]).map(|v| 1.0 + 0.3 * v), normal(r, [2])],
                vec![true; 3],
            ),
            OpCase::Bce | OpCase::SoftIou | OpCase::Tversky | OpCase::Combined(_) => {
                (vec![probabilities(r, [2, 3, 4, 4]), binary(r, [2, 3, 4, 4])], vec![true, false])
            }
            OpCase::MiniNet => (
                vec![
                    normal(r, [2, 1, 6, 6]),
                    normal(r, [2, 1, 3, 3]),
                    normal(r, [2]).map(|v| 1.0 + 0.3 * v),
                    normal(r, [2]),
                    normal(r, [2, 2, 2, 2]).map(|v| 0.3 * v),
                    normal(r, [3, 5, 1, 1]).map(|v| 0.3 * v),
                    normal(r, [3]),
                    binary(r, [2, 3, 6, 6]),
                ],
                vec![true, true, true, true, true, true, true, false],
            ),
        }
    }
}

impl Differentiable for OpCase {
    fn build<F: Float>(&self, tape: &mut Tape<F>, x: &[Var]) -> Result<Var, TensorError> {
        let kind = |tag| LossKind::new(tag);
        let out = match self {
            OpCase::Conv2d => tape.conv2d(x[0], x[1], Some(x[2]), 1, 1)?,
            OpCase::Conv2dStrided => tape.conv2d(x[0], x[1], None, 2, 1)?,
            OpCase::Depthwise => tape.conv2d_grouped(x[0], x[1], None, 1, 1, 3)?,
            OpCase::ConvTranspose => tape.conv_transpose2d(x[0], x[1], Some(x[2]), 2)?,
            OpCase::MaxPool => tape.maxpool2d(x[0])?,
            OpCase::Relu => tape.relu(x[0]),
            OpCase::Sigmoid => tape.sigmoid(x[0]),
            OpCase::Add => tape.add(x[0], x[1])?,
            OpCase::Mul => tape.mul(x[0], x[1])?,
            OpCase::Affine => tape.affine(x[0], F::from_f64_lossy(-1.7), F::from_f64_lossy(0.4)),
            OpCase::Mean => {
                let sq = tape.mul(x[0], x[0])?;
                return Ok(tape.mean(sq));
            }
            OpCase::Concat => tape.concat_channels(x[0], x[1])?,
            OpCase::BatchNormTrain => {
                let (mut m, mut v) = (vec![F::zero(); 2], vec![F::one(); 2]);
                let mode = BatchNormMode::Train {
                    running_mean: &mut m,
                    running_var: &mut v,
                    momentum: 0.1,
                };
                tape.batchnorm2d(x[0], x[1], x[2], mode, 1e-5)?
            }
            OpCase::BatchNormEval => {
                let m = [F::from_f64_lossy(0.2), F::from_f64_lossy(-0.1)];
                let v = [F::from_f64_lossy(0.8), F::from_f64_lossy(1.5)];
                let mode = BatchNormMode::Eval {
                    running_mean: &m,
                    running_var: &v,
                };
                tape.batchnorm2d(x[0], x[1], x[2], mode, 1e-5)?
            }
            OpCase::Bce => return bce(tape, x[0], x[1]),
            OpCase::SoftIou => return iou_soft(tape, x[0], x[1], DEFAULT_SMOOTH),
            OpCase::Tversky => return tversky_loss(tape, x[0], x[1], 0.3, 0.7, DEFAULT_SMOOTH),
            OpCase::Combined(tag) => return combined_loss(tape, &kind(*tag), x[0], x[1]),
            OpCase::MiniNet => {
                let h = tape.conv2d(x[0], x[1], None, 1, 1)?;
                let (mut m, mut v) = (vec![F::zero(); 2], vec![F::one(); 2]);
                let mode = BatchNormMode::Train {
                    running_mean: &mut m,
                    running_var: &mut v,
                    momentum: 0.1,
                };
                let h = tape.batchnorm2d(h, x[2], x[3], mode, 1e-5)?;
                let h = tape.sigmoid(h);
                let down = tape.conv2d(h, x[4], None, 2, 0)?;
                let up = tape.conv_transpose2d(down, x[4], None, 2)?;
                let cat = tape.concat_channels(h, up)?;
                let cat = tape.concat_channels(cat, x[0])?;
                let logits = tape.conv2d(cat, x[5], Some(x[6]), 1, 0)?;
                let probs = tape.sigmoid(logits);
                return combined_loss(tape, &kind(LossTag::BceTversky), probs, x[7]);
            }
        };
        probe(tape, out)
    }
}

fn from_fn<const N: usize>(shape: [usize; N], f: impl FnMut() -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = std::iter::repeat_with(f).take(n).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn normal<const N: usize>(rng: &mut ChaCha8Rng, shape: [usize; N]) -> Tensor<f64> {
    let dist = rand_distr::StandardNormal;
    from_fn(shape, || rng.sample::<f64, _>(dist))
}

/// Magnitudes in `[0.05, 1.05)`, random sign.
fn off_zero<const N: usize>(rng: &mut ChaCha8Rng, shape: [usize; N]) -> Tensor<f64> {
    from_fn(shape, || {
        let m = 0.05 + rng.random::<f64>();
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ramp with step 0.05, so no pooling window has near-ties.
fn spaced<const N: usize>(rng: &mut ChaCha8Rng, shape: [usize; N]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 1.0).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn probabilities<const N: usize>(rng: &mut ChaCha8Rng, shape: [usize; N]) -> Tensor<f64> {
    from_fn(shape, || rng.random_range(0.05..0.95))
}

fn binary<const N: usize>(rng: &mut ChaCha8Rng, shape: [usize; N]) -> Tensor<f64> {
    from_fn(shape, || if rng.random::<bool>() { 1.0 } else { 0.0 })
}

trait MapValues {
    fn map(self, f: impl Fn(f64) -> f64) -> Self;
}

impl MapValues for Tensor<f64> {
    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};

    #[test]
    fn every_case_builds_and_passes_once() {
        for case in OpCase::ALL {
            let (inputs, wrt) = case.sample(11);
            let report = check_gradients(&case, &inputs, &wrt, &GradCheckConfig::default()).unwrap();
            assert!(report.passed(), "{}: {:?}", case.name(), report.mismatches);
        }
    }

    #[test]
    fn names_are_distinct() {
        let mut names: Vec<String> = OpCase::ALL.iter().map(OpCase::name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), OpCase::ALL.len());
    }
}
