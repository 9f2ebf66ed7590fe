//! Per-channel batch normalization over `[B, C, H, W]`.

use crate::tensor::Float;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How a batchnorm node obtains its statistics.
pub enum BatchNormMode<'a, F> {
    /// Normalize with batch statistics and fold them into the running buffers.
    Train {
        running_mean: &'a mut [F],
        running_var: &'a mut [F],
        momentum: f64,
    },
    /// Normalize with the running buffers only.
    Eval {
        running_mean: &'a [F],
        running_var: &'a [F],
    },
}

impl<F> BatchNormMode<'_, F> {
    pub fn is_training(&self) -> bool {
        matches!(self, BatchNormMode::Train { .. })
    }

    pub(crate) fn channels(&self) -> (usize, usize) {
        match self {
            BatchNormMode::Train {
                running_mean,
                running_var,
                ..
            } => (running_mean.len(), running_var.len()),
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => (running_mean.len(), running_var.len()),
        }
    }
}

pub(crate) struct BatchNormForward<F> {
    pub output: Vec<F>,
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn forward<F: Float>(
    dims: [usize; 4],
    x: &[F],
    gamma: &[F],
    beta: &[F],
    mut mode: BatchNormMode<'_, F>,
    eps: f64,
) -> BatchNormForward<F> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let count = b * plane;
    let mut normalized = vec![F::zero(); x.len()];
    let mut output = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); c];

    for ch in 0..c {
        let offsets: Vec<usize> = (0..b).map(|n| (n * c + ch) * plane).collect();
        let (mean, var) = match &mut mode {
            BatchNormMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                let sum: f64 = offsets
                    .iter()
                    .flat_map(|&o| &x[o..o + plane])
                    .map(|v| v.as_f64())
                    .sum();
                let mean = sum / count as f64;
                let sq: f64 = offsets
                    .iter()
                    .flat_map(|&o| &x[o..o + plane])
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum();
                let var = sq / count as f64;
                let unbiased = if count > 1 {
                    sq / (count - 1) as f64
                } else {
                    var
                };
                let m = *momentum;
                running_mean[ch] =
                    F::from_f64_lossy((1.0 - m) * running_mean[ch].as_f64() + m * mean);
                running_var[ch] =
                    F::from_f64_lossy((1.0 - m) * running_var[ch].as_f64() + m * unbiased);
                (mean, var)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => (running_mean[ch].as_f64(), running_var[ch].as_f64()),
        };
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ch] = F::from_f64_lossy(istd);
        let (mean_f, istd_f) = (F::from_f64_lossy(mean), inv_std[ch]);
        for &o in &offsets {
            for i in o..o + plane {
                let xh = (x[i] - mean_f) * istd_f;
                normalized[i] = xh;
                output[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BatchNormForward {
        output,
        normalized,
        inv_std,
    }
}

pub(crate) struct BatchNormGrads<F> {
    pub input: Option<Vec<F>>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Float>(
    dims: [usize; 4],
    gamma: &[F],
    normalized: &[F],
    inv_std: &[F],
    training: bool,
    grad_out: &[F],
    want_input: bool,
) -> BatchNormGrads<F> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut d_gamma = vec![F::zero(); c];
    let mut d_beta = vec![F::zero(); c];
    let mut d_input = want_input.then(|| vec![F::zero(); grad_out.len()]);
    for ch in 0..c {
        let offsets: Vec<usize> = (0..b).map(|n| (n * c + ch) * plane).collect();
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for &o in &offsets {
            for i in o..o + plane {
                let dy = grad_out[i].as_f64();
                sum_dy += dy;
                sum_dy_xh += dy * normalized[i].as_f64();
            }
        }
        d_gamma[ch] = F::from_f64_lossy(sum_dy_xh);
        d_beta[ch] = F::from_f64_lossy(sum_dy);
        if let Some(dx) = d_input.as_mut() {
            let scale = gamma[ch] * inv_std[ch];
            if training {
                let mean_dy = F::from_f64_lossy(sum_dy / count);
                let mean_dy_xh = F::from_f64_lossy(sum_dy_xh / count);
                for &o in &offsets {
                    for i in o..o + plane {
                        dx[i] = scale * (grad_out[i] - mean_dy - normalized[i] * mean_dy_xh);
                    }
                }
            } else {
                for &o in &offsets {
                    for i in o..o + plane {
                        dx[i] = scale * grad_out[i];
                    }
                }
            }
        }
    }
    BatchNormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}
