//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from an `f32` tape, the reference from central
//! differences on an `f64` tape built by the same graph description, so the
//! check exercises every backward rule at training precision while the
//! reference carries no single-precision cancellation noise.

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

pub mod catalog;

/// A scalar-valued graph over a fixed list of leaves.
pub trait Differentiable {
    fn build<F: Float>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_tol: 1e-3,
            rel_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Reduces `v` to a scalar with fixed, index-dependent weights so that every
/// element contributes a distinct gradient.
pub fn probe<F: Float>(tape: &mut Tape<F>, v: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(v).to_vec();
    let w = Tensor::from_fn(shape, |i| {
        F::from_f64_lossy(((i as f64) * 0.7548 + 0.31).sin() + 0.25)
    })?;
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<D: Differentiable, F: Float>(
    f: &D,
    inputs: &[Tensor<F>],
    wrt: &[bool],
) -> Result<(Tape<F>, Vec<Var>, Var), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &g)| {
            if g {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f.build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Analytic (`f32`) gradients for the inputs flagged in `wrt`.
pub fn analytic_gradients<D: Differentiable>(
    f: &D,
    inputs: &[Tensor<f64>],
    wrt: &[bool],
) -> Result<Vec<Option<Vec<f32>>>, TensorError> {
    let single: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let (mut tape, vars, out) = evaluate(f, &single, wrt)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(wrt)
        .map(|(&v, &g)| if g { tape.take_grad(v) } else { None })
        .collect())
}

/// Central differences of the `f64` graph for one element of one input.
pub fn numeric_partial<D: Differentiable>(
    f: &D,
    inputs: &[Tensor<f64>],
    input: usize,
    element: usize,
    step: f64,
) -> Result<f64, TensorError> {
    let wrt = vec![false; inputs.len()];
    let mut shifted = inputs.to_vec();
    let base = inputs[input].data()[element];
    let mut value_at = |x: f64| -> Result<f64, TensorError> {
        shifted[input].data_mut()[element] = x;
        let (tape, _, out) = evaluate(f, &shifted, &wrt)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::NotScalar(tape.shape(out).to_vec()))
    };
    let plus = value_at(base + step)?;
    let minus = value_at(base - step)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares analytic and numeric gradients for every element of every input
/// flagged in `wrt`.
pub fn check_gradients<D: Differentiable>(
    f: &D,
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    assert_eq!(inputs.len(), wrt.len());
    let analytic = analytic_gradients(f, inputs, wrt)?;
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let n = inputs[i].numel();
        let zeros = vec![0.0f32; n];
        let grad = grad.as_deref().unwrap_or(&zeros);
        for (e, &a) in grad.iter().enumerate() {
            let numeric = numeric_partial(f, inputs, i, e, cfg.step)?;
            let analytic = a as f64;
            let err = (analytic - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(err);
            if err > cfg.abs_tol.max(cfg.rel_tol * numeric.abs()) {
                report.mismatches.push(Mismatch {
                    input: i,
                    element: e,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cube;

    impl Differentiable for Cube {
        fn build<F: Float>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var, TensorError> {
            let sq = tape.mul(inputs[0], inputs[0])?;
            let cube = tape.mul(sq, inputs[0])?;
            probe(tape, cube)
        }
    }

    #[test]
    fn polynomial_passes() {
        let x = Tensor::new([5], vec![-1.5, -0.3, 0.0, 0.7, 1.9]).unwrap();
        let report = check_gradients(&Cube, &[x], &[true], &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 5);
    }

    /// Doubles its input but claims a unit gradient.
    struct WrongDouble;

    impl<F: Float> crate::autodiff::CustomOp<F> for WrongDouble {
        fn name(&self) -> &'static str {
            "wrong_double"
        }

        fn backward(
            &self,
            _inputs: &[&Tensor<F>],
            _output: &Tensor<F>,
            grad_output: &[F],
        ) -> Vec<Option<Vec<F>>> {
            vec![Some(grad_output.to_vec())]
        }
    }

    struct UsesWrongDouble;

    impl Differentiable for UsesWrongDouble {
        fn build<F: Float>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var, TensorError> {
            let x = tape.value(inputs[0]);
            let doubled = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v + v).collect(),
            )?;
            let y = tape.custom(&[inputs[0]], doubled, Box::new(WrongDouble));
            probe(tape, y)
        }
    }

    #[test]
    fn detects_wrong_backward_rule() {
        let x = Tensor::new([4], vec![-1.0, 0.2, 0.9, 1.7]).unwrap();
        let report =
            check_gradients(&UsesWrongDouble, &[x], &[true], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.mismatches.len(), 4);
    }
}
