//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node holding the result and the rule needed to push gradients back
//! to the node's inputs; [`Tape::backward`] then replays the nodes in reverse
//! insertion order, which is a valid reverse topological order because inputs
//! always exist before the node that consumes them.
//!
//! Only the operators a U-Net needs are provided. Losses and other composite
//! kernels can be attached through [`CustomOp`].

mod conv;
pub mod norm;

use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

use conv::{ConvGeom, Conv2dShape, ConvTransposeShape};
pub use norm::BatchNormMode;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operator defined outside this module.
pub trait CustomOp<F: Float> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input given the output gradient.
    /// `None` marks an input that receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &[F],
    ) -> Vec<Option<Vec<F>>>;
}

enum Op<F: Float> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        shape: Conv2dShape,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        shape: ConvTransposeShape,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: F,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        lhs: Var,
        rhs: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
        training: bool,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] fills its gradient slot.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Removes and returns the gradient accumulated on `v`.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        let value = &mut self.nodes[v.0].value;
        let grad = value.grad().map(<[F]>::to_vec);
        value.set_grad(None).expect("clearing a gradient");
        grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kH, kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.conv2d_grouped(input, kernel, bias, stride, padding, 1)
    }

    /// Grouped cross-correlation; the kernel is `[Cout, Cin / groups, kH, kW]`.
    /// `groups == Cin == Cout` gives a depthwise convolution.
    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [b, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, cin_g, kh, kw] = self.value(kernel).dims4(OP)?;
        if stride == 0 || groups == 0 {
            return Err(invalid(OP, "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(mismatch(
                OP,
                format!("kernel [Cout, {}, kH, kW] with Cout divisible by {groups}", cin / groups),
                self.shape(kernel),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(mismatch(
                OP,
                format!("kernel no larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
                self.shape(kernel),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(mismatch(OP, format!("bias [{cout}]"), self.shape(bv)));
            }
        }
        let shape = Conv2dShape {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            groups,
            geom: ConvGeom {
                channels: cin_g,
                height: h,
                width: w,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
                out_h: (h + 2 * padding - kh) / stride + 1,
                out_w: (w + 2 * padding - kw) / stride + 1,
            },
        };
        let data = conv::conv2d_forward(
            &shape,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let out = Tensor::from_parts(vec![b, cout, shape.geom.out_h, shape.geom.out_w], data);
        let rg = self.any_grad(&[input, kernel]) || bias.is_some_and(|bv| self.requires_grad(bv));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
            },
            rg,
        ))
    }

    /// Transposed convolution of `[B, Cin, H, W]` with `[Cin, Cout, kH, kW]`,
    /// no padding. Output is `[B, Cout, (H-1)*stride + kH, (W-1)*stride + kW]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv_transpose2d";
        let [b, cin, h, w] = self.value(input).dims4(OP)?;
        let [kin, cout, kh, kw] = self.value(kernel).dims4(OP)?;
        if stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        if kin != cin {
            return Err(mismatch(OP, format!("kernel [{cin}, Cout, kH, kW]"), self.shape(kernel)));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(mismatch(OP, format!("bias [{cout}]"), self.shape(bv)));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let shape = ConvTransposeShape {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            geom: ConvGeom {
                channels: cout,
                height: oh,
                width: ow,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding: 0,
                out_h: h,
                out_w: w,
            },
        };
        let data = conv::conv_transpose2d_forward(
            &shape,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let out = Tensor::from_parts(vec![b, cout, oh, ow], data);
        let rg = self.any_grad(&[input, kernel]) || bias.is_some_and(|bv| self.requires_grad(bv));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                shape,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// element in row-major scan order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2d";
        let [b, c, h, w] = self.value(input).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial {
                op: OP,
                height: h,
                width: w,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| x.max(F::zero())).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let data = v
            .data()
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.requires_grad(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, input: Var, scale: F, shift: F) -> Var {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| scale * x + shift).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.requires_grad(input);
        self.push(out, Op::Affine { input, scale }, rg)
    }

    pub fn scale(&mut self, input: Var, scale: F) -> Var {
        self.affine(input, scale, F::zero())
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<F>();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let m = v.data().iter().copied().sum::<F>() / F::from_f64_lossy(v.numel() as f64);
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(m), Op::Mean(input), rg)
    }

    /// Stacks `[B, C1, H, W]` and `[B, C2, H, W]` into `[B, C1 + C2, H, W]`.
    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let [b, c1, h, w] = self.value(lhs).dims4(OP)?;
        let [b2, c2, h2, w2] = self.value(rhs).dims4(OP)?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(mismatch(OP, format!("[{b}, C, {h}, {w}]"), self.shape(rhs)));
        }
        let plane = h * w;
        let (x, y) = (self.value(lhs).data(), self.value(rhs).data());
        let mut data = Vec::with_capacity(b * (c1 + c2) * plane);
        for n in 0..b {
            data.extend_from_slice(&x[n * c1 * plane..(n + 1) * c1 * plane]);
            data.extend_from_slice(&y[n * c2 * plane..(n + 1) * c2 * plane]);
        }
        let out = Tensor::from_parts(vec![b, c1 + c2, h, w], data);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Concat { lhs, rhs }, rg))
    }

    /// Batch normalization over `[B, C, H, W]` with per-channel `gamma`, `beta`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, F>,
        eps: f64,
    ) -> Result<Var, TensorError> {
        const OP: &str = "batchnorm2d";
        let dims = self.value(input).dims4(OP)?;
        let c = dims[1];
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(mismatch(OP, format!("[{c}]"), self.shape(v)));
            }
        }
        if mode.channels() != (c, c) {
            return Err(invalid(OP, format!("running statistics must have {c} channels")));
        }
        let training = mode.is_training();
        let fwd = norm::forward(
            dims,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
            eps,
        );
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(dims.to_vec(), fwd.output),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                training,
            },
            rg,
        ))
    }

    /// Appends a node computed outside the tape with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, rule: Box<dyn CustomOp<F>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradient
    /// slot of every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            for (var, delta) in self.node_backward(idx, &g) {
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
            } => {
                let want = [rg(*input), rg(*kernel), bias.is_some_and(rg)];
                let grads =
                    conv::conv2d_backward(shape, val(*input).data(), val(*kernel).data(), g, want);
                push_conv_grads(&mut out, *input, *kernel, *bias, grads);
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                shape,
            } => {
                let want = [rg(*input), rg(*kernel), bias.is_some_and(rg)];
                let grads = conv::conv_transpose2d_backward(
                    shape,
                    val(*input).data(),
                    val(*kernel).data(),
                    g,
                    want,
                );
                push_conv_grads(&mut out, *input, *kernel, *bias, grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![F::zero(); val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*input, dx));
            }
            Op::Relu(input) => {
                let dx = val(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > F::zero() { gv } else { F::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (F::one() - y))
                    .collect();
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    out.push((*a, g.iter().zip(xb).map(|(&gv, &y)| gv * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(xa).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::Affine { input, scale } => {
                out.push((*input, g.iter().map(|&gv| gv * *scale).collect()));
            }
            Op::Sum(input) => {
                out.push((*input, vec![g[0]; val(*input).numel()]));
            }
            Op::Mean(input) => {
                let n = val(*input).numel();
                let d = g[0] / F::from_f64_lossy(n as f64);
                out.push((*input, vec![d; n]));
            }
            Op::Concat { lhs, rhs } => {
                let [b, c1, h, w] = val(*lhs).dims4("concat_channels").expect("checked");
                let c2 = val(*rhs).shape()[1];
                let plane = h * w;
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for n in 0..b {
                    let chunk = &g[n * (c1 + c2) * plane..(n + 1) * (c1 + c2) * plane];
                    da.extend_from_slice(&chunk[..c1 * plane]);
                    db.extend_from_slice(&chunk[c1 * plane..]);
                }
                if rg(*lhs) {
                    out.push((*lhs, da));
                }
                if rg(*rhs) {
                    out.push((*rhs, db));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let dims = val(*input).dims4("batchnorm2d").expect("checked");
                let grads = norm::backward(
                    dims,
                    val(*gamma).data(),
                    normalized,
                    inv_std,
                    *training,
                    g,
                    rg(*input),
                );
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, grads.gamma));
                }
                if rg(*beta) {
                    out.push((*beta, grads.beta));
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = rule.backward(&ins, &node.value, g);
                for (&v, dg) in inputs.iter().zip(grads) {
                    if let Some(dg) = dg.filter(|_| rg(v)) {
                        assert_eq!(dg.len(), val(v).numel(), "{}: gradient length", rule.name());
                        out.push((v, dg));
                    }
                }
            }
        }
        out
    }
}

fn push_conv_grads<F: Float>(
    out: &mut Vec<(Var, Vec<F>)>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    grads: conv::Conv2dGrads<F>,
) {
    if let Some(d) = grads.input {
        out.push((input, d));
    }
    if let Some(d) = grads.kernel {
        out.push((kernel, d));
    }
    if let (Some(b), Some(d)) = (bias, grads.bias) {
        out.push((b, d));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..9).map(|i| i as f32 * 0.5 - 1.0).collect();
        let x = tape.leaf(t(&[1, 1, 3, 3], &data));
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_output_size_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 7, 9]).unwrap());
        let k = tape.leaf(Tensor::zeros([4, 3, 3, 3]).unwrap());
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 5]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 4, 4]).unwrap());
        let k = tape.leaf(Tensor::zeros([1, 3, 3, 3]).unwrap());
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let big = tape.leaf(Tensor::zeros([1, 2, 7, 7]).unwrap());
        assert!(tape.conv2d(x, big, None, 1, 1).is_err());
        let flat = tape.leaf(Tensor::zeros([4, 4]).unwrap());
        assert!(tape.conv2d(flat, k, None, 1, 1).is_err());
    }

    #[test]
    fn transposed_conv_scatters_single_pixel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[5.0]));
        let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv_transpose2d(x, k, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0; 4]);

        let x = tape.leaf(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv_transpose2d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first_in_scan_order() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[3.0, 3.0, 3.0, 3.0]));
        let y = tape.maxpool2d(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 3, 4]).unwrap());
        assert!(matches!(
            tape.maxpool2d(x),
            Err(TensorError::OddSpatial { height: 3, .. })
        ));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let neg = tape.leaf(t(&[3], &[-1.0, -0.5, -7.0]));
        let r = tape.relu(neg);
        assert_eq!(tape.value(r).data(), &[0.0; 3]);
    }

    #[test]
    fn concat_preserves_channel_order() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn([1, 2, 1, 2], |i| i as f32).unwrap());
        let b = tape.leaf(Tensor::from_fn([1, 3, 1, 2], |i| 10.0 + i as f32).unwrap());
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 1, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]
        );
        let bad = tape.leaf(Tensor::zeros([1, 1, 2, 2]).unwrap());
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[3.0, 5.0]));
        let g = tape.leaf(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let (rm, rv) = ([1.0f32], [4.0f32]);
        let y = tape
            .batchnorm2d(
                x,
                g,
                b,
                BatchNormMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let (mut rm, mut rv) = ([0.0f32], [1.0f32]);
        let y = tape
            .batchnorm2d(
                x,
                g,
                b,
                BatchNormMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: 0.5,
                },
                0.0,
            )
            .unwrap();
        let out = tape.value(y).data();
        assert!((out.iter().sum::<f32>()).abs() < 1e-6);
        // mean 4, unbiased var 20/3
        assert!((rm[0] - 2.0).abs() < 1e-6);
        assert!((rv[0] - (0.5 + 10.0 / 3.0)).abs() < 1e-5);
    }
}
