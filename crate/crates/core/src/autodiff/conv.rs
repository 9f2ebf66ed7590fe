//! Convolution kernels (im2col + GEMM) shared by forward and backward passes.

use crate::tensor::Float;

/// Spatial geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `image` (`channels x height x width`) into a `col_rows x col_cols` matrix.
pub(crate) fn im2col<F: Float>(image: &[F], g: &ConvGeom, col: &mut [F]) {
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *slot = if ix < 0 || ix >= g.width as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into `image`.
pub(crate) fn col2im<F: Float>(col: &[F], g: &ConvGeom, image: &mut [F]) {
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped cross-correlation geometry for a whole batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Per-group geometry (channels = in_channels / groups).
    pub geom: ConvGeom,
}

impl Conv2dShape {
    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    fn in_plane(&self) -> usize {
        self.geom.height * self.geom.width
    }

    fn out_plane(&self) -> usize {
        self.geom.out_h * self.geom.out_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_plane()
    }
}

pub(crate) fn conv2d_forward<F: Float>(
    s: &Conv2dShape,
    input: &[F],
    kernel: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let g = &s.geom;
    let (cin_g, cout_g) = (s.cin_g(), s.cout_g());
    let (in_plane, out_plane) = (s.in_plane(), s.out_plane());
    let k = g.col_rows();
    let mut out = vec![F::zero(); s.output_len()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * out_plane]
    };
    for b in 0..s.batch {
        for grp in 0..s.groups {
            let x = &input[(b * s.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let cols: &[F] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut col);
                &col
            };
            let w = &kernel[grp * cout_g * k..(grp + 1) * cout_g * k];
            let y = &mut out[(b * s.out_channels + grp * cout_g) * out_plane..]
                [..cout_g * out_plane];
            F::gemm(
                cout_g,
                k,
                out_plane,
                F::one(),
                w,
                (k as isize, 1),
                cols,
                (out_plane as isize, 1),
                F::zero(),
                y,
                (out_plane as isize, 1),
            );
        }
        if let Some(bias) = bias {
            let y = &mut out[b * s.out_channels * out_plane..][..s.out_channels * out_plane];
            for (c, plane) in y.chunks_exact_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

/// Gradients of a grouped conv2d. Each output slot is only filled when requested.
pub(crate) struct Conv2dGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Float>(
    s: &Conv2dShape,
    input: &[F],
    kernel: &[F],
    grad_out: &[F],
    want: [bool; 3],
) -> Conv2dGrads<F> {
    let g = &s.geom;
    let (cin_g, cout_g) = (s.cin_g(), s.cout_g());
    let (in_plane, out_plane) = (s.in_plane(), s.out_plane());
    let k = g.col_rows();
    let mut d_input = want[0].then(|| vec![F::zero(); input.len()]);
    let mut d_kernel = want[1].then(|| vec![F::zero(); kernel.len()]);
    let mut d_bias = want[2].then(|| vec![F::zero(); s.out_channels]);
    let pointwise = g.is_pointwise();
    let mut col = vec![F::zero(); if pointwise { 0 } else { k * out_plane }];
    let mut d_col = vec![F::zero(); if pointwise { 0 } else { k * out_plane }];

    for b in 0..s.batch {
        for grp in 0..s.groups {
            let x_off = (b * s.in_channels + grp * cin_g) * in_plane;
            let dy = &grad_out[(b * s.out_channels + grp * cout_g) * out_plane..]
                [..cout_g * out_plane];
            let w_range = grp * cout_g * k..(grp + 1) * cout_g * k;

            if let Some(dk) = d_kernel.as_mut() {
                let x = &input[x_off..x_off + cin_g * in_plane];
                let cols: &[F] = if pointwise {
                    x
                } else {
                    im2col(x, g, &mut col);
                    &col
                };
                // dW += dY [cout_g, P] * col^T [P, k]
                F::gemm(
                    cout_g,
                    out_plane,
                    k,
                    F::one(),
                    dy,
                    (out_plane as isize, 1),
                    cols,
                    (1, out_plane as isize),
                    F::one(),
                    &mut dk[w_range.clone()],
                    (k as isize, 1),
                );
            }
            if let Some(dx) = d_input.as_mut() {
                let w = &kernel[w_range];
                let dx = &mut dx[x_off..x_off + cin_g * in_plane];
                if pointwise {
                    // dX += W^T [k, cout_g] * dY [cout_g, P]
                    F::gemm(
                        k,
                        cout_g,
                        out_plane,
                        F::one(),
                        w,
                        (1, k as isize),
                        dy,
                        (out_plane as isize, 1),
                        F::one(),
                        dx,
                        (out_plane as isize, 1),
                    );
                } else {
                    F::gemm(
                        k,
                        cout_g,
                        out_plane,
                        F::one(),
                        w,
                        (1, k as isize),
                        dy,
                        (out_plane as isize, 1),
                        F::zero(),
                        &mut d_col,
                        (out_plane as isize, 1),
                    );
                    col2im(&d_col, g, dx);
                }
            }
        }
        if let Some(db) = d_bias.as_mut() {
            let dy = &grad_out[b * s.out_channels * out_plane..][..s.out_channels * out_plane];
            for (c, plane) in dy.chunks_exact(out_plane).enumerate() {
                db[c] += plane.iter().copied().sum::<F>();
            }
        }
    }
    Conv2dGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Transposed convolution geometry. `geom` describes the *adjoint* conv2d:
/// its image is the transposed conv's output and its output grid is the input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvTransposeShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl ConvTransposeShape {
    fn in_plane(&self) -> usize {
        self.geom.out_h * self.geom.out_w
    }

    fn out_plane(&self) -> usize {
        self.geom.height * self.geom.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_plane()
    }
}

pub(crate) fn conv_transpose2d_forward<F: Float>(
    s: &ConvTransposeShape,
    input: &[F],
    kernel: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let g = &s.geom;
    let k = g.col_rows();
    let (in_plane, out_plane) = (s.in_plane(), s.out_plane());
    let mut out = vec![F::zero(); s.output_len()];
    let mut col = vec![F::zero(); k * in_plane];
    for b in 0..s.batch {
        let x = &input[b * s.in_channels * in_plane..][..s.in_channels * in_plane];
        // col [k, P] = K^T [k, Cin] * X [Cin, P]
        F::gemm(
            k,
            s.in_channels,
            in_plane,
            F::one(),
            kernel,
            (1, k as isize),
            x,
            (in_plane as isize, 1),
            F::zero(),
            &mut col,
            (in_plane as isize, 1),
        );
        let y = &mut out[b * s.out_channels * out_plane..][..s.out_channels * out_plane];
        col2im(&col, g, y);
        if let Some(bias) = bias {
            for (c, plane) in y.chunks_exact_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<F: Float>(
    s: &ConvTransposeShape,
    input: &[F],
    kernel: &[F],
    grad_out: &[F],
    want: [bool; 3],
) -> Conv2dGrads<F> {
    let g = &s.geom;
    let k = g.col_rows();
    let (in_plane, out_plane) = (s.in_plane(), s.out_plane());
    let mut d_input = want[0].then(|| vec![F::zero(); input.len()]);
    let mut d_kernel = want[1].then(|| vec![F::zero(); kernel.len()]);
    let mut d_bias = want[2].then(|| vec![F::zero(); s.out_channels]);
    let mut d_col = vec![F::zero(); k * in_plane];
    for b in 0..s.batch {
        let dy = &grad_out[b * s.out_channels * out_plane..][..s.out_channels * out_plane];
        if d_input.is_some() || d_kernel.is_some() {
            im2col(dy, g, &mut d_col);
        }
        let x_range = b * s.in_channels * in_plane..(b + 1) * s.in_channels * in_plane;
        if let Some(dx) = d_input.as_mut() {
            // dX [Cin, P] = K [Cin, k] * dCol [k, P]
            F::gemm(
                s.in_channels,
                k,
                in_plane,
                F::one(),
                kernel,
                (k as isize, 1),
                &d_col,
                (in_plane as isize, 1),
                F::zero(),
                &mut dx[x_range.clone()],
                (in_plane as isize, 1),
            );
        }
        if let Some(dk) = d_kernel.as_mut() {
            // dK [Cin, k] += X [Cin, P] * dCol^T [P, k]
            F::gemm(
                s.in_channels,
                in_plane,
                k,
                F::one(),
                &input[x_range],
                (in_plane as isize, 1),
                &d_col,
                (1, in_plane as isize),
                F::one(),
                dk,
                (k as isize, 1),
            );
        }
        if let Some(db) = d_bias.as_mut() {
            for (c, plane) in dy.chunks_exact(out_plane).enumerate() {
                db[c] += plane.iter().copied().sum::<F>();
            }
        }
    }
    Conv2dGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
