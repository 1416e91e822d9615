//! Slice-level compute kernels shared by the tape's forward and backward passes.

use super::Dims4;

/// Geometry of a same-padded 2-D convolution over one batch item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub k_rows: usize,
    pub k_cols: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.k_rows * self.k_cols
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    fn is_pointwise(&self) -> bool {
        self.k_rows == 1 && self.k_cols == 1
    }
}

/// Unfolds `input` (`[Cin, H, W]`) into a `[Cin*kH*kW, H*W]` patch matrix with
/// zero padding.
fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let (h, w) = (g.rows, g.cols);
    let (pr, pc) = (g.k_rows / 2, g.k_cols / 2);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k_rows {
            for kx in 0..g.k_cols {
                let row = (ci * g.k_rows + ky) * g.k_cols + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let x0 = pc.saturating_sub(kx);
                let x1 = (w + pc).saturating_sub(kx).min(w);
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pr || sy - pr >= h || x0 >= x1 {
                        line.fill(0.0);
                        continue;
                    }
                    let sy = sy - pr;
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    let sx0 = x0 + kx - pc;
                    line[x0..x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `[Cin, H, W]`.
fn col2im(g: &ConvGeom, cols: &[f64], grad_input: &mut [f64]) {
    let (h, w) = (g.rows, g.cols);
    let (pr, pc) = (g.k_rows / 2, g.k_cols / 2);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k_rows {
            for kx in 0..g.k_cols {
                let row = (ci * g.k_rows + ky) * g.k_cols + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x0 = pc.saturating_sub(kx);
                let x1 = (w + pc).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pr || sy - pr >= h {
                        continue;
                    }
                    let sy = sy - pr;
                    let sx0 = x0 + kx - pc;
                    let out = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (o, v) in out.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m*k, k*n and
    // m*n (row-major, contiguous) footprints described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane = g.plane();
    let k = g.patch_len();
    let in_len = g.in_channels * plane;
    let out_len = g.out_channels * plane;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    for b in 0..batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in y.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let patches: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            k,
            plane,
            kernels,
            (k as isize, 1),
            patches,
            (plane as isize, 1),
            1.0,
            y,
        );
    }
    out
}

/// Returns `(grad_input, grad_kernels, grad_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.plane();
    let k = g.patch_len();
    let in_len = g.in_channels * plane;
    let out_len = g.out_channels * plane;
    let mut grad_input = vec![0.0; batch * in_len];
    let mut grad_kernels = vec![0.0; g.out_channels * k];
    let mut grad_bias = vec![0.0; g.out_channels];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * plane }];
    let mut grad_cols = vec![0.0; if g.is_pointwise() { 0 } else { k * plane }];
    for b in 0..batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in dy.chunks_exact(plane).enumerate() {
            grad_bias[co] += chunk.iter().sum::<f64>();
        }
        let patches: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        // dK += dY * patches^T
        gemm(
            g.out_channels,
            plane,
            k,
            dy,
            (plane as isize, 1),
            patches,
            (1, plane as isize),
            1.0,
            &mut grad_kernels,
        );
        // dPatches = K^T * dY
        let dx = &mut grad_input[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(
                k,
                g.out_channels,
                plane,
                kernels,
                (1, k as isize),
                dy,
                (plane as isize, 1),
                0.0,
                dx,
            );
        } else {
            gemm(
                k,
                g.out_channels,
                plane,
                kernels,
                (1, k as isize),
                dy,
                (plane as isize, 1),
                0.0,
                &mut grad_cols,
            );
            col2im(g, &grad_cols, dx);
        }
    }
    (grad_input, grad_kernels, grad_bias)
}

/// 2x2 max pooling. Returns pooled values and, per output cell, the flat
/// input index of the first maximum in row-major window order.
pub(crate) fn maxpool2_forward(d: &Dims4, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (d.rows, d.cols);
    let (oh, ow) = (h / 2, w / 2);
    let planes = d.batch * d.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn upsample2_forward(d: &Dims4, input: &[f64]) -> Vec<f64> {
    let (h, w) = (d.rows, d.cols);
    let ow = 2 * w;
    let planes = d.batch * d.channels;
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for x in 0..w {
                let v = src[y * w + x];
                row[2 * x] = v;
                row[2 * x + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    out
}

/// Sums each 2x2 output block back onto its source cell. `d` describes the
/// (smaller) input.
pub(crate) fn upsample2_backward(d: &Dims4, grad_out: &[f64]) -> Vec<f64> {
    let (h, w) = (d.rows, d.cols);
    let ow = 2 * w;
    let planes = d.batch * d.channels;
    let mut grad = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * ow + 2 * x;
                let bottom = top + ow;
                dst[y * w + x] = src[top] + src[top + 1] + src[bottom] + src[bottom + 1];
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window convolution used to cross-check the GEMM path.
    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
        let (h, w) = (g.rows as isize, g.cols as isize);
        let (pr, pc) = ((g.k_rows / 2) as isize, (g.k_cols / 2) as isize);
        let mut out = vec![0.0; g.out_channels * g.plane()];
        for co in 0..g.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..g.in_channels {
                        for ky in 0..g.k_rows as isize {
                            for kx in 0..g.k_cols as isize {
                                let sy = y + ky - pr;
                                let sx = xx + kx - pc;
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let kv = k[((co * g.in_channels + ci) * g.k_rows
                                    + ky as usize)
                                    * g.k_cols
                                    + kx as usize];
                                acc += kv * x[ci * g.plane() + (sy * w + sx) as usize];
                            }
                        }
                    }
                    out[co * g.plane() + (y * w + xx) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_sliding_window() {
        let g = ConvGeom {
            in_channels: 3,
            out_channels: 2,
            rows: 5,
            cols: 7,
            k_rows: 3,
            k_cols: 5,
        };
        let x: Vec<f64> = (0..3 * 35).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let k: Vec<f64> = (0..g.out_channels * g.patch_len())
            .map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7)
            .collect();
        let bias = [0.5, -1.0];
        let fast = conv2d_forward(&g, 1, &x, &k, &bias);
        let slow = naive_conv(&g, &x, &k, &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 1,
            rows: 4,
            cols: 6,
            k_rows: 3,
            k_cols: 3,
        };
        let x: Vec<f64> = (0..2 * 24).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.plane())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
