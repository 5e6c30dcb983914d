//! Direct 2-D convolution over `N×C×H×W` inputs.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Backward, Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    /// Stride 1 with padding that keeps the spatial size for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

fn geometry(input: &Tensor, weight: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    if input.rank() != 4 || weight.len() != 4 {
        return Err(DpaError::shape(format!(
            "conv2d expects rank-4 input and weight, got {:?} and {:?}",
            input.shape(),
            weight
        )));
    }
    let [n, c_in, h, w] = input.dims4();
    let [c_out, wc_in, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
    if wc_in != c_in {
        return Err(DpaError::shape(format!(
            "conv2d weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(DpaError::shape(format!(
            "conv2d kernel must be square with odd size, got {kh}×{kw}"
        )));
    }
    if spec.stride == 0 {
        return Err(DpaError::shape("conv2d stride must be positive"));
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(DpaError::shape(format!(
            "conv2d kernel {kh} larger than padded input {h}×{w} (padding {})",
            spec.padding
        )));
    }
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        out_h: (h + 2 * spec.padding - kh) / spec.stride + 1,
        out_w: (w + 2 * spec.padding - kw) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
    })
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` lies in `[0, w)`.
fn valid_range(kx: usize, g: &Geometry, out_len: usize, in_len: usize) -> (usize, usize) {
    // ox*s + kx >= pad  and  ox*s + kx - pad < in_len
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    let hi_num = in_len + g.pad;
    let hi = if hi_num > kx {
        ((hi_num - kx - 1) / g.stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1 stride-1 unpadded convolution reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample (`C_in×H×W`) into a `(C_in·k·k) × (OH·OW)` matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let plane = g.plane_out();
    for ci in 0..g.c_in {
        let x_base = ci * g.h * g.w;
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ky, g, g.out_h, g.h);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(kx, g, g.out_w, g.w);
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                dst.fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let row = &x[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        drow[ox] = row[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input plane.
fn col2im(cols: &[f64], g: &Geometry, gx: &mut [f64]) {
    let plane = g.plane_out();
    for ci in 0..g.c_in {
        let x_base = ci * g.h * g.w;
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ky, g, g.out_h, g.h);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(kx, g, g.out_w, g.w);
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * plane..(r + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let row = &mut gx[x_base + iy * g.w..x_base + (iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        row[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn conv_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: &Geometry) -> Tensor {
    let (x, wt) = (input.data(), weight.data());
    let plane = g.plane_out();
    let in_plane = g.c_in * g.h * g.w;
    let rows = g.rows();
    let mut out = vec![0.0; g.n * g.c_out * plane];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * plane }];
    for n in 0..g.n {
        let xs = &x[n * in_plane..(n + 1) * in_plane];
        let dst = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let src = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm_nn(g.c_out, rows, plane, wt, src, dst);
    }
    Tensor::from_parts(vec![g.n, g.c_out, g.out_h, g.out_w], out)
}

struct Conv2dBack {
    geometry: Geometry,
    has_bias: bool,
}

impl Backward for Conv2dBack {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geometry;
        let (x, wt, gy) = (inputs[0].data(), inputs[1].data(), grad.data());
        let plane = g.plane_out();
        let in_plane = g.c_in * g.h * g.w;
        let rows = g.rows();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        let pointwise = g.is_pointwise();
        let mut cols = vec![0.0; if pointwise { 0 } else { rows * plane }];
        let mut gcols = vec![0.0; if pointwise { 0 } else { rows * plane }];
        for n in 0..g.n {
            let xs = &x[n * in_plane..(n + 1) * in_plane];
            let gys = &gy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            let gxs = &mut gx[n * in_plane..(n + 1) * in_plane];
            if pointwise {
                gemm_nt(g.c_out, plane, rows, gys, xs, &mut gw);
                gemm_tn(rows, g.c_out, plane, wt, gys, gxs);
            } else {
                im2col(xs, g, &mut cols);
                gemm_nt(g.c_out, plane, rows, gys, &cols, &mut gw);
                gcols.fill(0.0);
                gemm_tn(rows, g.c_out, plane, wt, gys, &mut gcols);
                col2im(&gcols, g, gxs);
            }
        }
        let mut out = vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
        ];
        if self.has_bias {
            let mut gb = vec![0.0; g.c_out];
            for n in 0..g.n {
                for (co, b) in gb.iter_mut().enumerate() {
                    let o_base = (n * g.c_out + co) * plane;
                    *b += gy[o_base..o_base + plane].iter().sum::<f64>();
                }
            }
            out.push(Some(Tensor::from_parts(vec![g.c_out], gb)));
        }
        Ok(out)
    }
}

/// Plain (non-recording) convolution, used by tests and inference helpers.
pub fn conv2d_tensor(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let g = geometry(input, weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(DpaError::shape(format!(
                "conv2d bias has {} elements, expected {}",
                b.numel(),
                g.c_out
            )));
        }
    }
    Ok(conv_forward(input, weight, bias, &g))
}

impl Tape {
    /// `input` is `N×C_in×H×W`, `weight` is `C_out×C_in×k×k`, `bias` has `C_out`
    /// elements.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let g = geometry(&x, w.shape(), spec)?;
        let out = conv2d_tensor(&x, &w, b.as_deref(), spec)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            Conv2dBack {
                geometry: g,
                has_bias: bias.is_some(),
            },
            &inputs,
            out,
        )
    }
}

struct BatchedConvBack {
    geometry: Geometry,
}

impl Backward for BatchedConvBack {
    fn name(&self) -> &'static str {
        "batched_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geometry;
        let (x, kernels, gy) = (inputs[0].data(), inputs[1].data(), grad.data());
        let plane = g.plane_out();
        let in_plane = g.c_in * g.h * g.w;
        let rows = g.rows();
        let wlen = g.c_out * rows;
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; kernels.len()];
        let mut cols = vec![0.0; rows * plane];
        let mut gcols = vec![0.0; rows * plane];
        for n in 0..g.n {
            let xs = &x[n * in_plane..(n + 1) * in_plane];
            let gys = &gy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            let wt = &kernels[n * wlen..(n + 1) * wlen];
            im2col(xs, g, &mut cols);
            gemm_nt(g.c_out, plane, rows, gys, &cols, &mut gk[n * wlen..(n + 1) * wlen]);
            gcols.fill(0.0);
            gemm_tn(rows, g.c_out, plane, wt, gys, &mut gcols);
            col2im(&gcols, g, &mut gx[n * in_plane..(n + 1) * in_plane]);
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gk)),
        ])
    }
}

impl Tape {
    /// Convolution with a different kernel per sample. `kernels` is
    /// `N × (C_out·C_in·k·k)`, row `n` holding sample `n`'s `C_out×C_in×k×k`
    /// kernel.
    pub fn batched_conv2d(
        &self,
        input: Var,
        kernels: Var,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernels));
        if x.rank() != 4 || w.rank() != 2 || w.shape()[0] != x.shape()[0] {
            return Err(DpaError::shape(format!(
                "batched conv2d expects N×C×H×W input and N×(C_out·C_in·k·k) kernels, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let c_in = x.shape()[1];
        if w.shape()[1] != c_out * c_in * k * k {
            return Err(DpaError::shape(format!(
                "kernel rows hold {} values, expected {c_out}×{c_in}×{k}×{k}",
                w.shape()[1]
            )));
        }
        let g = geometry(&x, &[c_out, c_in, k, k], spec)?;
        let plane = g.plane_out();
        let in_plane = c_in * g.h * g.w;
        let rows = g.rows();
        let wlen = c_out * rows;
        let mut out = vec![0.0; g.n * c_out * plane];
        let mut cols = vec![0.0; rows * plane];
        for n in 0..g.n {
            im2col(&x.data()[n * in_plane..(n + 1) * in_plane], &g, &mut cols);
            gemm_nn(
                c_out,
                rows,
                plane,
                &w.data()[n * wlen..(n + 1) * wlen],
                &cols,
                &mut out[n * c_out * plane..(n + 1) * c_out * plane],
            );
        }
        let out = Tensor::from_parts(vec![g.n, c_out, g.out_h, g.out_w], out);
        self.record(BatchedConvBack { geometry: g }, &[input, kernels], out)
    }
}
