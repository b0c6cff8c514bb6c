//! Numerical kernels: forward and vector-Jacobian products for every primitive the
//! detector is built from.
//!
//! All spatial ops use the `[C, H, W]` layout. Convolutions follow the
//! cross-correlation convention (kernels are not flipped), matching common
//! deep-learning frameworks. Bilinear sampling treats feature cell `(i, j)` as
//! living at continuous coordinate `(i, j)` and clamps samples to the map border,
//! so constant fields are reproduced exactly.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C = A·B (+ beta·C)` with explicit strides; thin wrapper over `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || n == 0 || (a.len() >= (m - 1) * rsa + (k - 1) * csa + 1));
    assert!(m == 0 || k == 0 || n == 0 || (b.len() >= (k - 1) * rsb + (n - 1) * csb + 1));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a convolution, or `None` when the kernel does not fit.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = input.dims3()?;
        let (d, kc, kh, kw) = match kernel.shape()[..] {
            [d, kc, kh, kw] => (d, kc, kh, kw),
            _ => {
                return Err(Error::shape(format!(
                    "conv kernel must be [D,C,kh,kw], got {:?}",
                    kernel.shape()
                )))
            }
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv kernel expects {kc} input channels, input has {c}"
            )));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv kernel size and stride must be >= 1".into(),
            ));
        }
        let (ho, wo) = match (conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(format!(
                    "kernel {kh}x{kw} does not fit {h}x{w} input with pad {pad}"
                )))
            }
        };
        Ok(ConvGeom {
            c,
            h,
            w,
            d,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.patch_len() * hw];
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// 2-D convolution (cross-correlation) of a `[C,H,W]` map with a `[D,C,kh,kw]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if bias.len() != g.d {
        return Err(Error::shape(format!(
            "conv bias has {} entries, kernel has {} filters",
            bias.len(),
            g.d
        )));
    }
    let hw = g.ho * g.wo;
    let mut out = vec![0.0; g.d * hw];
    for (row, &b) in out.chunks_mut(hw).zip(bias.data()) {
        row.fill(b);
    }
    let k = g.patch_len();
    if g.is_pointwise() {
        gemm(g.d, k, hw, kernel.data(), k, 1, input.data(), hw, 1, &mut out, 1.0);
    } else {
        let cols = g.im2col(input.data());
        gemm(g.d, k, hw, kernel.data(), k, 1, &cols, hw, 1, &mut out, 1.0);
    }
    Ok(Tensor::from_parts(vec![g.d, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    let hw = g.ho * g.wo;
    let k = g.patch_len();
    let go = grad_out.data();
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    let mut dk = vec![0.0; g.d * k];
    gemm(g.d, hw, k, go, hw, 1, cols, 1, hw, &mut dk, 0.0);
    let mut dcols = vec![0.0; k * hw];
    gemm(k, g.d, hw, kernel.data(), 1, k, go, hw, 1, &mut dcols, 0.0);
    let dx = if g.is_pointwise() { dcols } else { g.col2im(&dcols) };
    let db: Vec<f64> = go.chunks(hw).map(|r| r.iter().sum()).collect();
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.d], db),
    ))
}

fn depthwise_geom(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let (kc, kh, kw) = kernel.dims3()?;
    if kc != c {
        return Err(Error::shape(format!(
            "depth-wise kernel has {kc} channels, input has {c}"
        )));
    }
    let ho = conv_out_size(h, kh, 1, pad);
    let wo = conv_out_size(w, kw, 1, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if kh > 0 && kw > 0 => Ok((c, h, w, kh, kw, ho, wo)),
        _ => Err(Error::shape(format!(
            "depth-wise kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"
        ))),
    }
}

/// Per-channel 2-D cross-correlation: channel `c` of the output only sees channel
/// `c` of the input and of the kernel.
pub fn depthwise_correlate(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w, kh, kw, ho, wo) = depthwise_geom(input, kernel, pad)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let kern = &k[ci * kh * kw..(ci + 1) * kh * kw];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = kern[ky * kw + kx];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] += kv * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

pub fn depthwise_correlate_backward(
    input: &Tensor,
    kernel: &Tensor,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w, kh, kw, ho, wo) = depthwise_geom(input, kernel, pad)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = k[(ci * kh + ky) * kw + kx];
                let mut acc = 0.0;
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let g = go[(ci * ho + oy) * wo + ox];
                            acc += g * x[xi];
                            dx[xi] += g * kv;
                        }
                    }
                }
                dk[(ci * kh + ky) * kw + kx] = acc;
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// `y = W·x + b`, with `x` flattened to a vector.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = weight.dims2()?;
    if x.len() != n || bias.len() != m {
        return Err(Error::shape(format!(
            "linear: weight {m}x{n}, input {}, bias {}",
            x.len(),
            bias.len()
        )));
    }
    let mut y = bias.data().to_vec();
    gemm(m, n, 1, weight.data(), n, 1, x.data(), 1, 1, &mut y, 1.0);
    Ok(Tensor::from_parts(vec![m], y))
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = weight.dims2()?;
    let go = grad_out.data();
    let mut dx = vec![0.0; n];
    gemm(n, m, 1, weight.data(), 1, n, go, 1, 1, &mut dx, 0.0);
    let mut dw = vec![0.0; m * n];
    gemm(m, 1, n, go, 1, 1, x.data(), 1, 1, &mut dw, 0.0);
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![m, n], dw),
        Tensor::from_parts(vec![m], go.to_vec()),
    ))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (src[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yv, go) = (y.data(), grad_out.data());
    let mut dx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| yv[idx(a)] * go[idx(a)]).sum();
            for a in 0..len {
                dx[idx(a)] = yv[idx(a)] * (go[idx(a)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

/// Four bilinear taps `(flat index within plane, weight)` for a sample at `(y, x)`,
/// clamped to the plane.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// Samples per bin edge; each ROI-align bin averages a 2x2 grid of bilinear samples.
pub const ROI_SAMPLES: usize = 2;

/// Taps for every output bin of an ROI-align: `taps[bin]` lists `(plane index, weight)`.
fn roi_taps(h: usize, w: usize, bbox: &BBox, stride: f64, out: usize) -> Vec<Vec<(usize, f64)>> {
    let (x1, y1) = (bbox.x1 / stride, bbox.y1 / stride);
    let bin_w = (bbox.x2 - bbox.x1) / stride / out as f64;
    let bin_h = (bbox.y2 - bbox.y1) / stride / out as f64;
    let n = ROI_SAMPLES as f64;
    let share = 1.0 / (n * n);
    let mut taps = Vec::with_capacity(out * out);
    for py in 0..out {
        for px in 0..out {
            let mut bin = Vec::with_capacity(4 * ROI_SAMPLES * ROI_SAMPLES);
            for sy in 0..ROI_SAMPLES {
                let y = y1 + (py as f64 + (sy as f64 + 0.5) / n) * bin_h;
                for sx in 0..ROI_SAMPLES {
                    let x = x1 + (px as f64 + (sx as f64 + 0.5) / n) * bin_w;
                    for (i, wgt) in bilinear_taps(h, w, y, x) {
                        bin.push((i, wgt * share));
                    }
                }
            }
            taps.push(bin);
        }
    }
    taps
}

fn check_roi(fmap: &Tensor, bbox: &BBox, stride: f64, out: usize) -> Result<(usize, usize, usize)> {
    let dims = fmap.dims3()?;
    if !(bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1) || !bbox.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate ROI {bbox:?}")));
    }
    if out == 0 || !(stride > 0.0) {
        return Err(Error::InvalidArgument("ROI output size and stride must be positive".into()));
    }
    Ok(dims)
}

/// ROI-align: pools `bbox` (image pixels) from a feature map with the given stride
/// to an `out x out` grid without coordinate rounding.
pub fn roi_align(fmap: &Tensor, bbox: &BBox, stride: f64, out: usize) -> Result<Tensor> {
    let (c, h, w) = check_roi(fmap, bbox, stride, out)?;
    let taps = roi_taps(h, w, bbox, stride, out);
    let src = fmap.data();
    let mut dst = vec![0.0; c * out * out];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for (b, bin) in taps.iter().enumerate() {
            dst[ci * out * out + b] = bin.iter().map(|&(i, wgt)| plane[i] * wgt).sum();
        }
    }
    Ok(Tensor::from_parts(vec![c, out, out], dst))
}

pub fn roi_align_backward(fmap_shape: &[usize], bbox: &BBox, stride: f64, out: usize, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (fmap_shape[0], fmap_shape[1], fmap_shape[2]);
    let taps = roi_taps(h, w, bbox, stride, out);
    let go = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (b, bin) in taps.iter().enumerate() {
            let g = go[ci * out * out + b];
            for &(i, wgt) in bin {
                plane[i] += g * wgt;
            }
        }
    }
    Tensor::from_parts(fmap_shape.to_vec(), dx)
}

/// Bilinear resize with the align-corners-false convention.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize sizes must be >= 1".into()));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src = img.data();
    let mut dst = vec![0.0; c * out_h * out_w];
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let taps = bilinear_taps(h, w, y, x);
            for ci in 0..c {
                let plane = &src[ci * h * w..(ci + 1) * h * w];
                dst[(ci * out_h + oy) * out_w + ox] = taps.iter().map(|&(i, wgt)| plane[i] * wgt).sum();
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], dst))
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let src = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (ci * h + 2 * oy) * w + 2 * ox;
                out[(ci * ho + oy) * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let go = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * go[(ci * ho + oy) * wo + ox];
                let i = (ci * h + 2 * oy) * w + 2 * ox;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + w] += g;
                dx[i + w + 1] += g;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Per-channel spatial mean, `[C,H,W] -> [C,1,1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Ok(Tensor::from_parts(vec![c, 1, 1], data))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // Dense nested-loop oracle.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let [d, _, kh, kw] = k.shape()[..] else { panic!() };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Tensor::from_fn([d, ho, wo], |i| {
            let (o, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let mut acc = b.data()[o];
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.at3(ci, iy as usize, ix as usize)
                                * k.data()[((o * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::uniform([1, 4, 4], -1.0, 1.0, &mut rng(1));
        let k = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_interior() {
        let x = Tensor::full([1, 5, 5], 0.7);
        let k = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros([1]), 1, 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.at3(0, yy, xx) - 6.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let mut r = rng(stride as u64 * 10 + pad as u64);
            let x = Tensor::uniform([2, 4, 4], -1.0, 1.0, &mut r);
            let k = Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
            let b = Tensor::uniform([3], -1.0, 1.0, &mut r);
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &k, &b, stride, pad)) < 1e-10);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::zeros([2, 4, 4]);
        let k = Tensor::zeros([1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros([1]), 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_identity_and_delta() {
        let x = Tensor::uniform([3, 5, 5], -1.0, 1.0, &mut rng(2));
        let ones = Tensor::full([3, 1, 1], 1.0);
        assert_eq!(depthwise_correlate(&x, &ones, 0).unwrap(), x);
        let delta = Tensor::from_fn([3, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        assert_eq!(depthwise_correlate(&x, &delta, 1).unwrap(), x);
        assert!(depthwise_correlate(&x, &Tensor::zeros([2, 1, 1]), 0).is_err());
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let mut r = rng(3);
        let x = Tensor::uniform([4, 8, 8], -1.0, 1.0, &mut r);
        let k = Tensor::uniform([4, 3, 3], -1.0, 1.0, &mut r);
        let y = depthwise_correlate(&x, &k, 0).unwrap();
        let oracle = Tensor::from_fn([4, 6, 6], |i| {
            let (c, oy, ox) = (i / 36, (i / 6) % 6, i % 6);
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    acc += x.at3(c, oy + ky, ox + kx) * k.at3(c, ky, kx);
                }
            }
            acc
        });
        assert!(y.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn linear_cases() {
        let mut r = rng(4);
        let x = Tensor::uniform([5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform([3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([3], -1.0, 1.0, &mut r);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            let dot: f64 = (0..5).map(|j| w.data()[i * 5 + j] * x.data()[j]).sum::<f64>() + b.data()[i];
            assert!((y.data()[i] - dot).abs() < 1e-12);
        }
        let eye = Tensor::from_fn([5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros([5])).unwrap().data(), x.data());
        assert_eq!(linear(&x, &Tensor::zeros([3, 5]), &b).unwrap().data(), b.data());
        assert!(linear(&x, &Tensor::zeros([3, 4]), &b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&Tensor::full([4], 2.5), 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax(&Tensor::new([3], vec![1e4, 0.0, -3.0]).unwrap(), 0).unwrap();
        assert!(y.data()[0] >= 1.0 - 1e-6);
        let x = [0.3, -1.2, 2.0];
        let y = softmax(&Tensor::new([3], x.to_vec()).unwrap(), 0).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            assert!((y.data()[i] - x[i].exp() / z).abs() < 1e-15);
        }
        // axis 1 of a [2,3,2] tensor
        let t = Tensor::uniform([2, 3, 2], -5.0, 5.0, &mut rng(5));
        let y = softmax(&t, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|a| y.data()[(o * 3 + a) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&t, 3).is_err());
    }

    fn bilinear_oracle(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
        let (_, h, w) = f.dims3().unwrap();
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        f.at3(c, y0, x0) * (1.0 - ly) * (1.0 - lx)
            + f.at3(c, y0, x1) * (1.0 - ly) * lx
            + f.at3(c, y1, x0) * ly * (1.0 - lx)
            + f.at3(c, y1, x1) * ly * lx
    }

    fn roi_oracle(f: &Tensor, b: &BBox, stride: f64, a: usize) -> Tensor {
        let (c, _, _) = f.dims3().unwrap();
        Tensor::from_fn([c, a, a], |i| {
            let (ci, py, px) = (i / (a * a), (i / a) % a, i % a);
            let bw = (b.x2 - b.x1) / stride / a as f64;
            let bh = (b.y2 - b.y1) / stride / a as f64;
            let mut acc = 0.0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let y = b.y1 / stride + (py as f64 + sy) * bh;
                    let x = b.x1 / stride + (px as f64 + sx) * bw;
                    acc += bilinear_oracle(f, ci, y, x);
                }
            }
            acc / 4.0
        })
    }

    #[test]
    fn roi_align_constant_ramp_random() {
        let f = Tensor::full([2, 6, 6], 3.25);
        let b = BBox::new(3.0, 5.0, 70.0, 33.0);
        let y = roi_align(&f, &b, 8.0, 7).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));

        let ramp = Tensor::from_fn([1, 8, 8], |i| (i % 8) as f64);
        let b = BBox::new(0.0, 0.0, 56.0, 56.0);
        let y = roi_align(&ramp, &b, 8.0, 4).unwrap();
        assert!(y.max_abs_diff(&roi_oracle(&ramp, &b, 8.0, 4)) < 1e-6);
        // Inside the map a linear ramp is sampled exactly.
        assert!((y.at3(0, 0, 0) - 0.875).abs() < 1e-12);

        let mut r = rng(6);
        for _ in 0..10 {
            let f = Tensor::uniform([3, 9, 7], -1.0, 1.0, &mut r);
            let x1 = r.random_range(-10.0..50.0);
            let y1 = r.random_range(-10.0..60.0);
            let b = BBox::new(x1, y1, x1 + r.random_range(1.0..40.0), y1 + r.random_range(1.0..40.0));
            let y = roi_align(&f, &b, 8.0, 5).unwrap();
            assert!(y.max_abs_diff(&roi_oracle(&f, &b, 8.0, 5)) < 1e-6);
        }
        assert!(roi_align(&f, &BBox::new(1.0, 1.0, 1.0, 5.0), 8.0, 3).is_err());
    }

    #[test]
    fn resize_cases() {
        let c = Tensor::full([2, 3, 5], -0.4);
        let y = bilinear_resize(&c, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.4).abs() < 1e-12));
        let x = Tensor::uniform([3, 4, 6], 0.0, 1.0, &mut rng(7));
        assert_eq!(bilinear_resize(&x, 4, 6).unwrap(), x);

        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let oracle = Tensor::from_fn([1, 4, 4], |i| {
            let (oy, ox) = (i / 4, i % 4);
            let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            bilinear_oracle(&x, 0, sy, sx)
        });
        assert!(y.max_abs_diff(&oracle) < 1e-6);
        // Hand-computed corner and centre values.
        assert!((y.at3(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((y.at3(0, 1, 1) - 1.75).abs() < 1e-12);
        assert!((y.at3(0, 3, 3) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pooling() {
        let x = Tensor::from_fn([1, 4, 4], |i| i as f64);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.shape(), &[1, 1, 1]);
        assert!((g.data()[0] - 7.5).abs() < 1e-12);
    }
}
