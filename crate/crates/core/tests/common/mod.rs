//! Scalar reference implementations used as test oracles.
//!
//! Everything here is written with plain loops over `Vec<f64>` and shares no
//! code with the library beyond the `Tensor` container.

#![allow(dead_code)]

use airdet::tensor::{ParamSet, Tensor};
use airdet::BBox;

pub fn at(t: &Tensor, c: usize, y: isize, x: isize) -> f64 {
    let s = t.shape();
    let (h, w) = (s[1] as isize, s[2] as isize);
    if y < 0 || x < 0 || y >= h || x >= w {
        0.0
    } else {
        t.data()[(c * s[1] + y as usize) * s[2] + x as usize]
    }
}

/// Zero-padded cross-correlation with `[out, in, k, k]` weights.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let sy = (y * stride + u) as isize - pad as isize;
                            let sx = (xx * stride + v) as isize - pad as isize;
                            acc += w.data()[((o * cin + i) * k + u) * k + v] * at(x, i, sy, sx);
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    Tensor::new([cout, ho, wo], out).unwrap()
}

/// Per-channel correlation of `x` with a `[C, k, k]` kernel.
pub fn depthwise(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = k.shape()[1];
    let ho = h + 2 * pad - ks + 1;
    let wo = w + 2 * pad - ks + 1;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for u in 0..ks {
                    for v in 0..ks {
                        let sy = (y + u) as isize - pad as isize;
                        let sx = (xx + v) as isize - pad as isize;
                        acc += k.data()[(ch * ks + u) * ks + v] * at(x, ch, sy, sx);
                    }
                }
                out[(ch * ho + y) * wo + xx] = acc;
            }
        }
    }
    Tensor::new([c, ho, wo], out).unwrap()
}

/// `W · flatten(x) + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), i);
    (0..o)
        .map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x.data()[c]).sum::<f64>())
        .collect()
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut d = a.data().to_vec();
    d.extend_from_slice(b.data());
    Tensor::new(shape, d).unwrap()
}

pub fn layer_conv(ps: &ParamSet, name: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    conv2d(
        x,
        ps.get(&format!("{name}.weight")).unwrap(),
        ps.get(&format!("{name}.bias")).unwrap(),
        stride,
        pad,
    )
}

pub fn layer_linear(ps: &ParamSet, name: &str, x: &Tensor) -> Vec<f64> {
    linear(x, ps.get(&format!("{name}.weight")).unwrap(), ps.get(&format!("{name}.bias")).unwrap())
}

/// Channel relation `Conv3x3(Cat(a, b)) + Cat(Conv1x1(a), Conv1x1(b))`.
pub fn channel_relation(ps: &ParamSet, prefix: &str, a: &Tensor, b: &Tensor) -> Tensor {
    let key = |p: &str| format!("{prefix}.relation.channel.{p}");
    let mixed = layer_conv(ps, &key("cat"), &cat(a, b), 1, 1);
    let split = cat(&layer_conv(ps, &key("a"), a, 1, 0), &layer_conv(ps, &key("b"), b, 1, 0));
    add(&mixed, &split)
}

/// Shot aggregation: returns `(e, M_i)`.
pub fn aggregate(ps: &ParamSet, shots: &[Tensor]) -> (Tensor, Vec<Tensor>) {
    let k = shots.len();
    let convs: Vec<Tensor> = shots.iter().map(|s| layer_conv(ps, "glr.conv", s, 1, 1)).collect();
    let n = convs[0].len();
    let mean = Tensor::new(
        convs[0].shape().to_vec(),
        (0..n).map(|i| convs.iter().map(|c| c.data()[i]).sum::<f64>() / k as f64).collect(),
    )
    .unwrap();
    let logits: Vec<Tensor> = convs
        .iter()
        .map(|c| {
            let f = channel_relation(ps, "glr", c, &mean);
            let h = relu(&layer_conv(ps, "glr.mlp1", &f, 1, 0));
            layer_conv(ps, "glr.mlp2", &h, 1, 0)
        })
        .collect();
    let mut m = vec![vec![0.0; n]; k];
    for i in 0..n {
        let mx = logits.iter().map(|z| z.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|z| (z.data()[i] - mx).exp()).collect();
        let s: f64 = ex.iter().sum();
        for j in 0..k {
            m[j][i] = ex[j] / s;
        }
    }
    let e: Vec<f64> = (0..n).map(|i| (0..k).map(|j| shots[j].data()[i] * m[j][i]).sum()).collect();
    let shape = shots[0].shape().to_vec();
    (
        Tensor::new(shape.clone(), e).unwrap(),
        m.into_iter().map(|v| Tensor::new(shape.clone(), v).unwrap()).collect(),
    )
}

/// `l = p + R_s(p, e)` with the learned spatial relation under `pre`.
pub fn pre_embed(ps: &ParamSet, p: &Tensor, e: &Tensor, kernel: usize) -> Tensor {
    let c = p.shape()[0];
    let key = |s: &str| format!("pre.relation.spatial.{s}");
    let fe = layer_conv(ps, &key("conv"), e, 1, kernel / 2);
    let h: Vec<f64> = layer_linear(ps, &key("mlp1"), &fe).into_iter().map(|v| v.max(0.0)).collect();
    let h = Tensor::new([h.len()], h).unwrap();
    let k = Tensor::new([c, kernel, kernel], layer_linear(ps, &key("mlp2"), &h)).unwrap();
    add(p, &depthwise(p, &k, kernel / 2))
}

/// Bilinear sample of channel `c` at continuous `(y, x)`, clamped to the map.
pub fn bilinear(t: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor(), x.floor());
    let (y1, x1) = ((y0 + 1.0).min((h - 1) as f64), (x0 + 1.0).min((w - 1) as f64));
    let (dy, dx) = (y - y0, x - x0);
    let v = |yy: f64, xx: f64| at(t, c, yy as isize, xx as isize);
    v(y0, x0) * (1.0 - dy) * (1.0 - dx) + v(y0, x1) * (1.0 - dy) * dx + v(y1, x0) * dy * (1.0 - dx) + v(y1, x1) * dy * dx
}

/// ROI-align with a 2x2 sampling grid per bin.
pub fn roi_align(t: &Tensor, b: &BBox, stride: f64, out: usize) -> Tensor {
    let c = t.shape()[0];
    let bw = (b.x2 - b.x1) / stride / out as f64;
    let bh = (b.y2 - b.y1) / stride / out as f64;
    let mut d = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for py in 0..out {
            for px in 0..out {
                let mut s = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        let y = b.y1 / stride + (py as f64 + sy) * bh;
                        let x = b.x1 / stride + (px as f64 + sx) * bw;
                        s += bilinear(t, ch, y, x);
                    }
                }
                d.push(s / 4.0);
            }
        }
    }
    Tensor::new([c, out, out], d).unwrap()
}

/// Half-pixel-centre resize.
pub fn resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut d = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
                let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
                d.push(bilinear(t, ch, sy, sx));
            }
        }
    }
    Tensor::new([c, oh, ow], d).unwrap()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy suppression by repeated arg-max; ties go to the lower index.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) > thresh {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn bce(z: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// `(dx, dy, dw, dh)` from reference `a` to target `b`.
pub fn encode(a: &BBox, b: &BBox) -> [f64; 4] {
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let (bw, bh) = (b.x2 - b.x1, b.y2 - b.y1);
    [
        ((b.x1 + b.x2) / 2.0 - (a.x1 + a.x2) / 2.0) / aw,
        ((b.y1 + b.y2) / 2.0 - (a.y1 + a.y2) / 2.0) / ah,
        (bw / aw).ln(),
        (bh / ah).ln(),
    ]
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
