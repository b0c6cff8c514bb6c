//! Shared four-stage residual feature extractor.
//!
//! Each stage is a stride-2 3x3 convolution followed by `blocks` residual pairs
//! `y = relu(x + conv(relu(conv(x))))`. Stages 2, 3 and 4 produce the stride
//! 4, 8 and 16 maps used for proposals; stage 4 also feeds the detection head.

use rand::Rng;

use crate::autograd::{Bound, Graph, Var};
use crate::boxes::BBox;
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv};
use crate::tensor::{ParamSet, Tensor};

pub const STAGES: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];
pub const STRIDES: (usize, usize, usize) = (4, 8, 16);
/// Input sides must be a multiple of this.
pub const SIZE_MULTIPLE: usize = 16;

/// Stride 4, 8 and 16 maps.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

/// Materialised pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl PyramidFeatures {
    pub fn strides(&self) -> (usize, usize, usize) {
        STRIDES
    }
}

/// Pooled support features for one chip.
#[derive(Clone, Copy, Debug)]
pub struct SupportVars {
    pub g2: Var,
    pub g3: Var,
    pub g4: Var,
    /// The deepest feature ROI-aligned to `a x a`.
    pub deep: Var,
}

pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, ps: &mut ParamSet, rng: &mut R) -> Result<()> {
    let mut inp = 3;
    for (s, name) in STAGES.iter().enumerate() {
        let w = cfg.widths[s];
        init_conv(ps, &format!("backbone.{name}.down"), w, inp, 3, 1.0, rng)?;
        for b in 0..cfg.blocks[s] {
            init_conv(ps, &format!("backbone.{name}.block{b}.conv1"), w, w, 3, 1.0, rng)?;
            init_conv(ps, &format!("backbone.{name}.block{b}.conv2"), w, w, 3, 0.25, rng)?;
        }
        inp = w;
    }
    Ok(())
}

/// Whether the parameter `key` belongs to a frozen stage.
pub fn is_frozen(cfg: &BackboneConfig, key: &str) -> bool {
    cfg.frozen
        .iter()
        .any(|stage| key.starts_with(&format!("backbone.{stage}.")))
}

/// Normalises an RGB `[3,H,W]` image with the configured mean/std.
pub fn normalize(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("backbone expects 3 channels, got {c}")));
    }
    let plane = h * w;
    Ok(Tensor::from_fn([c, h, w], |i| {
        let ch = i / plane;
        (image.data()[i] - cfg.mean[ch]) / cfg.std[ch]
    }))
}

/// Runs the backbone on an already normalised image var.
pub fn forward(g: &mut Graph, p: &Bound, cfg: &BackboneConfig, x: Var) -> Result<PyramidVars> {
    let (_, h, w) = g.value(x).dims3()?;
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "backbone input {h}x{w} is not a multiple of {SIZE_MULTIPLE}; pad the image first"
        )));
    }
    let mut cur = x;
    let mut outs = Vec::with_capacity(4);
    for (s, name) in STAGES.iter().enumerate() {
        let d = conv(g, p, &format!("backbone.{name}.down"), cur, 2, 1)?;
        cur = g.relu(d);
        for b in 0..cfg.blocks[s] {
            let c1 = conv(g, p, &format!("backbone.{name}.block{b}.conv1"), cur, 1, 1)?;
            let r1 = g.relu(c1);
            let c2 = conv(g, p, &format!("backbone.{name}.block{b}.conv2"), r1, 1, 1)?;
            let sum = g.add(cur, c2)?;
            cur = g.relu(sum);
        }
        outs.push(cur);
    }
    Ok(PyramidVars {
        f2: outs[1],
        f3: outs[2],
        f4: outs[3],
    })
}

/// Normalises and extracts features from a raw image.
pub fn extract_on(g: &mut Graph, p: &Bound, cfg: &BackboneConfig, image: &Tensor) -> Result<PyramidVars> {
    let x = g.constant(normalize(image, cfg)?);
    forward(g, p, cfg, x)
}

/// Pure-tensor feature extraction.
pub fn extract(image: &Tensor, params: &ParamSet, cfg: &BackboneConfig) -> Result<PyramidFeatures> {
    let mut g = Graph::new();
    let p = g.bind(&params.subset("backbone."), false);
    let f = extract_on(&mut g, &p, cfg, image)?;
    Ok(PyramidFeatures {
        f2: g.value(f.f2).clone(),
        f3: g.value(f.f3).clone(),
        f4: g.value(f.f4).clone(),
    })
}

/// Global means of each scale plus the deepest map ROI-aligned over the whole
/// chip extent.
pub fn pool_support_vars(g: &mut Graph, f: &PyramidVars, prototype_size: usize) -> Result<SupportVars> {
    let (_, h4, w4) = g.value(f.f4).dims3()?;
    let s = STRIDES.2 as f64;
    let extent = BBox::new(0.0, 0.0, w4 as f64 * s, h4 as f64 * s);
    Ok(SupportVars {
        g2: g.global_avg_pool(f.f2)?,
        g3: g.global_avg_pool(f.f3)?,
        g4: g.global_avg_pool(f.f4)?,
        deep: g.roi_align(f.f4, extent, s, prototype_size)?,
    })
}

/// Pure-tensor version of [`pool_support_vars`]: `(g2, g3, g4, deep)`.
pub fn pool_support(feat: &PyramidFeatures, prototype_size: usize) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let mut g = Graph::new();
    let f = PyramidVars {
        f2: g.constant(feat.f2.clone()),
        f3: g.constant(feat.f3.clone()),
        f4: g.constant(feat.f4.clone()),
    };
    let s = pool_support_vars(&mut g, &f, prototype_size)?;
    Ok((
        g.value(s.g2).clone(),
        g.value(s.g3).clone(),
        g.value(s.g4).clone(),
        g.value(s.deep).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cfg: &BackboneConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init(cfg, &mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ps
    }

    #[test]
    fn shape_contract_desk_defaults() {
        let cfg = BackboneConfig::default();
        let ps = params(&cfg, 1);
        let img = Tensor::uniform([3, 128, 128], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let f = extract(&img, &ps, &cfg).unwrap();
        assert_eq!(f.f2.shape(), &[32, 32, 32]);
        assert_eq!(f.f3.shape(), &[64, 16, 16]);
        assert_eq!(f.f4.shape(), &[128, 8, 8]);
        let again = extract(&img, &ps, &cfg).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn zero_image_zero_features() {
        let cfg = BackboneConfig {
            mean: [0.0; 3],
            std: [1.0; 3],
            widths: vec![4, 4, 8, 8],
            ..Default::default()
        };
        let ps = params(&cfg, 3);
        let f = extract(&Tensor::zeros([3, 32, 32]), &ps, &cfg).unwrap();
        for t in [&f.f2, &f.f3, &f.f4] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_non_multiple_sizes() {
        let cfg = BackboneConfig::default();
        let ps = params(&cfg, 1);
        let err = extract(&Tensor::zeros([3, 40, 32]), &ps, &cfg).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn support_pooling() {
        let feat = PyramidFeatures {
            f2: Tensor::from_fn([2, 8, 8], |i| (i as f64).sin()),
            f3: Tensor::full([2, 4, 4], 1.0),
            f4: Tensor::full([4, 2, 2], 0.75),
        };
        let (g2, _, g4, deep) = pool_support(&feat, 7).unwrap();
        assert!(deep.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        assert!(g4.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        for c in 0..2 {
            let mean: f64 = feat.f2.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0;
            assert!((g2.data()[c] - mean).abs() < 1e-6);
        }
        let (_, _, g4, deep) = pool_support(&feat, 1).unwrap();
        assert_eq!(deep.shape(), &[4, 1, 1]);
        assert!(deep.max_abs_diff(&g4) < 1e-12);
    }

    #[test]
    fn translation_consistency_at_stride() {
        let cfg = BackboneConfig {
            widths: vec![4, 4, 8, 8],
            ..Default::default()
        };
        let ps = params(&cfg, 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let big = Tensor::uniform([3, 256, 272], 0.0, 1.0, &mut r);
        let crop = |x0: usize| {
            Tensor::from_fn([3, 256, 256], |i| {
                let (c, y, x) = (i / (256 * 256), (i / 256) % 256, i % 256);
                big.at3(c, y, x + x0)
            })
        };
        let a = extract(&crop(0), &ps, &cfg).unwrap().f4;
        let b = extract(&crop(16), &ps, &cfg).unwrap().f4;
        // Interior cells: the receptive field (radius 75 px) stays clear of the
        // zero padding in both crops.
        let c = a.dims3().unwrap().0;
        let mut worst: f64 = 0.0;
        for ch in 0..c {
            for y in 5..=10 {
                for x in 6..=10 {
                    worst = worst.max((a.at3(ch, y, x) - b.at3(ch, y, x - 1)).abs());
                }
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
