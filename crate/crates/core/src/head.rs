//! Detection head and the end-to-end detection procedure.
//!
//! Each proposal feature `p` is compared with the class exemplar `e`:
//!
//! * box regression runs on `l = p + R_s(p, e)`, a learned spatial relation
//!   with a 3x3 kernel, through a two-layer MLP producing four deltas;
//! * the score is the logistic of the sum of three relation logits (global,
//!   local and patch).
//!
//! Detection runs every class independently and merges all candidates into
//! one ranked list. Parameters are only read.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{build_prototype, prototype_constants, ClassPrototype};
use crate::autograd::{Bound, Graph, Var};
use crate::backbone::{self, SIZE_MULTIPLE};
use crate::boxes::{nms, BBox};
use crate::config::{ArchConfig, RankBy};
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv, init_linear, linear};
use crate::proposal::propose;
use crate::relation::SpatialRelation;
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u64,
    pub score: f64,
}

fn pre_relation(arch: &ArchConfig) -> SpatialRelation {
    let a = arch.relation.prototype_size;
    SpatialRelation::new("pre", arch.backbone.widths[3], arch.relation.pre_kernel, (a, a))
}

pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, ps: &mut ParamSet, rng: &mut R) -> Result<()> {
    let c = arch.backbone.widths[3];
    let a = arch.relation.prototype_size;
    let flat = c * a * a;
    let hidden = arch.head.reg_hidden;
    pre_relation(arch).init(ps, 0.0, rng)?;
    init_linear(ps, "head.reg1", hidden, flat, (2.0 / flat as f64).sqrt(), rng)?;
    init_linear(ps, "head.reg2", 4, hidden, 0.01, rng)?;
    init_linear(ps, "head.cls.global1", c, 2 * c, (1.0 / c as f64).sqrt(), rng)?;
    init_linear(ps, "head.cls.global2", 1, c, 0.01, rng)?;
    init_linear(ps, "head.cls.local", 1, c, 0.01, rng)?;
    init_conv(ps, "head.cls.patch1", c, 2 * c, 3, 1.0, rng)?;
    init_conv(ps, "head.cls.patch2", c, c, 3, 1.0, rng)?;
    init_linear(ps, "head.cls.patch", 1, c, 0.01, rng)
}

fn same_shape(g: &Graph, p: Var, e: Var) -> Result<()> {
    if g.value(p).shape() != g.value(e).shape() {
        return Err(Error::shape(format!(
            "proposal feature {:?} and exemplar {:?} differ",
            g.value(p).shape(),
            g.value(e).shape()
        )));
    }
    Ok(())
}

/// `l = p + R_s(p, e)`; with `relation.pre` off, `l = p`.
pub fn pre_embed_vars(g: &mut Graph, params: &Bound, arch: &ArchConfig, p: Var, e: Var) -> Result<Var> {
    same_shape(g, p, e)?;
    let k = pre_kernel_vars(g, params, arch, e)?;
    pre_embed_with(g, arch, p, k)
}

/// The correlation kernel `R_s` derives from the exemplar; `None` with
/// `relation.pre` off. Depends on the class only.
pub fn pre_kernel_vars(g: &mut Graph, params: &Bound, arch: &ArchConfig, e: Var) -> Result<Option<Var>> {
    if !arch.relation.pre {
        return Ok(None);
    }
    pre_relation(arch).kernel_from(g, params, e).map(Some)
}

/// [`pre_embed_vars`] with a kernel from [`pre_kernel_vars`].
pub fn pre_embed_with(g: &mut Graph, arch: &ArchConfig, p: Var, kernel: Option<Var>) -> Result<Var> {
    let Some(k) = kernel else { return Ok(p) };
    let r = g.depthwise(p, k, arch.relation.pre_kernel / 2)?;
    g.add(p, r)
}

/// Four class-agnostic deltas `(dx, dy, dw, dh)` as a `[4]` var.
pub fn regress_vars(g: &mut Graph, params: &Bound, l: Var) -> Result<Var> {
    let h = linear(g, params, "head.reg1", l)?;
    let h = g.relu(h);
    linear(g, params, "head.reg2", h)
}

/// Per-branch `[1]` logits `(global, local, patch)`.
pub fn branch_logits(g: &mut Graph, params: &Bound, p: Var, e: Var) -> Result<[Var; 3]> {
    same_shape(g, p, e)?;
    let gp = g.global_avg_pool(p)?;
    let ge = g.global_avg_pool(e)?;
    let cat = g.concat(&[gp, ge])?;
    let h = linear(g, params, "head.cls.global1", cat)?;
    let h = g.relu(h);
    let global = linear(g, params, "head.cls.global2", h)?;

    let corr = g.depthwise(p, ge, 0)?;
    let pooled = g.global_avg_pool(corr)?;
    let local = linear(g, params, "head.cls.local", pooled)?;

    let pair = g.concat(&[p, e])?;
    let h = conv(g, params, "head.cls.patch1", pair, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, params, "head.cls.patch2", h, 1, 1)?;
    let h = g.relu(h);
    let pooled = g.global_avg_pool(h)?;
    let patch = linear(g, params, "head.cls.patch", pooled)?;
    Ok([global, local, patch])
}

/// Summed classifier logit, `[1]`.
pub fn classify_logit(g: &mut Graph, params: &Bound, p: Var, e: Var) -> Result<Var> {
    let [a, b, c] = branch_logits(g, params, p, e)?;
    g.add_n(&[a, b, c])
}

fn with_graph<T>(params: &ParamSet, f: impl FnOnce(&mut Graph, &Bound) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    let b = g.bind(params, false);
    f(&mut g, &b)
}

pub fn pre_embed(p: &Tensor, e: &Tensor, params: &ParamSet, arch: &ArchConfig) -> Result<Tensor> {
    with_graph(params, |g, b| {
        let (pv, ev) = (g.constant(p.clone()), g.constant(e.clone()));
        let l = pre_embed_vars(g, b, arch, pv, ev)?;
        Ok(g.value(l).clone())
    })
}

pub fn regress(l: &Tensor, params: &ParamSet) -> Result<[f64; 4]> {
    with_graph(params, |g, b| {
        let lv = g.constant(l.clone());
        let d = regress_vars(g, b, lv)?;
        let d = g.value(d).data();
        Ok([d[0], d[1], d[2], d[3]])
    })
}

/// Score in `[0, 1]`.
pub fn classify(p: &Tensor, e: &Tensor, params: &ParamSet) -> Result<f64> {
    with_graph(params, |g, b| {
        let (pv, ev) = (g.constant(p.clone()), g.constant(e.clone()));
        let z = classify_logit(g, b, pv, ev)?;
        Ok(crate::nn::sigmoid(g.value(z).data()[0]))
    })
}

/// Zero-pads the bottom and right edges up to a multiple of 16.
pub fn pad_to_multiple(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let round = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
    let (ph, pw) = (round(h), round(w));
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros([c, ph, pw]);
    let data = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * ph + y) * pw;
            data[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
        }
    }
    Ok(out)
}

/// Detection against precomputed class prototypes.
pub fn detect_with_prototypes(
    image: &Tensor,
    prototypes: &[ClassPrototype],
    params: &ParamSet,
    arch: &ArchConfig,
) -> Result<Vec<Detection>> {
    let (_, h, w) = image.dims3()?;
    let padded = pad_to_multiple(image)?;
    let mut g = Graph::new();
    let b = g.bind(params, false);
    let q = backbone::extract_on(&mut g, &b, &arch.backbone, &padded)?;
    let mut candidates = Vec::new();
    for proto in prototypes {
        let pv = prototype_constants(&mut g, proto);
        let kernel = pre_kernel_vars(&mut g, &b, arch, pv.e)?;
        let mark = g.len();
        let props = propose(&mut g, &b, arch, &q, &pv.kernels, proto.class_id, (h, w))?;
        let inner = g.len();
        for prop in props {
            g.truncate(inner);
            let p = g.constant(prop.pooled_feature);
            let l = pre_embed_with(&mut g, arch, p, kernel)?;
            let d = regress_vars(&mut g, &b, l)?;
            let d = g.value(d).data();
            let bbox = prop.bbox.apply_deltas([d[0], d[1], d[2], d[3]])?.clip(w as f64, h as f64);
            if !bbox.is_well_formed() {
                continue;
            }
            let z = classify_logit(&mut g, &b, p, pv.e)?;
            let cls = crate::nn::sigmoid(g.value(z).data()[0]);
            let score = match arch.head.rank_by {
                RankBy::Classifier => cls,
                RankBy::Objectness => prop.objectness,
            };
            candidates.push(Detection {
                bbox,
                class_id: proto.class_id,
                score,
            });
        }
        g.truncate(mark);
    }
    Ok(merge(candidates, arch))
}

/// Ranks all candidates by score (stable, so ties keep class then proposal
/// order), optionally suppresses across classes, and keeps the top
/// `head.max_detections`.
pub fn merge(mut candidates: Vec<Detection>, arch: &ArchConfig) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    if arch.head.cross_class_nms {
        let boxes: Vec<BBox> = candidates.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = candidates.iter().map(|d| d.score).collect();
        if let Ok(kept) = nms(&boxes, &scores, arch.head.cross_class_nms_thresh) {
            candidates = kept.into_iter().map(|i| candidates[i]).collect();
        }
    }
    candidates.truncate(arch.head.max_detections);
    candidates
}

/// Full detection from raw support chips. Never modifies `params`.
pub fn detect(
    image: &Tensor,
    supports: &BTreeMap<u64, Vec<Tensor>>,
    params: &ParamSet,
    arch: &ArchConfig,
) -> Result<Vec<Detection>> {
    let mut protos = Vec::with_capacity(supports.len());
    for (&class_id, chips) in supports {
        if chips.is_empty() {
            return Err(Error::InsufficientSupport {
                class: class_id,
                available: 0,
                required: 1,
            });
        }
        protos.push(build_prototype(params, arch, class_id, chips)?);
    }
    detect_with_prototypes(image, &protos, params, arch)
}
