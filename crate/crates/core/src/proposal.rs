//! Support-guided cross-scale fusion and the region proposal network.
//!
//! Fusion, per class prototype:
//!
//! 1. each query scale is correlated with the matching support kernel (fixed
//!    average spatial relation, 1x1 kernels);
//! 2. the stride-4 and stride-8 maps are projected to the stride-16 width by 1x1
//!    convolutions and average-pooled down to the stride-16 grid;
//! 3. a channel relation fuses them (stride-4 path first), and the result is
//!    added to the stride-16 relation map.
//!
//! The fused map feeds a 3x3 conv trunk with 1x1 objectness and delta heads.

use rand::Rng;

use crate::autograd::{Bound, Graph, Var};
use crate::backbone::{PyramidVars, STRIDES};
use crate::boxes::{argsort_desc, decode_boxes, generate_anchors, nms, AnchorGrid, BBox};
use crate::config::{ArchConfig, ProposalConfig};
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv};
use crate::relation::{correlate_with_kernel, ChannelRelation};
use crate::tensor::{ParamSet, Tensor};

/// Boxes narrower or shorter than this (pixels) are discarded before NMS.
pub const MIN_PROPOSAL_SIDE: f64 = 1.0;

/// Per-scale support kernels, each `[C_s, 1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ScsKernels {
    pub g2: Var,
    pub g3: Var,
    pub g4: Var,
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Support class that guided the fusion.
    pub class_id: u64,
    /// The stride-16 query feature ROI-aligned to `a x a`.
    pub pooled_feature: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[A, H, W]` pre-logistic scores.
    pub logits: Var,
    /// `[A, H, W]` objectness in `[0, 1]`.
    pub objectness: Var,
    /// `[4A, H, W]`, four consecutive channels per anchor.
    pub deltas: Var,
}

fn channel_relation(arch: &ArchConfig) -> Result<ChannelRelation> {
    ChannelRelation::new("scs", arch.backbone.widths[3])
}

pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, ps: &mut ParamSet, rng: &mut R) -> Result<()> {
    let w = &arch.backbone.widths;
    let c4 = w[3];
    init_conv(ps, "scs.proj2", c4, w[1], 1, 1.0, rng)?;
    init_conv(ps, "scs.proj3", c4, w[2], 1, 1.0, rng)?;
    channel_relation(arch)?.init(ps, 0.0, rng)?;
    let a = arch.anchors_per_cell();
    init_conv(ps, "rpn.conv", c4, c4, 3, 1.0, rng)?;
    init_conv(ps, "rpn.obj", a, c4, 1, 0.1, rng)?;
    init_conv(ps, "rpn.delta", 4 * a, c4, 1, 0.1, rng)
}

/// Fuses query features with one class's support kernels into a stride-16 map.
/// With `relation.scs` off only the stride-16 relation is used.
pub fn scs_fuse(g: &mut Graph, p: &Bound, arch: &ArchConfig, q: &PyramidVars, k: &ScsKernels) -> Result<Var> {
    let r4 = correlate_with_kernel(g, q.f4, k.g4)?;
    if !arch.relation.scs {
        return Ok(r4);
    }
    let r2 = correlate_with_kernel(g, q.f2, k.g2)?;
    let r3 = correlate_with_kernel(g, q.f3, k.g3)?;
    let p2 = conv(g, p, "scs.proj2", r2, 1, 0)?;
    let p2 = g.avg_pool2(p2)?;
    let p2 = g.avg_pool2(p2)?;
    let p3 = conv(g, p, "scs.proj3", r3, 1, 0)?;
    let p3 = g.avg_pool2(p3)?;
    let fused = channel_relation(arch)?.forward(g, p, p2, p3)?;
    if g.value(fused).shape() != g.value(r4).shape() {
        return Err(Error::shape(format!(
            "fused map {:?} does not match stride-16 map {:?}",
            g.value(fused).shape(),
            g.value(r4).shape()
        )));
    }
    g.add(fused, r4)
}

pub fn rpn_forward(g: &mut Graph, p: &Bound, fused: Var) -> Result<RpnOutput> {
    let t = conv(g, p, "rpn.conv", fused, 1, 1)?;
    let t = g.relu(t);
    let logits = conv(g, p, "rpn.obj", t, 1, 0)?;
    let objectness = g.sigmoid(logits);
    let deltas = conv(g, p, "rpn.delta", t, 1, 0)?;
    Ok(RpnOutput {
        logits,
        objectness,
        deltas,
    })
}

/// Anchors for a stride-16 map of the given size.
pub fn anchors_for(arch: &ArchConfig, fshape: (usize, usize)) -> Result<AnchorGrid> {
    generate_anchors(fshape, STRIDES.2 as f64, &arch.anchors.scales, &arch.anchors.ratios)
}

/// Objectness value of every anchor, in [`AnchorGrid::anchors`] order.
pub fn anchor_scores(grid: &AnchorGrid, objectness: &[f64]) -> Vec<f64> {
    let plane = grid.height * grid.width;
    (0..grid.len())
        .map(|n| {
            let (a, i, j) = grid.map_index(n);
            objectness[a * plane + i * grid.width + j]
        })
        .collect()
}

/// Decode, keep the `pre_nms_top` best, suppress at `nms_thresh`, keep
/// `post_nms_top`. Returns `(box, objectness)` sorted by objectness.
pub fn select_proposals(
    grid: &AnchorGrid,
    objectness: &[f64],
    deltas: &[f64],
    image_hw: (usize, usize),
    cfg: &ProposalConfig,
) -> Result<Vec<(BBox, f64)>> {
    let boxes = decode_boxes(grid, deltas, image_hw.1 as f64, image_hw.0 as f64)?;
    let scores = anchor_scores(grid, objectness);
    let candidates: Vec<usize> = argsort_desc(&scores)
        .into_iter()
        .filter(|&i| boxes[i].width() >= MIN_PROPOSAL_SIDE && boxes[i].height() >= MIN_PROPOSAL_SIDE)
        .take(cfg.pre_nms_top)
        .collect();
    let cb: Vec<BBox> = candidates.iter().map(|&i| boxes[i]).collect();
    let cs: Vec<f64> = candidates.iter().map(|&i| scores[i]).collect();
    let kept = nms(&cb, &cs, cfg.nms_thresh)?;
    Ok(kept
        .into_iter()
        .take(cfg.post_nms_top)
        .map(|i| (cb[i], cs[i]))
        .collect())
}

/// Full proposal stage for one class: fusion, RPN, decoding, NMS and pooling of
/// each kept box from the stride-16 query map.
pub fn propose(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    q: &PyramidVars,
    kernels: &ScsKernels,
    class_id: u64,
    image_hw: (usize, usize),
) -> Result<Vec<Proposal>> {
    let fused = scs_fuse(g, p, arch, q, kernels)?;
    let rpn = rpn_forward(g, p, fused)?;
    let (_, fh, fw) = g.value(fused).dims3()?;
    let grid = anchors_for(arch, (fh, fw))?;
    let selected = select_proposals(
        &grid,
        g.value(rpn.objectness).data(),
        g.value(rpn.deltas).data(),
        image_hw,
        &arch.proposal,
    )?;
    let a = arch.relation.prototype_size;
    let f4 = g.value(q.f4).clone();
    selected
        .into_iter()
        .map(|(bbox, objectness)| {
            Ok(Proposal {
                bbox,
                objectness,
                class_id,
                pooled_feature: crate::nn::roi_align(&f4, &bbox, STRIDES.2 as f64, a)?,
            })
        })
        .collect()
}
