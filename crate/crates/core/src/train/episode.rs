//! Turning sampled episodes into tensors and loss graphs.

use std::collections::HashMap;

use rand::Rng;

use crate::aggregation::prototype_vars;
use crate::autograd::{Bound, Graph, Var};
use crate::backbone::{self, STRIDES};
use crate::boxes::{argsort_desc, decode_boxes, BBox};
use crate::config::{ArchConfig, TrainingConfig};
use crate::data::{crop_support, fit_image, Dataset, Episode, SupportInstance};
use crate::error::Result;
use crate::head::{classify_logit, pad_to_multiple, pre_embed_vars, regress_vars};
use crate::proposal::{anchors_for, rpn_forward, scs_fuse, MIN_PROPOSAL_SIDE};
use crate::tensor::Tensor;

use super::losses::{assign_anchors, assign_proposals, loss_vars, HeadTargets, LossInputs, LossVars, RpnTargets};

/// Everything one loss evaluation needs, in network coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTensors {
    /// Fitted and padded query image.
    pub query: Tensor,
    /// Fitted (unpadded) query size `(h, w)`.
    pub image_hw: (usize, usize),
    /// Target boxes scaled to the fitted query.
    pub targets: Vec<BBox>,
    pub chips_c1: Vec<Tensor>,
    pub chips_c2: Vec<Tensor>,
}

/// Memoises decoded query images and support chips.
pub struct ImageCache<'a> {
    dataset: &'a Dataset,
    max_side: usize,
    support_size: usize,
    images: HashMap<usize, (Tensor, f64)>,
    chips: HashMap<u64, Tensor>,
}

impl<'a> ImageCache<'a> {
    pub fn new(dataset: &'a Dataset, max_side: usize, support_size: usize) -> Self {
        ImageCache {
            dataset,
            max_side,
            support_size,
            images: HashMap::new(),
            chips: HashMap::new(),
        }
    }

    fn raw(&self, index: usize) -> Result<Tensor> {
        self.dataset.load_image(index)
    }

    /// Fitted query image and its scale.
    pub fn query(&mut self, index: usize) -> Result<(Tensor, f64)> {
        if let Some(v) = self.images.get(&index) {
            return Ok(v.clone());
        }
        let v = fit_image(&self.raw(index)?, self.max_side)?;
        self.images.insert(index, v.clone());
        Ok(v)
    }

    pub fn chip(&mut self, s: &SupportInstance) -> Result<Tensor> {
        if let Some(c) = self.chips.get(&s.annotation_id) {
            return Ok(c.clone());
        }
        let chip = crop_support(&self.raw(s.image)?, &s.bbox, self.support_size)?.pixels;
        self.chips.insert(s.annotation_id, chip.clone());
        Ok(chip)
    }

    pub fn chips(&mut self, s: &[SupportInstance]) -> Result<Vec<Tensor>> {
        s.iter().map(|s| self.chip(s)).collect()
    }

    pub fn episode(&mut self, ep: &Episode) -> Result<EpisodeTensors> {
        let (img, scale) = self.query(ep.query.image)?;
        let (_, h, w) = img.dims3()?;
        Ok(EpisodeTensors {
            query: pad_to_multiple(&img)?,
            image_hw: (h, w),
            targets: ep.targets.iter().map(|b| b.scale(scale)).collect(),
            chips_c1: self.chips(&ep.supports_c1)?,
            chips_c2: self.chips(&ep.supports_c2)?,
        })
    }
}

/// Proposal candidates for the head loss: the top `head_proposals` decoded
/// anchors by objectness (no suppression) plus the targets themselves.
pub fn head_candidates(
    grid: &crate::boxes::AnchorGrid,
    objectness: &[f64],
    deltas: &[f64],
    targets: &[BBox],
    image_hw: (usize, usize),
    top: usize,
) -> Result<Vec<BBox>> {
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let boxes = decode_boxes(grid, deltas, w, h)?;
    let scores = crate::proposal::anchor_scores(grid, objectness);
    let mut out: Vec<BBox> = argsort_desc(&scores)
        .into_iter()
        .map(|i| boxes[i])
        .filter(|b| b.is_well_formed() && b.width() >= MIN_PROPOSAL_SIDE && b.height() >= MIN_PROPOSAL_SIDE)
        .take(top)
        .collect();
    out.extend_from_slice(targets);
    Ok(out)
}

/// Sampled anchors and proposal boxes of one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTargets {
    pub rpn: RpnTargets,
    pub head: HeadTargets,
}

struct Forward {
    q: crate::backbone::PyramidVars,
    e_pos: Var,
    e_neg: Var,
    rpn: crate::proposal::RpnOutput,
    grid: crate::boxes::AnchorGrid,
}

fn forward(g: &mut Graph, p: &Bound, arch: &ArchConfig, ep: &EpisodeTensors) -> Result<Forward> {
    let q = backbone::extract_on(g, p, &arch.backbone, &ep.query)?;
    let pos = prototype_vars(g, p, arch, &ep.chips_c1)?;
    let neg = prototype_vars(g, p, arch, &ep.chips_c2)?;
    let fused = scs_fuse(g, p, arch, &q, &pos.kernels)?;
    let rpn = rpn_forward(g, p, fused)?;
    let (_, fh, fw) = g.value(fused).dims3()?;
    let grid = anchors_for(arch, (fh, fw))?;
    Ok(Forward {
        q,
        e_pos: pos.e,
        e_neg: neg.e,
        rpn,
        grid,
    })
}

fn head_loss(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    cfg: &TrainingConfig,
    f: &Forward,
    targets: &EpisodeTargets,
) -> Result<LossVars> {
    let a = arch.relation.prototype_size;
    let mut zp: Vec<Var> = Vec::new();
    let mut zn: Vec<Var> = Vec::new();
    let mut ds: Vec<Var> = Vec::new();
    for b in &targets.head.boxes {
        let pooled = g.roi_align(f.q.f4, *b, STRIDES.2 as f64, a)?;
        let l = pre_embed_vars(g, p, arch, pooled, f.e_pos)?;
        ds.push(regress_vars(g, p, l)?);
        zp.push(classify_logit(g, p, pooled, f.e_pos)?);
        zn.push(classify_logit(g, p, pooled, f.e_neg)?);
    }
    let empty = |g: &mut Graph| g.constant(Tensor::zeros([0]));
    let (cls_pos, cls_neg, head_deltas) = if ds.is_empty() {
        (empty(g), empty(g), empty(g))
    } else {
        (g.concat(&zp)?, g.concat(&zn)?, g.concat(&ds)?)
    };
    let inputs = LossInputs {
        rpn_logits: f.rpn.logits,
        rpn_deltas: f.rpn.deltas,
        cls_pos,
        cls_neg,
        head_deltas,
    };
    loss_vars(g, &inputs, &f.grid, &targets.rpn, &targets.head, cfg)
}

/// Builds the full episode loss on `g`, sampling anchors and proposals with
/// `rng`. Proposal boxes are constants of the graph.
pub fn episode_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    cfg: &TrainingConfig,
    ep: &EpisodeTensors,
    rng: &mut R,
) -> Result<(LossVars, EpisodeTargets)> {
    let f = forward(g, p, arch, ep)?;
    let rpn = assign_anchors(&f.grid, &ep.targets, cfg, rng);
    let cands = head_candidates(
        &f.grid,
        g.value(f.rpn.objectness).data(),
        g.value(f.rpn.deltas).data(),
        &ep.targets,
        ep.image_hw,
        cfg.head_proposals,
    )?;
    let head = assign_proposals(&cands, &ep.targets, cfg, rng);
    let targets = EpisodeTargets { rpn, head };
    let loss = head_loss(g, p, arch, cfg, &f, &targets)?;
    Ok((loss, targets))
}

/// The episode loss for already sampled targets; a smooth function of the
/// parameters.
pub fn episode_loss_fixed(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    cfg: &TrainingConfig,
    ep: &EpisodeTensors,
    targets: &EpisodeTargets,
) -> Result<LossVars> {
    let f = forward(g, p, arch, ep)?;
    head_loss(g, p, arch, cfg, &f, targets)
}
