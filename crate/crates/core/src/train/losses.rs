//! Episode losses.
//!
//! * RPN: anchors with IoU >= `rpn_pos_iou` against a target box (or the best
//!   anchor of each box) are positives, anchors with IoU < `rpn_neg_iou`
//!   negatives. Up to `rpn_batch` anchors are sampled with at most
//!   `rpn_pos_fraction` positives. Objectness uses binary cross-entropy
//!   averaged over the sample, deltas use smooth L1 averaged over positives.
//! * Head: candidate boxes are labelled positive at IoU >= `head_pos_iou`.
//!   Every sampled box is scored against the episode class (target = label)
//!   and against the contrastive class (target 0); the classification loss is
//!   the mean over both. Box deltas use smooth L1 averaged over positives.
//!
//! The total is the unweighted sum of the four terms.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{iou, AnchorGrid, BBox};
use crate::config::TrainingConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub box_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rpn_objectness, self.rpn_box, self.cls, self.box_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Sampled anchors for the RPN loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    /// Anchor indices in [`AnchorGrid::anchors`] order.
    pub sampled: Vec<usize>,
    /// 1 for positives, 0 for negatives, aligned with `sampled`.
    pub labels: Vec<f64>,
    /// Positive anchors with their regression targets.
    pub positives: Vec<(usize, [f64; 4])>,
}

/// Sampled candidate boxes for the head loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadTargets {
    pub boxes: Vec<BBox>,
    pub labels: Vec<f64>,
    /// Regression target of each positive box, aligned with `boxes`.
    pub deltas: Vec<Option<[f64; 4]>>,
}

fn best_match(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (i, iou(b, g)))
        .fold(None, |acc, (i, v)| match acc {
            Some((_, best)) if best >= v => acc,
            _ => Some((i, v)),
        })
}

fn sample_split<R: Rng + ?Sized>(pos: Vec<usize>, neg: Vec<usize>, batch: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let max_pos = ((batch as f64 * fraction).floor() as usize).min(pos.len());
    let pick = |v: Vec<usize>, k: usize, rng: &mut R| -> Vec<usize> {
        let mut idx: Vec<usize> = sample(rng, v.len(), k.min(v.len())).into_iter().map(|i| v[i]).collect();
        idx.sort_unstable();
        idx
    };
    let p = pick(pos, max_pos, rng);
    let n = pick(neg, batch - p.len(), rng);
    (p, n)
}

pub fn assign_anchors<R: Rng + ?Sized>(grid: &AnchorGrid, gts: &[BBox], cfg: &TrainingConfig, rng: &mut R) -> RpnTargets {
    let n = grid.len();
    let mut best = vec![(0usize, 0.0f64); n];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (a, anchor) in grid.anchors.iter().enumerate() {
        if let Some((g, v)) = best_match(anchor, gts) {
            best[a] = (g, v);
        }
        for (g, gt) in gts.iter().enumerate() {
            gt_best[g] = gt_best[g].max(iou(anchor, gt));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let (g, v) = best[a];
        let forced = gts
            .iter()
            .enumerate()
            .any(|(k, gt)| gt_best[k] > 0.0 && iou(anchor, gt) == gt_best[k]);
        if !gts.is_empty() && (v >= cfg.rpn_pos_iou || forced) {
            let _ = g;
            pos.push(a);
        } else if v < cfg.rpn_neg_iou {
            neg.push(a);
        }
    }
    let (p, ng) = sample_split(pos, neg, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    let mut targets = RpnTargets::default();
    for &a in &p {
        let anchor = &grid.anchors[a];
        let forced = gts
            .iter()
            .enumerate()
            .find(|(k, gt)| gt_best[*k] > 0.0 && iou(anchor, gt) == gt_best[*k] && best[a].1 < cfg.rpn_pos_iou);
        let g = forced.map_or(best[a].0, |(k, _)| k);
        targets.sampled.push(a);
        targets.labels.push(1.0);
        targets.positives.push((a, anchor.encode(&gts[g])));
    }
    for &a in &ng {
        targets.sampled.push(a);
        targets.labels.push(0.0);
    }
    targets
}

pub fn assign_proposals<R: Rng + ?Sized>(candidates: &[BBox], gts: &[BBox], cfg: &TrainingConfig, rng: &mut R) -> HeadTargets {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut matched = vec![None; candidates.len()];
    for (i, b) in candidates.iter().enumerate() {
        match best_match(b, gts) {
            Some((g, v)) if v >= cfg.head_pos_iou => {
                matched[i] = Some(g);
                pos.push(i);
            }
            _ => neg.push(i),
        }
    }
    let (p, n) = sample_split(pos, neg, cfg.head_batch, cfg.head_pos_fraction, rng);
    let mut t = HeadTargets::default();
    for &i in &p {
        let g = matched[i].expect("positives are matched");
        t.boxes.push(candidates[i]);
        t.labels.push(1.0);
        t.deltas.push(Some(candidates[i].encode(&gts[g])));
    }
    for &i in &n {
        t.boxes.push(candidates[i]);
        t.labels.push(0.0);
        t.deltas.push(None);
    }
    t
}

/// Loss terms on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub cls: Var,
    pub box_reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).data()[0];
        LossReport {
            rpn_objectness: v(self.rpn_objectness),
            rpn_box: v(self.rpn_box),
            cls: v(self.cls),
            box_reg: v(self.box_reg),
            total: v(self.total),
        }
    }
}

/// Network outputs an episode loss is computed from.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    /// `[A, H, W]` objectness logits.
    pub rpn_logits: Var,
    /// `[4A, H, W]`.
    pub rpn_deltas: Var,
    /// `[n]` logits of each sampled box against the episode class.
    pub cls_pos: Var,
    /// `[n]` logits against the contrastive class.
    pub cls_neg: Var,
    /// `[4n]` head deltas, four per sampled box.
    pub head_deltas: Var,
}

fn zero(g: &mut Graph) -> Var {
    g.constant(crate::tensor::Tensor::scalar(0.0))
}

pub fn loss_vars(
    g: &mut Graph,
    out: &LossInputs,
    grid: &AnchorGrid,
    rpn: &RpnTargets,
    head: &HeadTargets,
    cfg: &TrainingConfig,
) -> Result<LossVars> {
    let plane = grid.height * grid.width;
    let flat = |a: usize, t: usize| {
        let (k, i, j) = grid.map_index(a);
        (4 * k + t) * plane + i * grid.width + j
    };
    let n_rpn = rpn.sampled.len().max(1) as f64;
    let rpn_objectness = if rpn.sampled.is_empty() {
        zero(g)
    } else {
        let idx = rpn
            .sampled
            .iter()
            .map(|&a| {
                let (k, i, j) = grid.map_index(a);
                k * plane + i * grid.width + j
            })
            .collect();
        let z = g.gather(out.rpn_logits, idx)?;
        let s = g.bce_with_logits(z, rpn.labels.clone())?;
        g.scale(s, 1.0 / n_rpn)
    };
    let rpn_box = if rpn.positives.is_empty() {
        log::debug!("episode has no positive anchors");
        zero(g)
    } else {
        let idx = rpn.positives.iter().flat_map(|&(a, _)| (0..4).map(move |t| flat(a, t))).collect();
        let target = rpn.positives.iter().flat_map(|(_, d)| d.iter().copied()).collect();
        let d = g.gather(out.rpn_deltas, idx)?;
        let s = g.smooth_l1(d, target, cfg.rpn_beta)?;
        g.scale(s, 1.0 / rpn.positives.len() as f64)
    };
    let n_head = head.boxes.len();
    if g.value(out.cls_pos).len() != n_head || g.value(out.cls_neg).len() != n_head || g.value(out.head_deltas).len() != 4 * n_head {
        return Err(Error::shape(format!("head outputs do not cover {n_head} sampled boxes")));
    }
    let (cls, box_reg) = if n_head == 0 {
        (zero(g), zero(g))
    } else {
        let lp = g.bce_with_logits(out.cls_pos, head.labels.clone())?;
        let ln = g.bce_with_logits(out.cls_neg, vec![0.0; n_head])?;
        let sum = g.add(lp, ln)?;
        let cls = g.scale(sum, 1.0 / (2 * n_head) as f64);
        let pos: Vec<usize> = (0..n_head).filter(|&i| head.deltas[i].is_some()).collect();
        let box_reg = if pos.is_empty() {
            zero(g)
        } else {
            let idx = pos.iter().flat_map(|&i| (0..4).map(move |t| 4 * i + t)).collect();
            let target = pos.iter().flat_map(|&i| head.deltas[i].expect("positive").to_vec()).collect();
            let d = g.gather(out.head_deltas, idx)?;
            let s = g.smooth_l1(d, target, cfg.head_beta)?;
            g.scale(s, 1.0 / pos.len() as f64)
        };
        (cls, box_reg)
    };
    let total = g.add_n(&[rpn_objectness, rpn_box, cls, box_reg])?;
    Ok(LossVars {
        rpn_objectness,
        rpn_box,
        cls,
        box_reg,
        total,
    })
}

/// Materialised network outputs for [`compute_losses`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutputs {
    pub rpn_logits: crate::tensor::Tensor,
    pub rpn_deltas: crate::tensor::Tensor,
    pub cls_pos: Vec<f64>,
    pub cls_neg: Vec<f64>,
    pub head_deltas: Vec<f64>,
}

/// Pure-value loss evaluation.
pub fn compute_losses(
    out: &EpisodeOutputs,
    grid: &AnchorGrid,
    rpn: &RpnTargets,
    head: &HeadTargets,
    cfg: &TrainingConfig,
) -> Result<LossReport> {
    use crate::tensor::Tensor;
    let mut g = Graph::new();
    let n = out.cls_pos.len();
    let inputs = LossInputs {
        rpn_logits: g.constant(out.rpn_logits.clone()),
        rpn_deltas: g.constant(out.rpn_deltas.clone()),
        cls_pos: g.constant(Tensor::new([n], out.cls_pos.clone())?),
        cls_neg: g.constant(Tensor::new([out.cls_neg.len()], out.cls_neg.clone())?),
        head_deltas: g.constant(Tensor::new([out.head_deltas.len()], out.head_deltas.clone())?),
    };
    Ok(loss_vars(&mut g, &inputs, grid, rpn, head, cfg)?.report(&g))
}
