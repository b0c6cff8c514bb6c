//! COCO-style detection metrics.
//!
//! Detections are matched greedily in descending score order to the unmatched
//! ground truth box of highest IoU at or above the threshold. Precision is
//! interpolated at 101 recall points. Size buckets follow the usual area
//! ranges (small < 32², medium < 96², large otherwise); ground truth outside
//! the bucket is ignored, as are unmatched detections outside it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::head::Detection;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MAX_DETECTIONS: [usize; 3] = [1, 10, 100];
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<(u64, BBox)>,
}

/// Matching outcome of one class at one threshold.
#[derive(Clone, Debug, Default, PartialEq)]
struct ClassMatches {
    /// `(score, is_true_positive)` of every non-ignored detection.
    scored: Vec<(f64, bool)>,
    /// Non-ignored ground truth count.
    positives: usize,
}

fn match_class(images: &[ImageResult], class_id: u64, thresh: f64, area: AreaRange, max_det: usize) -> ClassMatches {
    let mut out = ClassMatches::default();
    for img in images {
        let mut gts: Vec<(BBox, bool)> = img
            .ground_truth
            .iter()
            .filter(|(c, _)| *c == class_id)
            .map(|(_, b)| (*b, !area.contains(b.area())))
            .collect();
        // Non-ignored ground truth first, so matches prefer it.
        gts.sort_by_key(|(_, ignored)| *ignored);
        out.positives += gts.iter().filter(|(_, ig)| !ig).count();
        let mut dets: Vec<&Detection> = img.detections.iter().filter(|d| d.class_id == class_id).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(max_det);
        let mut taken = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<usize> = None;
            let mut best_iou = thresh;
            for (j, (g, ignored)) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                if let Some(b) = best {
                    if !gts[b].1 && *ignored {
                        break;
                    }
                }
                let v = iou(&d.bbox, g);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
            match best {
                Some(j) => {
                    taken[j] = true;
                    if !gts[j].1 {
                        out.scored.push((d.score, true));
                    }
                }
                None => {
                    if area.contains(d.bbox.area()) {
                        out.scored.push((d.score, false));
                    }
                }
            }
        }
    }
    out
}

/// `(101-point AP, final recall)`; `None` without non-ignored ground truth.
fn ap_recall(m: &ClassMatches) -> Option<(f64, f64)> {
    if m.positives == 0 {
        return None;
    }
    let mut scored = m.scored.clone();
    // Stable, so equal scores keep image order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = m.positives as f64;
    let mut tp = 0.0;
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    for (i, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        precision.push(tp / (i + 1) as f64);
        recall.push(tp / n);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some((sum / 101.0, recall.last().copied().unwrap_or(0.0)))
}

fn classes(images: &[ImageResult]) -> BTreeSet<u64> {
    images.iter().flat_map(|i| i.ground_truth.iter().map(|(c, _)| *c)).collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over classes and `thresholds` of the AP restricted to `area`.
fn mean_ap(images: &[ImageResult], thresholds: &[f64], area: AreaRange, max_det: usize) -> Option<f64> {
    let mut vals = Vec::new();
    for c in classes(images) {
        for &t in thresholds {
            if let Some((ap, _)) = ap_recall(&match_class(images, c, t, area, max_det)) {
                vals.push(ap);
            }
        }
    }
    mean(&vals)
}

fn mean_recall(images: &[ImageResult], max_det: usize) -> Option<f64> {
    let mut vals = Vec::new();
    for c in classes(images) {
        for &t in &IOU_THRESHOLDS {
            if let Some((_, r)) = ap_recall(&match_class(images, c, t, AreaRange::All, max_det)) {
                vals.push(r);
            }
        }
    }
    mean(&vals)
}

/// Class-averaged AP at one IoU threshold with up to 100 detections per
/// image. 0 when there is no ground truth.
pub fn average_precision(images: &[ImageResult], iou_thresh: f64) -> f64 {
    mean_ap(images, &[iou_thresh], AreaRange::All, 100).unwrap_or(0.0)
}

/// The standard metric set. Size buckets without ground truth are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub aps: Option<f64>,
    pub apm: Option<f64>,
    pub apl: Option<f64>,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    /// AP over `.50:.95` per class.
    pub per_class: BTreeMap<u64, f64>,
}

impl Metrics {
    /// `(name, value)` pairs in CSV column order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("ap", Some(self.ap)),
            ("ap50", Some(self.ap50)),
            ("ap75", Some(self.ap75)),
            ("aps", self.aps),
            ("apm", self.apm),
            ("apl", self.apl),
            ("ar1", Some(self.ar1)),
            ("ar10", Some(self.ar10)),
            ("ar100", Some(self.ar100)),
        ]
    }
}

pub fn compute_metrics(images: &[ImageResult]) -> Metrics {
    let all = |t: &[f64]| mean_ap(images, t, AreaRange::All, 100).unwrap_or(0.0);
    let per_class = classes(images)
        .into_iter()
        .map(|c| {
            let only: Vec<ImageResult> = images
                .iter()
                .map(|i| ImageResult {
                    detections: i.detections.iter().filter(|d| d.class_id == c).copied().collect(),
                    ground_truth: i.ground_truth.iter().filter(|(k, _)| *k == c).copied().collect(),
                })
                .collect();
            (c, mean_ap(&only, &IOU_THRESHOLDS, AreaRange::All, 100).unwrap_or(0.0))
        })
        .collect();
    Metrics {
        ap: all(&IOU_THRESHOLDS),
        ap50: all(&[0.5]),
        ap75: all(&[0.75]),
        aps: mean_ap(images, &IOU_THRESHOLDS, AreaRange::Small, 100),
        apm: mean_ap(images, &IOU_THRESHOLDS, AreaRange::Medium, 100),
        apl: mean_ap(images, &IOU_THRESHOLDS, AreaRange::Large, 100),
        ar1: mean_recall(images, 1).unwrap_or(0.0),
        ar10: mean_recall(images, 10).unwrap_or(0.0),
        ar100: mean_recall(images, 100).unwrap_or(0.0),
        per_class,
    }
}
