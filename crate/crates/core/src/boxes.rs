//! Axis-aligned boxes, anchors, the delta parametrization and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box corners in image pixels, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Largest `dw`/`dh` accepted by [`BBox::apply_deltas`] before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn is_well_formed(&self) -> bool {
        self.is_finite() && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_well_formed() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("malformed box {self:?}")))
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    /// Deltas `(dx, dy, dw, dh)` that map `self` (the reference) onto `target`.
    pub fn encode(&self, target: &BBox) -> [f64; 4] {
        let (cx, cy) = self.center();
        let (tx, ty) = target.center();
        [
            (tx - cx) / self.width(),
            (ty - cy) / self.height(),
            (target.width() / self.width()).ln(),
            (target.height() / self.height()).ln(),
        ]
    }

    /// Applies deltas to `self` (the reference). Scale deltas are clamped at
    /// [`MAX_LOG_SCALE`] so a wild prediction cannot overflow.
    pub fn apply_deltas(&self, d: [f64; 4]) -> Result<BBox> {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("box deltas {d:?}")));
        }
        let (cx, cy) = self.center();
        let (w, h) = (self.width(), self.height());
        let ncx = cx + d[0] * w;
        let ncy = cy + d[1] * h;
        let nw = w * d[2].min(MAX_LOG_SCALE).exp();
        let nh = h * d[3].min(MAX_LOG_SCALE).exp();
        Ok(BBox::from_center(ncx, ncy, nw, nh))
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties: lower index first); a box is
/// dropped when its IoU with an already kept box exceeds `thresh`. Returns the
/// kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::shape(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = argsort_desc(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, stable on ties.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Dense anchors over a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    /// Anchors in `(cell row, cell col, anchor)` order, where the anchor index
    /// walks scales outermost and ratios innermost.
    pub anchors: Vec<BBox>,
    pub height: usize,
    pub width: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index into a channel-major `[A, H, W]` prediction map for anchor `n` of
    /// [`Self::anchors`].
    pub fn map_index(&self, n: usize) -> (usize, usize, usize) {
        let a = n % self.per_cell();
        let cell = n / self.per_cell();
        (a, cell / self.width, cell % self.width)
    }
}

/// Anchors centred at `((j + 0.5)·stride, (i + 0.5)·stride)` with width `s/√r`
/// and height `s·√r` for every scale `s` and ratio `r`.
pub fn generate_anchors(fshape: (usize, usize), stride: f64, scales: &[f64], ratios: &[f64]) -> Result<AnchorGrid> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument("anchor scales and ratios must be non-empty".into()));
    }
    if scales.iter().chain(ratios).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("anchor scales and ratios must be positive".into()));
    }
    let (h, w) = fshape;
    let mut anchors = Vec::with_capacity(h * w * scales.len() * ratios.len());
    for i in 0..h {
        for j in 0..w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    anchors.push(BBox::from_center(cx, cy, s / r.sqrt(), s * r.sqrt()));
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        height: h,
        width: w,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}

/// Decodes per-anchor deltas laid out as `[4·A, H, W]` (four consecutive channels
/// per anchor) and clips to the image.
pub fn decode_boxes(grid: &AnchorGrid, deltas: &[f64], image_w: f64, image_h: f64) -> Result<Vec<BBox>> {
    let plane = grid.height * grid.width;
    if deltas.len() != 4 * grid.len() {
        return Err(Error::shape(format!(
            "{} deltas for {} anchors",
            deltas.len(),
            grid.len()
        )));
    }
    grid.anchors
        .iter()
        .enumerate()
        .map(|(n, anchor)| {
            let (a, i, j) = grid.map_index(n);
            let cell = i * grid.width + j;
            let d = [0, 1, 2, 3].map(|t| deltas[(4 * a + t) * plane + cell]);
            Ok(anchor.apply_deltas(d)?.clip(image_w, image_h))
        })
        .collect()
}
