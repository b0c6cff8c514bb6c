//! Base / novel class partition of a dataset.

use std::collections::BTreeSet;

use crate::boxes::BBox;
use crate::config::DataConfig;
use crate::error::{Error, Result};

use super::coco::Dataset;

/// An image used as a query, with the annotations of its split only.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryImage {
    /// Index into [`Dataset::images`].
    pub image: usize,
    pub boxes: Vec<(u64, BBox)>,
}

impl QueryImage {
    pub fn boxes_of(&self, class_id: u64) -> Vec<BBox> {
        self.boxes.iter().filter(|(c, _)| *c == class_id).map(|(_, b)| *b).collect()
    }

    pub fn classes(&self) -> BTreeSet<u64> {
        self.boxes.iter().map(|(c, _)| *c).collect()
    }
}

/// One annotated instance usable as a support exemplar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportInstance {
    pub image: usize,
    pub annotation_id: u64,
    pub class_id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub base_classes: BTreeSet<u64>,
    pub novel_classes: BTreeSet<u64>,
    pub base_queries: Vec<QueryImage>,
    pub base_supports: Vec<SupportInstance>,
    pub novel_queries: Vec<QueryImage>,
    pub novel_supports: Vec<SupportInstance>,
}

impl DatasetSplit {
    pub fn supports_of(&self, class_id: u64) -> Vec<SupportInstance> {
        self.base_supports
            .iter()
            .chain(&self.novel_supports)
            .filter(|s| s.class_id == class_id)
            .copied()
            .collect()
    }

    pub fn check_disjoint(&self) -> Result<()> {
        if let Some(c) = self.base_classes.intersection(&self.novel_classes).next() {
            return Err(Error::Data(format!("class {c} is both base and novel")));
        }
        Ok(())
    }
}

/// Whether the `pos`-th of the novel images (by id) joins the support pool.
/// Spreads a `fraction` share evenly over the sorted list.
fn in_support_pool(pos: usize, fraction: f64) -> bool {
    ((pos + 1) as f64 * fraction).floor() > (pos as f64 * fraction).floor()
}

/// Partitions `dataset`.
///
/// * Images holding any novel instance never serve as base queries.
/// * Novel images are split by id order: a `novel_support_fraction` share
///   provides novel supports, the rest are novel queries.
/// * Instances smaller than `min_support_area` are never supports.
pub fn split_classes(dataset: &Dataset, base: &[u64], novel: &[u64], cfg: &DataConfig) -> Result<DatasetSplit> {
    let base_classes: BTreeSet<u64> = base.iter().copied().collect();
    let novel_classes: BTreeSet<u64> = novel.iter().copied().collect();
    if let Some(c) = base_classes.intersection(&novel_classes).next() {
        return Err(Error::Data(format!("class {c} is both base and novel")));
    }
    let mut split = DatasetSplit {
        base_classes,
        novel_classes,
        base_queries: Vec::new(),
        base_supports: Vec::new(),
        novel_queries: Vec::new(),
        novel_supports: Vec::new(),
    };
    let mut novel_pos = 0;
    for (idx, img) in dataset.images.iter().enumerate() {
        let pick = |set: &BTreeSet<u64>| -> Vec<(u64, BBox)> {
            img.annotations
                .iter()
                .filter(|a| set.contains(&a.class_id))
                .map(|a| (a.class_id, a.bbox))
                .collect()
        };
        let supports = |set: &BTreeSet<u64>| -> Vec<SupportInstance> {
            img.annotations
                .iter()
                .filter(|a| set.contains(&a.class_id) && a.bbox.area() >= cfg.min_support_area)
                .map(|a| SupportInstance {
                    image: idx,
                    annotation_id: a.id,
                    class_id: a.class_id,
                    bbox: a.bbox,
                })
                .collect()
        };
        let novel_boxes = pick(&split.novel_classes);
        if novel_boxes.is_empty() {
            let base_boxes = pick(&split.base_classes);
            if !base_boxes.is_empty() {
                split.base_supports.extend(supports(&split.base_classes));
                split.base_queries.push(QueryImage {
                    image: idx,
                    boxes: base_boxes,
                });
            }
        } else {
            if in_support_pool(novel_pos, cfg.novel_support_fraction) {
                split.novel_supports.extend(supports(&split.novel_classes));
            } else {
                split.novel_queries.push(QueryImage {
                    image: idx,
                    boxes: novel_boxes,
                });
            }
            novel_pos += 1;
        }
    }
    Ok(split)
}
