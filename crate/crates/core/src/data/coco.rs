//! COCO-format annotation files.
//!
//! Only `images`, `annotations` and `categories` are read; other top-level
//! fields are ignored. Boxes are stored as `[x, y, width, height]` on disk and
//! as corner boxes in memory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub class_id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

/// An indexed, immutable dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted by image id.
    pub images: Vec<ImageRecord>,
    pub categories: BTreeMap<u64, String>,
}

/// Parses and validates an annotation document.
pub fn parse_coco(bytes: &[u8]) -> Result<CocoFile> {
    let file: CocoFile = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("malformed COCO JSON: {e}")))?;
    Dataset::from_coco(&file, PathBuf::new())?;
    Ok(file)
}

pub fn load_coco(ann_path: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<Dataset> {
    let path = ann_path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::from_coco(&file, image_root.as_ref().to_path_buf()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn from_coco(file: &CocoFile, root: PathBuf) -> Result<Dataset> {
        let mut categories = BTreeMap::new();
        for c in &file.categories {
            if categories.insert(c.id, c.name.clone()).is_some() {
                return Err(Error::Data(format!("duplicate category id {}", c.id)));
            }
        }
        let mut images: Vec<ImageRecord> = Vec::with_capacity(file.images.len());
        let mut index = HashMap::new();
        let mut sorted: Vec<&CocoImage> = file.images.iter().collect();
        sorted.sort_by_key(|i| i.id);
        for img in sorted {
            if index.insert(img.id, images.len()).is_some() {
                return Err(Error::Data(format!("duplicate image id {}", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Data(format!("image {} has zero size", img.id)));
            }
            images.push(ImageRecord {
                id: img.id,
                file_name: img.file_name.clone(),
                width: img.width,
                height: img.height,
                annotations: Vec::new(),
            });
        }
        let mut ann_ids = std::collections::HashSet::new();
        for a in &file.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::Data(format!("duplicate annotation id {}", a.id)));
            }
            let &slot = index
                .get(&a.image_id)
                .ok_or_else(|| Error::Data(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
            if !categories.contains_key(&a.category_id) {
                return Err(Error::Data(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            let bbox = BBox::from_xywh(x, y, w, h);
            if !(w > 0.0 && h > 0.0) || !bbox.is_finite() {
                return Err(Error::Data(format!("annotation {} has an invalid box {:?}", a.id, a.bbox)));
            }
            images[slot].annotations.push(Annotation {
                id: a.id,
                class_id: a.category_id,
                bbox,
            });
        }
        Ok(Dataset { root, images, categories })
    }

    pub fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .images
                .iter()
                .map(|i| CocoImage {
                    id: i.id,
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            annotations: self
                .images
                .iter()
                .flat_map(|i| {
                    i.annotations.iter().map(move |a| CocoAnnotation {
                        id: a.id,
                        image_id: i.id,
                        category_id: a.class_id,
                        bbox: [a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()],
                        area: a.bbox.area(),
                        iscrowd: 0,
                    })
                })
                .collect(),
            categories: self
                .categories
                .iter()
                .map(|(&id, name)| CocoCategory {
                    id,
                    name: name.clone(),
                    supercategory: String::new(),
                })
                .collect(),
        }
    }

    pub fn image_index(&self, id: u64) -> Option<usize> {
        self.images.binary_search_by_key(&id, |i| i.id).ok()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.images[index].file_name)
    }

    pub fn load_image(&self, index: usize) -> Result<Tensor> {
        super::image_io::read_image(self.image_path(index))
    }

    /// Instance count per category.
    pub fn class_counts(&self) -> BTreeMap<u64, usize> {
        let mut out: BTreeMap<u64, usize> = self.categories.keys().map(|&k| (k, 0)).collect();
        for a in self.images.iter().flat_map(|i| &i.annotations) {
            *out.entry(a.class_id).or_default() += 1;
        }
        out
    }
}
