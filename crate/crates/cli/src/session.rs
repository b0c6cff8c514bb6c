//! In-memory service state: the loaded model, the frame directory and the
//! registry of online-annotated classes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use airdet::aggregation::{build_prototype, ClassPrototype};
use airdet::checkpoint::Checkpoint;
use airdet::data::image_io::read_image;
use airdet::data::{crop_support, fit_image};
use airdet::head::{detect_with_prototypes, Detection};
use airdet::model::checkpoint_config;
use airdet::{ArchConfig, BBox, Error, ParamSet, Result, Tensor};
use serde::{Deserialize, Serialize};

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Read-only model state shared by every request.
pub struct Model {
    pub checkpoint_id: String,
    pub params: ParamSet,
    pub arch: ArchConfig,
    pub max_side: usize,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = checkpoint_config(&ckpt)?;
        Ok(Model {
            checkpoint_id: ckpt.id(),
            arch: cfg.arch(),
            max_side: cfg.data.max_image_side,
            params: ckpt.params,
        })
    }

    pub fn param_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn support_size(&self) -> usize {
        self.arch.support_size
    }

    pub fn prototype(&self, class_id: u64, chips: &[Tensor]) -> Result<ClassPrototype> {
        build_prototype(&self.params, &self.arch, class_id, chips)
    }

    /// Detections in the pixel frame of `image`.
    pub fn detect(&self, image: &Tensor, prototypes: &[ClassPrototype]) -> Result<Vec<Detection>> {
        let (fitted, scale) = fit_image(image, self.max_side)?;
        let mut dets = detect_with_prototypes(&fitted, prototypes, &self.params, &self.arch)?;
        if scale != 1.0 {
            for d in &mut dets {
                d.bbox = d.bbox.scale(1.0 / scale);
            }
        }
        Ok(dets)
    }
}

/// Image files of one directory, addressed by file stem.
pub struct Frames {
    dir: PathBuf,
    files: BTreeMap<String, PathBuf>,
}

impl Frames {
    pub fn scan(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut files = BTreeMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path.clone());
            }
        }
        Ok(Frames { dir, files })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.files.keys()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn path(&self, id: &str) -> Option<&Path> {
        self.files.get(id).map(PathBuf::as_path)
    }

    pub fn load(&self, id: &str) -> Result<Option<Tensor>> {
        self.path(id).map(read_image).transpose()
    }
}

pub struct Support {
    pub chip_id: u64,
    pub frame_id: String,
    pub bbox: BBox,
    pub chip: Tensor,
}

pub struct Class {
    pub id: u64,
    pub name: String,
    pub supports: Vec<Support>,
    /// Rebuilt together with every change of `supports`.
    pub prototype: Option<Arc<ClassPrototype>>,
}

impl Class {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

#[derive(Default)]
pub struct Registry {
    pub classes: BTreeMap<u64, Class>,
    next_class: u64,
    next_chip: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub classes: Vec<SnapshotClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotClass {
    pub id: u64,
    pub name: String,
    pub supports: Vec<SnapshotSupport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSupport {
    pub chip_id: u64,
    pub frame_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Why a registry operation was refused.
#[derive(Debug)]
pub enum Refusal {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(Error),
}

impl From<Error> for Refusal {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Refusal::BadRequest(m),
            other => Refusal::Internal(other),
        }
    }
}

/// Shared service state. Registry writes are serialised by the lock; a
/// class's supports and prototype change together under one write guard.
pub struct Session {
    pub model: Model,
    pub frames: Frames,
    pub registry: RwLock<Registry>,
}

impl Session {
    pub fn new(model: Model, frames: Frames) -> Self {
        Session {
            model,
            frames,
            registry: RwLock::new(Registry {
                next_class: 1,
                next_chip: 1,
                ..Default::default()
            }),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Registry> {
        self.registry.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn add_class(&self, name: &str) -> std::result::Result<u64, Refusal> {
        let name = name.trim();
        if name.is_empty() {
            return Err(Refusal::BadRequest("class name must not be empty".into()));
        }
        let mut reg = self.write();
        if reg.classes.values().any(|c| c.name == name) {
            return Err(Refusal::Conflict(format!("class `{name}` already exists")));
        }
        let id = reg.next_class;
        reg.next_class += 1;
        reg.classes.insert(
            id,
            Class {
                id,
                name: name.to_string(),
                supports: Vec::new(),
                prototype: None,
            },
        );
        Ok(id)
    }

    /// Crops `bbox` from the frame, stores the chip and rebuilds the class
    /// prototype. Returns the chip id and the new shot count.
    pub fn add_support(&self, class_id: u64, frame_id: &str, bbox: BBox) -> std::result::Result<(u64, usize), Refusal> {
        if !self.read().classes.contains_key(&class_id) {
            return Err(Refusal::NotFound(format!("unknown class {class_id}")));
        }
        let image = self
            .frames
            .load(frame_id)?
            .ok_or_else(|| Refusal::NotFound(format!("unknown frame `{frame_id}`")))?;
        let (_, h, w) = image.dims3()?;
        check_box(&bbox, w, h)?;
        let chip = crop_support(&image, &bbox, self.model.support_size())?.pixels;

        let mut reg = self.write();
        let chip_id = reg.next_chip;
        let class = reg
            .classes
            .get_mut(&class_id)
            .ok_or_else(|| Refusal::NotFound(format!("unknown class {class_id}")))?;
        let mut chips: Vec<Tensor> = class.supports.iter().map(|s| s.chip.clone()).collect();
        chips.push(chip.clone());
        let proto = self.model.prototype(class_id, &chips)?;
        class.supports.push(Support {
            chip_id,
            frame_id: frame_id.to_string(),
            bbox,
            chip,
        });
        class.prototype = Some(Arc::new(proto));
        let shots = class.shots();
        reg.next_chip += 1;
        Ok((chip_id, shots))
    }

    /// Returns the remaining shot count.
    pub fn remove_support(&self, class_id: u64, chip_id: u64) -> std::result::Result<usize, Refusal> {
        let mut reg = self.write();
        let class = reg
            .classes
            .get_mut(&class_id)
            .ok_or_else(|| Refusal::NotFound(format!("unknown class {class_id}")))?;
        let pos = class
            .supports
            .iter()
            .position(|s| s.chip_id == chip_id)
            .ok_or_else(|| Refusal::NotFound(format!("class {class_id} has no support {chip_id}")))?;
        let mut kept: Vec<Tensor> = class.supports.iter().map(|s| s.chip.clone()).collect();
        kept.remove(pos);
        let proto = if kept.is_empty() {
            None
        } else {
            Some(Arc::new(self.model.prototype(class_id, &kept)?))
        };
        class.supports.remove(pos);
        class.prototype = proto;
        Ok(class.shots())
    }

    /// Prototypes of `class_ids` (all classes when `None`) taken from one
    /// consistent view of the registry.
    pub fn prototypes(&self, class_ids: Option<&[u64]>) -> std::result::Result<Vec<Arc<ClassPrototype>>, Refusal> {
        let reg = self.read();
        let ids: BTreeSet<u64> = match class_ids {
            Some(ids) => ids.iter().copied().collect(),
            None => reg.classes.keys().copied().collect(),
        };
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let class = reg
                .classes
                .get(&id)
                .ok_or_else(|| Refusal::NotFound(format!("unknown class {id}")))?;
            match &class.prototype {
                Some(p) => out.push(Arc::clone(p)),
                None => {
                    return Err(Refusal::Conflict(format!(
                        "class `{}` has no supports; annotate at least one before detecting",
                        class.name
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn class_names(&self) -> BTreeMap<u64, String> {
        self.read().classes.values().map(|c| (c.id, c.name.clone())).collect()
    }

    pub fn with_registry<T>(&self, f: impl FnOnce(&Registry) -> T) -> T {
        f(&self.read())
    }

    pub fn snapshot(&self) -> Snapshot {
        let reg = self.read();
        Snapshot {
            classes: reg
                .classes
                .values()
                .map(|c| SnapshotClass {
                    id: c.id,
                    name: c.name.clone(),
                    supports: c
                        .supports
                        .iter()
                        .map(|s| SnapshotSupport {
                            chip_id: s.chip_id,
                            frame_id: s.frame_id.clone(),
                            bbox: s.bbox,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds classes, chips and prototypes from a snapshot, keeping ids.
    pub fn restore(&self, snap: &Snapshot) -> std::result::Result<(), Refusal> {
        let mut fresh = Registry {
            next_class: 1,
            next_chip: 1,
            ..Default::default()
        };
        for sc in &snap.classes {
            let mut class = Class {
                id: sc.id,
                name: sc.name.clone(),
                supports: Vec::new(),
                prototype: None,
            };
            for s in &sc.supports {
                let image = self
                    .frames
                    .load(&s.frame_id)?
                    .ok_or_else(|| Refusal::NotFound(format!("unknown frame `{}`", s.frame_id)))?;
                let chip = crop_support(&image, &s.bbox, self.model.support_size())?.pixels;
                class.supports.push(Support {
                    chip_id: s.chip_id,
                    frame_id: s.frame_id.clone(),
                    bbox: s.bbox,
                    chip,
                });
                fresh.next_chip = fresh.next_chip.max(s.chip_id + 1);
            }
            if !class.supports.is_empty() {
                let chips: Vec<Tensor> = class.supports.iter().map(|s| s.chip.clone()).collect();
                class.prototype = Some(Arc::new(self.model.prototype(sc.id, &chips)?));
            }
            fresh.next_class = fresh.next_class.max(sc.id + 1);
            fresh.classes.insert(sc.id, class);
        }
        *self.write() = fresh;
        Ok(())
    }
}

fn check_box(b: &BBox, width: usize, height: usize) -> std::result::Result<(), Refusal> {
    if !b.is_finite() || !b.is_well_formed() {
        return Err(Refusal::BadRequest(format!("box {b:?} needs x1 < x2 and y1 < y2")));
    }
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width as f64 || b.y2 > height as f64 {
        return Err(Refusal::BadRequest(format!("box {b:?} lies outside the {width}x{height} frame")));
    }
    Ok(())
}
