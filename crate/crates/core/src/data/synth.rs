//! Synthetic shapes dataset.
//!
//! Five base and two novel shape classes, each with a characteristic hue,
//! drawn on low-contrast textured backgrounds. Base images hold one to three
//! base objects; novel images hold one or two objects of a single novel class
//! plus at most one base distractor. Everything is written as PNG files plus a
//! COCO annotation file.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, Dataset};
use super::image_io::write_png;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// `(id, name, hue in [0, 1))`.
pub const CLASSES: [(u64, &str, f64); 7] = [
    (1, "disc", 0.00),
    (2, "square", 0.62),
    (3, "triangle", 0.33),
    (4, "bar", 0.15),
    (5, "ring", 0.83),
    (6, "cross", 0.50),
    (7, "diamond", 0.07),
];
pub const BASE_CLASSES: [u64; 5] = [1, 2, 3, 4, 5];
pub const NOVEL_CLASSES: [u64; 2] = [6, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub base_images: usize,
    pub novel_images: usize,
    pub image_size: usize,
    pub min_object: f64,
    pub max_object: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            base_images: 600,
            novel_images: 160,
            image_size: 128,
            min_object: 24.0,
            max_object: 52.0,
        }
    }
}

fn inside(class_id: u64, u: f64, v: f64) -> bool {
    match class_id {
        1 => u * u + v * v <= 1.0,
        2 | 4 => u.abs() <= 1.0 && v.abs() <= 1.0,
        3 => v >= -1.0 && v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        5 => {
            let r = u * u + v * v;
            (0.3..=1.0).contains(&r)
        }
        6 => u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() <= 0.34 || v.abs() <= 0.34),
        7 => u.abs() + v.abs() <= 1.0,
        _ => false,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.5));
    let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let phase = rng.random_range(0.0..6.28);
    let amp = rng.random_range(0.02..0.06);
    let mut t = Tensor::zeros([3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let stripe = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            let grain: f64 = rng.random_range(-0.03..0.03);
            for (c, b) in base.iter().enumerate() {
                t.data_mut()[c * plane + y * size + x] = (b + stripe + grain).clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn object_box<R: Rng + ?Sized>(class_id: u64, cfg: &SynthConfig, rng: &mut R) -> (f64, f64) {
    let s = rng.random_range(cfg.min_object..=cfg.max_object);
    if class_id == 4 {
        let long = s * 1.25;
        let short = long / 2.5;
        if rng.random_bool(0.5) {
            (long, short)
        } else {
            (short, long)
        }
    } else {
        let aspect: f64 = rng.random_range(0.85..1.15);
        (s * aspect.sqrt(), s / aspect.sqrt())
    }
}

/// Paints one object with 4x4 supersampled coverage.
fn paint<R: Rng + ?Sized>(img: &mut Tensor, class_id: u64, b: &BBox, rng: &mut R) {
    let hue = CLASSES.iter().find(|c| c.0 == class_id).map_or(0.0, |c| c.2);
    let color = hsv(
        hue + rng.random_range(-0.03..0.03),
        rng.random_range(0.65..0.95),
        rng.random_range(0.7..1.0),
    );
    let (_, h, w) = img.dims3().expect("3-d image");
    let plane = h * w;
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    let (x0, x1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(w));
    let (y0, y1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(h));
    const SS: usize = 4;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(class_id, (px - cx) / hw, (py - cy) / hh) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / (SS * SS) as f64;
            for (c, col) in color.iter().enumerate() {
                let v = &mut img.data_mut()[c * plane + y * w + x];
                *v = (1.0 - a) * *v + a * col;
            }
        }
    }
}

/// Places a new box clear of `taken` (with a small margin), or `None`.
fn place<R: Rng + ?Sized>(size: (f64, f64), taken: &[BBox], image: f64, rng: &mut R) -> Option<BBox> {
    for _ in 0..60 {
        let x = rng.random_range(1.0..(image - size.0 - 1.0).max(1.5));
        let y = rng.random_range(1.0..(image - size.1 - 1.0).max(1.5));
        // Dyadic coordinates keep the xywh round trip through JSON exact.
        let q = |v: f64| (v * 16.0).round() / 16.0;
        let b = BBox::from_xywh(q(x), q(y), q(size.0), q(size.1));
        let grown = BBox::new(b.x1 - 3.0, b.y1 - 3.0, b.x2 + 3.0, b.y2 + 3.0);
        if taken.iter().all(|t| iou(t, &grown) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Renders the dataset in memory: annotation document and images by id.
pub fn generate(cfg: &SynthConfig) -> Result<(CocoFile, Vec<Tensor>)> {
    if cfg.image_size < 16 || !(cfg.min_object > 0.0) || cfg.max_object < cfg.min_object {
        return Err(Error::InvalidArgument(format!("invalid synthetic configuration {cfg:?}")));
    }
    if cfg.max_object * 1.25 + 2.0 >= cfg.image_size as f64 {
        return Err(Error::InvalidArgument("objects do not fit the image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut file = CocoFile {
        categories: CLASSES
            .iter()
            .map(|&(id, name, _)| CocoCategory {
                id,
                name: name.into(),
                supercategory: "shape".into(),
            })
            .collect(),
        ..Default::default()
    };
    let mut images = Vec::new();
    let side = cfg.image_size as f64;
    for n in 0..cfg.base_images + cfg.novel_images {
        let id = n as u64 + 1;
        let mut img = background(cfg.image_size, &mut rng);
        let classes: Vec<u64> = if n < cfg.base_images {
            let count = rng.random_range(1..=3);
            (0..count).map(|_| BASE_CLASSES[rng.random_range(0..5)]).collect()
        } else {
            let novel = NOVEL_CLASSES[(n - cfg.base_images) % 2];
            let mut v = vec![novel; rng.random_range(1..=2)];
            if rng.random_bool(0.5) {
                v.push(BASE_CLASSES[rng.random_range(0..5)]);
            }
            v
        };
        let mut taken = Vec::new();
        for class_id in classes {
            let size = object_box(class_id, cfg, &mut rng);
            let Some(b) = place(size, &taken, side, &mut rng) else {
                continue;
            };
            paint(&mut img, class_id, &b, &mut rng);
            taken.push(b);
            file.annotations.push(CocoAnnotation {
                id: file.annotations.len() as u64 + 1,
                image_id: id,
                category_id: class_id,
                bbox: [b.x1, b.y1, b.width(), b.height()],
                area: b.area(),
                iscrowd: 0,
            });
        }
        file.images.push(CocoImage {
            id,
            file_name: format!("{IMAGE_DIR}/{id:05}.png"),
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
        });
        images.push(img);
    }
    Ok((file, images))
}

/// Writes `annotations.json` and `images/*.png` under `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (file, images) = generate(cfg)?;
    for (meta, img) in file.images.iter().zip(&images) {
        write_png(dir.join(&meta.file_name), img)?;
    }
    let ann = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_vec_pretty(&file).map_err(|source| Error::Json {
        path: ann.clone(),
        source,
    })?;
    std::fs::write(&ann, json).map_err(|e| Error::io(&ann, e))?;
    Dataset::from_coco(&file, dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            base_images: 12,
            novel_images: 6,
            image_size: 64,
            min_object: 12.0,
            max_object: 24.0,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let (f, imgs) = generate(&small()).unwrap();
        let (g, imgs2) = generate(&small()).unwrap();
        assert_eq!(f, g);
        assert_eq!(imgs, imgs2);
        let d = Dataset::from_coco(&f, "".into()).unwrap();
        for img in &d.images {
            for a in &img.annotations {
                assert!(a.bbox.x1 >= 0.0 && a.bbox.x2 <= 64.0 && a.bbox.y2 <= 64.0);
            }
        }
        let novel_imgs = d.images[12..].iter().all(|i| i.annotations.iter().any(|a| a.class_id >= 6));
        assert!(novel_imgs);
        assert!(d.images[..12].iter().all(|i| i.annotations.iter().all(|a| a.class_id <= 5)));
    }

    #[test]
    fn objects_are_painted() {
        let (f, imgs) = generate(&small()).unwrap();
        let a = &f.annotations[0];
        let img = &imgs[(a.image_id - 1) as usize];
        let (cx, cy) = ((a.bbox[0] + a.bbox[2] / 2.0) as usize, (a.bbox[1] + a.bbox[3] / 2.0) as usize);
        let s: f64 = (0..3).map(|c| img.at3(c, cy, cx)).sum();
        let bg: f64 = (0..3).map(|c| img.at3(c, 0, 0)).sum();
        assert!(a.category_id == 5 || (s - bg).abs() > 0.1);
    }

    #[test]
    fn write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = write_synthetic(dir.path(), &small()).unwrap();
        let loaded = super::super::coco::load_coco(dir.path().join(ANNOTATION_FILE), dir.path()).unwrap();
        assert_eq!(loaded, d);
        let img = loaded.load_image(0).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
    }
}
