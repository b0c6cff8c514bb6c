//! Dataset loading, splitting, episode sampling and support chips.

mod common;

use std::collections::BTreeMap;

use airdet::config::DataConfig;
use airdet::data::synth::{generate, write_synthetic, SynthConfig, ANNOTATION_FILE, BASE_CLASSES, NOVEL_CLASSES};
use airdet::data::{crop_support, load_coco, sample_episode, split_classes, Dataset, DatasetSplit};
use airdet::tensor::Tensor;
use airdet::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_synth() -> SynthConfig {
    SynthConfig {
        base_images: 120,
        novel_images: 40,
        ..Default::default()
    }
}

fn split_of(ds: &Dataset) -> DatasetSplit {
    split_classes(ds, &BASE_CLASSES, &NOVEL_CLASSES, &DataConfig::default()).unwrap()
}

fn in_memory() -> Dataset {
    let (coco, _) = generate(&small_synth()).unwrap();
    Dataset::from_coco(&coco, "unused".into()).unwrap()
}

/// Chi-square statistic of observed counts against equal expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn episode_classes_are_uniform() {
    let split = split_of(&in_memory());
    let classes: Vec<u64> = split.base_classes.iter().copied().collect();
    let mut counts = vec![0usize; classes.len()];
    for seed in 0..10_000 {
        let ep = sample_episode(&split, 1, seed).unwrap();
        counts[classes.iter().position(|&c| c == ep.c1).unwrap()] += 1;
        assert_ne!(ep.c1, ep.c2);
    }
    // 4 degrees of freedom, p = 0.001.
    assert!(chi_square(&counts) < 18.47, "{counts:?}");
}

#[test]
fn episode_queries_are_uniform_within_class() {
    let split = split_of(&in_memory());
    let c = *split.base_classes.iter().next().unwrap();
    let eligible: Vec<usize> = split
        .base_queries
        .iter()
        .filter(|q| q.boxes.iter().any(|(k, _)| *k == c))
        .map(|q| q.image)
        .collect();
    let mut counts: BTreeMap<usize, usize> = eligible.iter().map(|&i| (i, 0)).collect();
    let mut seed = 0;
    let mut drawn = 0;
    while drawn < 10_000 {
        let ep = sample_episode(&split, 1, seed).unwrap();
        seed += 1;
        if ep.c1 == c {
            *counts.get_mut(&ep.query.image).expect("query holds c1") += 1;
            drawn += 1;
        }
    }
    let v: Vec<usize> = counts.values().copied().collect();
    let dof = (v.len() - 1) as f64;
    assert!(chi_square(&v) < dof + 4.0 * (2.0 * dof).sqrt(), "{v:?}");
}

#[test]
fn episodes_never_leak_the_query() {
    let split = split_of(&in_memory());
    for seed in 0..500 {
        let ep = sample_episode(&split, 5, seed).unwrap();
        assert!(ep.supports_c1.iter().chain(&ep.supports_c2).all(|s| s.image != ep.query.image));
        assert!(ep.supports_c1.iter().all(|s| s.class_id == ep.c1));
        assert!(ep.supports_c2.iter().all(|s| s.class_id == ep.c2));
        assert_eq!(ep.targets, ep.query.boxes_of(ep.c1));
        assert_eq!(ep, sample_episode(&split, 5, seed).unwrap());
    }
}

#[test]
fn coco_counts_match_raw_json() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_synthetic(dir.path(), &small_synth()).unwrap();
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(ANNOTATION_FILE)).unwrap()).unwrap();
    let anns = raw["annotations"].as_array().unwrap();
    let mut want: BTreeMap<u64, usize> = BTreeMap::new();
    for a in anns {
        *want.entry(a["category_id"].as_u64().unwrap()).or_default() += 1;
    }
    assert_eq!(ds.class_counts(), want);
    assert_eq!(ds.images.len(), raw["images"].as_array().unwrap().len());

    let loaded = load_coco(dir.path().join(ANNOTATION_FILE), ds.root.clone()).unwrap();
    assert_eq!(loaded.class_counts(), want);

    // Split sizes from the raw annotations.
    let mut classes_of: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for a in anns {
        classes_of
            .entry(a["image_id"].as_u64().unwrap())
            .or_default()
            .push(a["category_id"].as_u64().unwrap());
    }
    let novel_images = classes_of.values().filter(|cs| cs.iter().any(|c| NOVEL_CLASSES.contains(c))).count();
    let base_only = classes_of.values().filter(|cs| cs.iter().all(|c| BASE_CLASSES.contains(c))).count();
    let split = split_of(&ds);
    assert_eq!(split.base_queries.len(), base_only);
    assert_eq!(split.novel_queries.len() + (novel_images as f64 * 0.3).floor() as usize, novel_images);
    split.check_disjoint().unwrap();
    let img = ds.load_image(0).unwrap();
    assert_eq!(img.shape(), &[3, 128, 128]);
}

#[test]
fn chip_content_matches_resize_oracle() {
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::uniform([3, 60, 80], 0.0, 1.0, &mut r);
        let x1 = r.random_range(0.0..40.0);
        let y1 = r.random_range(0.0..30.0);
        let b = BBox::new(x1, y1, x1 + r.random_range(4.0..39.0), y1 + r.random_range(4.0..29.0));
        let size = 64;
        let chip = crop_support(&img, &b, size).unwrap();
        let (x0, y0) = (b.x1.floor() as usize, b.y1.floor() as usize);
        let (cw, ch) = (b.x2.ceil() as usize - x0, b.y2.ceil() as usize - y0);
        let crop = Tensor::from_fn([3, ch, cw], |i| img.at3(i / (ch * cw), y0 + (i / cw) % ch, x0 + i % cw));
        let c = chip.content;
        assert_eq!(c.height.max(c.width), size);
        let want = common::resize(&crop, c.height, c.width);
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let v = chip.pixels.at3(k, y, x);
                    let inside = y >= c.y && y < c.y + c.height && x >= c.x && x < c.x + c.width;
                    if inside {
                        worst = worst.max((v - want.at3(k, y - c.y, x - c.x)).abs());
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!(worst <= 1e-6, "seed {seed}: {worst}");
        assert_eq!(c.y, (size - c.height) / 2);
        assert_eq!(c.x, (size - c.width) / 2);
    }
}
