#![allow(dead_code)]

use std::path::{Path, PathBuf};

use airdet::config::Config;
use airdet::data::synth::{write_synthetic, SynthConfig, IMAGE_DIR};
use airdet::train::train;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub checkpoint: PathBuf,
}

impl Fixture {
    pub fn data(&self) -> &Path {
        self.dir.path()
    }

    pub fn frames(&self) -> PathBuf {
        self.dir.path().join(IMAGE_DIR)
    }
}

pub const TINY: [&str; 9] = [
    "backbone.widths=[4,8,8,8]",
    "relation.prototype_size=3",
    "anchors.scales=[24,34,48]",
    "head.reg_hidden=16",
    "data.support_size=32",
    "training.shots=2",
    "training.iterations=2",
    "training.rpn_batch=64",
    "evaluation.max_queries=4",
];

pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    for s in TINY {
        cfg.set(s).unwrap();
    }
    cfg
}

/// A small synthetic dataset with a briefly trained checkpoint.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        base_images: 40,
        novel_images: 20,
        ..Default::default()
    };
    let ds = write_synthetic(dir.path(), &synth).unwrap();
    let out = train(&tiny_config(), &ds, None).unwrap();
    let checkpoint = dir.path().join("model.ckpt");
    out.checkpoint.save(&checkpoint).unwrap();
    Fixture { dir, checkpoint }
}
