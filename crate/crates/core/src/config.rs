//! Configuration document.
//!
//! One TOML file with a fixed set of sections; every key has a default and
//! unknown keys are rejected. `configs/default.toml` in the repository is the
//! canonical dump of [`Config::default`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_ENV: &str = "AIRDET_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel widths of the four stages; stages 2-4 feed strides 4, 8, 16.
    pub widths: Vec<usize>,
    /// Residual pairs per stage.
    pub blocks: Vec<usize>,
    /// Stages whose parameters are never updated, e.g. `["stage1"]`.
    pub frozen: Vec<String>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            frozen: vec!["stage1".into()],
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationConfig {
    /// Support-guided cross-scale fusion; when off, proposals use the stride-16
    /// spatial relation alone.
    pub scs: bool,
    /// Global-local shot aggregation; when off, prototypes are shot means.
    pub glr: bool,
    /// Prototype relation embedding before box regression.
    pub pre: bool,
    /// Side length of prototypes and pooled proposal features.
    pub prototype_size: usize,
    /// Kernel size of the spatial relation used for embedding.
    pub pre_kernel: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            scs: true,
            glr: true,
            pre: true,
            prototype_size: 7,
            pre_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![32.0, 64.0, 128.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub pre_nms_top: usize,
    pub nms_thresh: f64,
    pub post_nms_top: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top: 1000,
            nms_thresh: 0.7,
            post_nms_top: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Classifier,
    Objectness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width of the box-regression MLP.
    pub reg_hidden: usize,
    /// Final number of detections kept across all classes.
    pub max_detections: usize,
    pub rank_by: RankBy,
    pub cross_class_nms: bool,
    pub cross_class_nms_thresh: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            reg_hidden: 256,
            max_detections: 100,
            rank_by: RankBy::Classifier,
            cross_class_nms: false,
            cross_class_nms_thresh: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side of the square support chip.
    pub support_size: usize,
    /// Support instances smaller than this area (pixels) are never sampled.
    pub min_support_area: f64,
    /// Query images are downscaled so the longer side is at most this.
    pub max_image_side: usize,
    /// Share of novel-class images reserved as the novel support pool.
    pub novel_support_fraction: f64,
    pub base_classes: Vec<u64>,
    pub novel_classes: Vec<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            support_size: 320,
            min_support_area: 32.0 * 32.0,
            max_image_side: 256,
            novel_support_fraction: 0.3,
            base_classes: vec![1, 2, 3, 4, 5],
            novel_classes: vec![6, 7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub shots: usize,
    pub seed: u64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Linear warm-up length in iterations.
    pub warmup: usize,
    pub checkpoint_every: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    /// Top-objectness proposals considered by the head loss (no NMS).
    pub head_proposals: usize,
    pub head_pos_iou: f64,
    pub head_batch: usize,
    pub head_pos_fraction: f64,
    pub rpn_beta: f64,
    pub head_beta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            iterations: 2000,
            shots: 10,
            seed: 0,
            lr_backbone: 0.004,
            lr_head: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            warmup: 100,
            checkpoint_every: 500,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            head_proposals: 64,
            head_pos_iou: 0.5,
            head_batch: 32,
            head_pos_fraction: 0.25,
            rpn_beta: 1.0 / 9.0,
            head_beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// Multiplier applied to the training learning rates.
    pub lr_scale: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 200,
            lr_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Evaluate at most this many query images (0 = all).
    pub max_queries: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            shots: vec![1, 3, 5],
            seeds: vec![1, 2, 3],
            max_queries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub checkpoint: String,
    pub frames_dir: String,
    pub page_size: usize,
    /// Directory served under `/console/`, if set.
    pub static_dir: String,
    /// Session snapshot written on shutdown, if set.
    pub snapshot: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            checkpoint: "runs/model.ckpt".into(),
            frames_dir: "frames".into(),
            page_size: 50,
            static_dir: String::new(),
            snapshot: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub relation: RelationConfig,
    pub anchors: AnchorConfig,
    pub proposal: ProposalConfig,
    pub head: HeadConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvaluationConfig,
    pub service: ServiceConfig,
}

/// The sections that determine parameter shapes and inference behaviour; stored
/// alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone: BackboneConfig,
    pub relation: RelationConfig,
    pub anchors: AnchorConfig,
    pub proposal: ProposalConfig,
    pub head: HeadConfig,
    pub support_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Config::default().arch()
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.widths.len() != 4 || b.blocks.len() != 4 {
            return Err(Error::Config("backbone needs exactly 4 stage widths and block counts".into()));
        }
        if b.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return Err(Error::Config(format!("backbone widths must be even and positive: {:?}", b.widths)));
        }
        if b.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("backbone std must be positive".into()));
        }
        for f in &b.frozen {
            if !crate::backbone::STAGES.contains(&f.as_str()) {
                return Err(Error::Config(format!("unknown frozen stage `{f}`")));
            }
        }
        if self.relation.prototype_size == 0 {
            return Err(Error::Config("relation.prototype_size must be >= 1".into()));
        }
        if self.relation.pre_kernel % 2 == 0 {
            return Err(Error::Config("relation.pre_kernel must be odd".into()));
        }
        if self.anchors.scales.is_empty() || self.anchors.ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.support_size < 16 {
            return Err(Error::Config("data.support_size must be >= 16".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.scales.len() * self.anchors.ratios.len()
    }
}

impl Config {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            backbone: self.backbone.clone(),
            relation: self.relation.clone(),
            anchors: self.anchors.clone(),
            proposal: self.proposal.clone(),
            head: self.head.clone(),
            support_size: self.data.support_size,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, else the file named by `AIRDET_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        let d = &self.data;
        if d.base_classes.iter().any(|c| d.novel_classes.contains(c)) {
            return Err(Error::Config("data.base_classes and data.novel_classes overlap".into()));
        }
        if !(0.0..1.0).contains(&d.novel_support_fraction) {
            return Err(Error::Config("data.novel_support_fraction must be in [0, 1)".into()));
        }
        if self.training.shots == 0 {
            return Err(Error::Config("training.shots must be >= 1".into()));
        }
        if self.evaluation.shots.contains(&0) {
            return Err(Error::Config("evaluation.shots must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies a `section.key=value` override. The value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split always yields one item");
        let mut table = &mut doc;
        for k in parents {
            table = table
                .get_mut(*k)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section `{k}` in `{path}`")))?;
        }
        if !table.contains_key(*last) {
            return Err(Error::Config(format!("unknown config key `{path}`")));
        }
        table.insert(last.to_string(), value);
        let updated: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{path}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// SHA-256 of the canonical TOML dump.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}
