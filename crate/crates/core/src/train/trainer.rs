//! Episodic SGD training and support-set fine-tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::backbone;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainingConfig};
use crate::data::{sample_episode, split_classes, Dataset, DatasetSplit, Episode, QueryImage, SupportInstance};
use crate::error::{Error, Result};
use crate::model::{checkpoint, checkpoint_config, init_params};
use crate::tensor::{ParamSet, Tensor};

use super::episode::{episode_loss, ImageCache};
use super::losses::LossReport;

/// Column header of the loss curve CSV.
pub const LOSS_CSV_HEADER: &str = "iteration,episode_seed,lr_scale,rpn_objectness,rpn_box,cls,box_reg,total";

/// Parameters trained with `lr_head`; everything else uses `lr_backbone`.
pub const HEAD_PREFIXES: [&str; 3] = ["head.", "glr.", "pre."];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One report per iteration.
    pub losses: Vec<LossReport>,
}

/// Seed of the episode drawn at `iteration`.
pub fn episode_seed(seed: u64, iteration: usize) -> u64 {
    let mut z = seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lr_for(key: &str, cfg: &TrainingConfig) -> f64 {
    if HEAD_PREFIXES.iter().any(|p| key.starts_with(p)) {
        cfg.lr_head
    } else {
        cfg.lr_backbone
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    /// Applies one update; `lr` gives the step size per key.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: impl Fn(&str) -> f64, momentum: f64, weight_decay: f64) {
        for (key, grad) in grads.iter() {
            let Some(w) = params.get_mut(key) else { continue };
            let v = self
                .velocity
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
            let step = lr(key);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = momentum * *vi + gi + weight_decay * *wi;
                *wi -= step * *vi;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn warmup_factor(iteration: usize, warmup: usize) -> f64 {
    if warmup == 0 || iteration >= warmup {
        1.0
    } else {
        (iteration + 1) as f64 / warmup as f64
    }
}

/// One optimisation step on an episode; returns the loss report.
#[allow(clippy::too_many_arguments)]
fn step(
    cfg: &Config,
    tcfg: &TrainingConfig,
    params: &mut ParamSet,
    sgd: &mut Sgd,
    cache: &mut ImageCache,
    ep: &Episode,
    iteration: usize,
    lr_scale: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<LossReport> {
    let arch = cfg.arch();
    let tensors = cache.episode(ep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ep.seed);
    rng.set_stream(1);
    let mut g = Graph::new();
    let bound = g.bind_where(params, trainable);
    let (loss, _) = episode_loss(&mut g, &bound, &arch, tcfg, &tensors, &mut rng)?;
    let report = loss.report(&g);
    if !report.is_finite() {
        return Err(Error::Diverged {
            iteration,
            seed: ep.seed,
            detail: format!("{report:?}"),
        });
    }
    let grads = g.backward(loss.total)?;
    let mut grads: ParamSet = bound
        .gradients(&g, &grads)
        .iter()
        .filter(|(k, _)| trainable(k))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let norm = clip_grad_norm(&mut grads, tcfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            iteration,
            seed: ep.seed,
            detail: "non-finite gradient".into(),
        });
    }
    let scale = lr_scale * warmup_factor(iteration, tcfg.warmup);
    sgd.step(params, &grads, |k| scale * lr_for(k, tcfg), tcfg.momentum, tcfg.weight_decay);
    Ok(report)
}

fn csv_row(out: &mut String, iteration: usize, seed: u64, lr_scale: f64, r: &LossReport) {
    let _ = writeln!(
        out,
        "{iteration},{seed},{lr_scale},{},{},{},{},{}",
        r.rpn_objectness, r.rpn_box, r.cls, r.box_reg, r.total
    );
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Base-class split of `dataset` under `cfg.data`.
pub fn base_split(cfg: &Config, dataset: &Dataset) -> Result<DatasetSplit> {
    split_classes(dataset, &cfg.data.base_classes, &cfg.data.novel_classes, &cfg.data)
}

/// Episodic training from fresh parameters.
///
/// With `out_dir`, writes `checkpoint-NNNNNN.ckpt` every
/// `training.checkpoint_every` iterations, `final.ckpt` and `losses.csv`.
pub fn train(cfg: &Config, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = init_params(&cfg.arch(), cfg.training.seed)?;
    train_from(cfg, dataset, params, out_dir)
}

/// Episodic training continuing from `params`.
pub fn train_from(cfg: &Config, dataset: &Dataset, mut params: ParamSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let split = base_split(cfg, dataset)?;
    split.check_disjoint()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tcfg = &cfg.training;
    let bcfg = cfg.backbone.clone();
    let trainable = move |k: &str| !backbone::is_frozen(&bcfg, k);
    let mut cache = ImageCache::new(dataset, cfg.data.max_image_side, cfg.data.support_size);
    let mut sgd = Sgd::default();
    let mut losses = Vec::with_capacity(tcfg.iterations);
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    for it in 0..tcfg.iterations {
        let seed = episode_seed(tcfg.seed, it);
        let ep = sample_episode(&split, tcfg.shots, seed)?;
        let report = step(cfg, tcfg, &mut params, &mut sgd, &mut cache, &ep, it, 1.0, &trainable)?;
        csv_row(&mut csv, it, seed, warmup_factor(it, tcfg.warmup), &report);
        if it % 50 == 0 {
            log::info!("iteration {it}: total loss {:.4}", report.total);
        }
        losses.push(report);
        if let Some(dir) = out_dir {
            if tcfg.checkpoint_every > 0 && (it + 1) % tcfg.checkpoint_every == 0 {
                checkpoint(cfg, params.clone(), it as u64 + 1).save(dir.join(format!("checkpoint-{:06}.ckpt", it + 1)))?;
                write_file(&dir.join("losses.csv"), csv.as_bytes())?;
            }
        }
    }
    let ckpt = checkpoint(cfg, params, tcfg.iterations as u64);
    if let Some(dir) = out_dir {
        ckpt.save(dir.join("final.ckpt"))?;
        write_file(&dir.join("losses.csv"), csv.as_bytes())?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, losses })
}

/// Episodes built from a fixed support set: the query is the image of one
/// support instance of `c1`, its targets are the `c1` instances of the set in
/// that image, and the prototypes come from the full sets of `c1` and of a
/// second class.
pub fn support_episode(supports: &BTreeMap<u64, Vec<SupportInstance>>, seed: u64) -> Result<Episode> {
    let classes: Vec<u64> = supports.iter().filter(|(_, v)| !v.is_empty()).map(|(&c, _)| c).collect();
    if classes.len() < 2 {
        return Err(Error::Data("fine-tuning needs supports of at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = classes[rng.random_range(0..classes.len())];
    let others: Vec<u64> = classes.iter().copied().filter(|&c| c != c1).collect();
    let c2 = others[rng.random_range(0..others.len())];
    let set = &supports[&c1];
    let pick = set[rng.random_range(0..set.len())];
    let targets: Vec<_> = set.iter().filter(|s| s.image == pick.image).map(|s| s.bbox).collect();
    Ok(Episode {
        seed,
        query: QueryImage {
            image: pick.image,
            boxes: targets.iter().map(|&b| (c1, b)).collect(),
        },
        c1,
        c2,
        targets,
        supports_c1: set.clone(),
        supports_c2: supports[&c2].clone(),
    })
}

/// Continues training the detection head (classifier, regressor and PRE
/// relation) on episodes synthesised from `supports` at `finetune.lr_scale`
/// times the training rates. Backbone, proposal and aggregation parameters
/// are left untouched.
///
/// `supports` must hold at least two classes; a single novel class is paired
/// with base supports by the caller.
pub fn fine_tune(ckpt: &Checkpoint, dataset: &Dataset, supports: &BTreeMap<u64, Vec<SupportInstance>>, cfg: &Config) -> Result<Checkpoint> {
    let model_cfg = checkpoint_config(ckpt)?;
    let fcfg = &cfg.finetune;
    if fcfg.iterations == 0 {
        return Ok(ckpt.clone());
    }
    let mut run_cfg = model_cfg.clone();
    run_cfg.training = cfg.training.clone();
    run_cfg.finetune = cfg.finetune.clone();
    let tcfg = &run_cfg.training;
    let trainable = |k: &str| k.starts_with("head.") || k.starts_with("pre.");
    let mut cache = ImageCache::new(dataset, run_cfg.data.max_image_side, run_cfg.data.support_size);
    let mut params = ckpt.params.clone();
    let mut sgd = Sgd::default();
    for it in 0..fcfg.iterations {
        let seed = episode_seed(fcfg.seed, it);
        let ep = support_episode(supports, seed)?;
        let r = step(&run_cfg, tcfg, &mut params, &mut sgd, &mut cache, &ep, it, fcfg.lr_scale, &trainable)?;
        if it % 50 == 0 {
            log::info!("fine-tune iteration {it}: total loss {:.4}", r.total);
        }
    }
    let mut out = checkpoint(&model_cfg, params, ckpt.meta.iteration + fcfg.iterations as u64);
    out.meta.seed = ckpt.meta.seed;
    Ok(out)
}
