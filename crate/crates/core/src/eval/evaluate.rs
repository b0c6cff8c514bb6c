//! N-way K-shot evaluation on novel classes.
//!
//! For each seed, `k` supports are drawn per novel class from the novel
//! support pool, every novel query is run through the detector, and the
//! detections are scored against the novel annotations only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{build_prototype, ClassPrototype};
use crate::checkpoint::Checkpoint;
use crate::config::{ArchConfig, Config};
use crate::data::{crop_support, fit_image, sample_supports, split_classes, Dataset, DatasetSplit, QueryImage, SupportInstance};
use crate::error::{Error, Result};
use crate::head::{detect_with_prototypes, Detection};
use crate::model::checkpoint_config;
use crate::tensor::{ParamSet, Tensor};

use super::metrics::{compute_metrics, ImageResult, Metrics};

/// Anything that turns support chips and a query image into detections.
pub trait Detector {
    /// Registers the support chips of every class for the following queries.
    fn prepare(&mut self, supports: &BTreeMap<u64, Vec<Tensor>>) -> Result<()>;
    /// Detections in the coordinates of `image`.
    fn detect(&mut self, query: &QueryImage, image: &Tensor) -> Result<Vec<Detection>>;
}

/// The trained model behind the [`Detector`] interface.
pub struct ModelDetector {
    params: ParamSet,
    arch: ArchConfig,
    max_side: usize,
    prototypes: Vec<ClassPrototype>,
}

impl ModelDetector {
    pub fn new(params: ParamSet, arch: ArchConfig, max_side: usize) -> Self {
        ModelDetector {
            params,
            arch,
            max_side,
            prototypes: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = checkpoint_config(ckpt)?;
        Ok(Self::new(ckpt.params.clone(), cfg.arch(), cfg.data.max_image_side))
    }

    pub fn prototypes(&self) -> &[ClassPrototype] {
        &self.prototypes
    }
}

impl Detector for ModelDetector {
    fn prepare(&mut self, supports: &BTreeMap<u64, Vec<Tensor>>) -> Result<()> {
        self.prototypes = supports
            .iter()
            .map(|(&c, chips)| build_prototype(&self.params, &self.arch, c, chips))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn detect(&mut self, _query: &QueryImage, image: &Tensor) -> Result<Vec<Detection>> {
        let (fitted, scale) = fit_image(image, self.max_side)?;
        let mut dets = detect_with_prototypes(&fitted, &self.prototypes, &self.params, &self.arch)?;
        if scale != 1.0 {
            for d in &mut dets {
                d.bbox = d.bbox.scale(1.0 / scale);
            }
        }
        Ok(dets)
    }
}

/// Returns the ground truth of each query with score 1.
#[derive(Clone, Debug, Default)]
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn prepare(&mut self, _: &BTreeMap<u64, Vec<Tensor>>) -> Result<()> {
        Ok(())
    }

    fn detect(&mut self, query: &QueryImage, _: &Tensor) -> Result<Vec<Detection>> {
        Ok(query
            .boxes
            .iter()
            .map(|&(class_id, bbox)| Detection { bbox, class_id, score: 1.0 })
            .collect())
    }
}

/// Never detects anything.
#[derive(Clone, Debug, Default)]
pub struct EmptyDetector;

impl Detector for EmptyDetector {
    fn prepare(&mut self, _: &BTreeMap<u64, Vec<Tensor>>) -> Result<()> {
        Ok(())
    }

    fn detect(&mut self, _: &QueryImage, _: &Tensor) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }
}

/// The `k` supports per novel class used under `seed`.
pub fn draw_supports(split: &DatasetSplit, k: usize, seed: u64) -> Result<BTreeMap<u64, Vec<SupportInstance>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split
        .novel_classes
        .iter()
        .map(|&c| Ok((c, sample_supports(&split.novel_supports, c, k, None, &mut rng)?)))
        .collect()
}

/// Support chips for a drawn support set.
pub fn support_chips(dataset: &Dataset, supports: &BTreeMap<u64, Vec<SupportInstance>>, size: usize) -> Result<BTreeMap<u64, Vec<Tensor>>> {
    let mut images: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (&c, list) in supports {
        let mut chips = Vec::with_capacity(list.len());
        for s in list {
            if !images.contains_key(&s.image) {
                images.insert(s.image, dataset.load_image(s.image)?);
            }
            chips.push(crop_support(&images[&s.image], &s.bbox, size)?.pixels);
        }
        out.insert(c, chips);
    }
    Ok(out)
}

/// Metric mean and population standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub mean: Metrics,
    pub std: Metrics,
    pub per_seed: Vec<Metrics>,
}

/// CSV columns written by [`EvalResult::to_csv`].
pub const EVAL_CSV_HEADER: &str = "k,row,ap,ap50,ap75,aps,apm,apl,ar1,ar10,ar100";

fn stats(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    match v {
        Some(v) if !v.is_empty() => {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            (Some(m), Some(var.sqrt()))
        }
        _ => (None, None),
    }
}

fn summarise(per_seed: &[Metrics]) -> (Metrics, Metrics) {
    let pick = |f: &dyn Fn(&Metrics) -> Option<f64>| stats(&per_seed.iter().map(f).collect::<Vec<_>>());
    let both = |f: &dyn Fn(&Metrics) -> f64| {
        let (m, s) = pick(&|x| Some(f(x)));
        (m.unwrap_or(0.0), s.unwrap_or(0.0))
    };
    let (ap, ap_s) = both(&|m| m.ap);
    let (ap50, ap50_s) = both(&|m| m.ap50);
    let (ap75, ap75_s) = both(&|m| m.ap75);
    let (aps, aps_s) = pick(&|m| m.aps);
    let (apm, apm_s) = pick(&|m| m.apm);
    let (apl, apl_s) = pick(&|m| m.apl);
    let (ar1, ar1_s) = both(&|m| m.ar1);
    let (ar10, ar10_s) = both(&|m| m.ar10);
    let (ar100, ar100_s) = both(&|m| m.ar100);
    let mut pc_m = BTreeMap::new();
    let mut pc_s = BTreeMap::new();
    if let Some(first) = per_seed.first() {
        for &c in first.per_class.keys() {
            let (m, s) = pick(&|x| x.per_class.get(&c).copied());
            if let (Some(m), Some(s)) = (m, s) {
                pc_m.insert(c, m);
                pc_s.insert(c, s);
            }
        }
    }
    (
        Metrics { ap, ap50, ap75, aps, apm, apl, ar1, ar10, ar100, per_class: pc_m },
        Metrics {
            ap: ap_s,
            ap50: ap50_s,
            ap75: ap75_s,
            aps: aps_s,
            apm: apm_s,
            apl: apl_s,
            ar1: ar1_s,
            ar10: ar10_s,
            ar100: ar100_s,
            per_class: pc_s,
        },
    )
}

impl EvalResult {
    pub fn from_seeds(k: usize, seeds: Vec<u64>, per_seed: Vec<Metrics>) -> Self {
        let (mean, std) = summarise(&per_seed);
        EvalResult { k, seeds, mean, std, per_seed }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    /// One row per seed (`row` = the seed), then `mean` and `std` rows.
    /// Missing size buckets are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        let mut row = |label: String, m: &Metrics| {
            let _ = write!(out, "{},{label}", self.k);
            for (_, v) in m.columns() {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.6}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        };
        for (s, m) in self.seeds.iter().zip(&self.per_seed) {
            row(s.to_string(), m);
        }
        row("mean".into(), &self.mean);
        row("std".into(), &self.std);
        out
    }
}

/// Queries scored per seed; `max_queries == 0` keeps all of them.
fn queries(split: &DatasetSplit, max_queries: usize) -> &[QueryImage] {
    let n = split.novel_queries.len();
    let take = if max_queries == 0 { n } else { max_queries.min(n) };
    &split.novel_queries[..take]
}

/// Evaluates `detector` on the novel queries of `split`.
pub fn evaluate_detector<D: Detector + ?Sized>(
    detector: &mut D,
    dataset: &Dataset,
    split: &DatasetSplit,
    k: usize,
    seeds: &[u64],
    cfg: &Config,
) -> Result<EvalResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one seed".into()));
    }
    let qs = queries(split, cfg.evaluation.max_queries);
    let mut images = BTreeMap::new();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let drawn = draw_supports(split, k, seed)?;
        let chips = support_chips(dataset, &drawn, cfg.data.support_size)?;
        detector.prepare(&chips)?;
        let mut results = Vec::with_capacity(qs.len());
        for q in qs {
            if !images.contains_key(&q.image) {
                images.insert(q.image, dataset.load_image(q.image)?);
            }
            let dets = detector
                .detect(q, &images[&q.image])?
                .into_iter()
                .filter(|d| split.novel_classes.contains(&d.class_id))
                .collect();
            results.push(ImageResult {
                detections: dets,
                ground_truth: q.boxes.clone(),
            });
        }
        let m = compute_metrics(&results);
        log::info!("k={k} seed={seed}: AP {:.4} AP50 {:.4}", m.ap, m.ap50);
        per_seed.push(m);
    }
    Ok(EvalResult::from_seeds(k, seeds.to_vec(), per_seed))
}

/// Evaluates a checkpoint on the novel classes named in `cfg.data`.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, k: usize, seeds: &[u64], cfg: &Config) -> Result<EvalResult> {
    let split = split_classes(dataset, &cfg.data.base_classes, &cfg.data.novel_classes, &cfg.data)?;
    let mut det = ModelDetector::from_checkpoint(ckpt)?;
    evaluate_detector(&mut det, dataset, &split, k, seeds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_columns() {
        let m = Metrics {
            ap: 0.5,
            ap50: 0.75,
            ..Default::default()
        };
        let r = EvalResult::from_seeds(3, vec![1, 2], vec![m.clone(), m]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EVAL_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        for l in &lines {
            assert_eq!(l.split(',').count(), 11);
        }
        assert!(lines[3].starts_with("3,mean,0.500000,0.750000"));
        assert_eq!(r.std.ap, 0.0);
        let back: EvalResult = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
