//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout; exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use airdet::aggregation::{aggregate, init as init_glr};
use airdet::config::Config;
use airdet::data::synth::{write_synthetic, SynthConfig};
use airdet::data::Dataset;
use airdet::eval::{
    average_precision, compute_metrics, draw_supports, evaluate, EvalResult, ImageResult,
};
use airdet::head::{detect, merge, Detection};
use airdet::model::init_params;
use airdet::train::{base_split, fine_tune, train};
use airdet::{ArchConfig, BBox, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


const SHOTS: [usize; 3] = [1, 3, 5];
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        outcome(false, msg)
    });
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!("{tag}  {name}: {} [{:.1}s]", out.detail, t.elapsed().as_secs_f64());
    out.pass
}

fn timed(limit: Duration, cases: &[(&str, fn())]) -> Outcome {
    let t = Instant::now();
    for (_, case) in cases {
        case();
    }
    let took = t.elapsed();
    let names: Vec<&str> = cases.iter().map(|c| c.0).collect();
    outcome(took <= limit, format!("{} within {:.0}s of {:.0}s", names.join(", "), took.as_secs_f64(), limit.as_secs_f64()))
}

fn gradient_suite() -> Outcome {
    timed(
        Duration::from_secs(120),
        &[
            ("ops", gradients::elementwise_and_structural_ops),
            ("linear", gradients::linear_algebra_ops),
            ("losses", gradients::loss_ops),
            ("R_s/R_c", gradients::relation_modules),
            ("SCS/GLR/PRE/classifier", gradients::detector_modules),
            ("full loss", gradients::full_loss_on_micro_episode),
        ],
    )
}

fn oracle_equivalence() -> Outcome {
    timed(
        Duration::from_secs(120),
        &[
            ("conv/linear", oracles::conv_and_linear_match_loops),
            ("ROI-align", oracles::roi_align_matches_sampling_oracle),
            ("resize", oracles::resize_matches_interpolation_oracle),
            ("NMS", oracles::nms_matches_brute_force),
            ("GLR", oracles::aggregation_matches_scalar_reference),
            ("PRE", oracles::pre_embedding_matches_scalar_reference),
            ("losses", oracles::losses_match_scalar_reference),
        ],
    )
}

fn glr_algebra() -> Outcome {
    let mut worst_perm: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut worst_hull: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for cfg in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(cfg);
        let c = 2 * r.random_range(1..5);
        let a = r.random_range(1..5);
        let k = r.random_range(2..7);
        let mut arch = Config::default().arch();
        arch.backbone.widths = vec![c, c, c, c];
        arch.relation.prototype_size = a;
        let mut ps = ParamSet::new();
        init_glr(&arch, &mut ps, &mut r).unwrap();
        let shots: Vec<Tensor> = (0..k).map(|_| Tensor::uniform([c, a, a], -2.0, 2.0, &mut r)).collect();

        let (single, _) = aggregate(&shots[..1], &ps).unwrap();
        worst_identity = worst_identity.max(single.max_abs_diff(&shots[0]));

        let (e, trace) = aggregate(&shots, &ps).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left(1 + cfg as usize % (k - 1));
        perm.swap(0, k - 1);
        let shuffled: Vec<Tensor> = perm.iter().map(|&i| shots[i].clone()).collect();
        let (e2, _) = aggregate(&shuffled, &ps).unwrap();
        worst_perm = worst_perm.max(e.max_abs_diff(&e2));

        for i in 0..e.len() {
            let total: f64 = trace.m.iter().map(|m| m.data()[i]).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            let lo = shots.iter().map(|s| s.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = shots.iter().map(|s| s.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            worst_hull = worst_hull.max(lo - e.data()[i]).max(e.data()[i] - hi);
        }
    }
    outcome(
        worst_identity <= 1e-12 && worst_perm <= 1e-6 && worst_sum <= 1e-6 && worst_hull <= 1e-6,
        format!(
            "20 configs: k=1 identity {worst_identity:.1e}, permutation {worst_perm:.1e}, sum(M)-1 {worst_sum:.1e}, hull excess {:.1e}",
            worst_hull.max(0.0)
        ),
    )
}

fn tiny_arch() -> ArchConfig {
    let mut cfg = Config::default();
    for s in ["backbone.widths=[4,8,8,8]", "relation.prototype_size=3", "data.support_size=32"] {
        cfg.set(s).unwrap();
    }
    cfg.arch()
}

fn no_fine_tuning_contract() -> Outcome {
    let arch = tiny_arch();
    let params = init_params(&arch, 5).unwrap();
    let hash = params.content_hash();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let image = Tensor::uniform([3, 96, 128], 0.0, 1.0, &mut r);
    let mut supports = std::collections::BTreeMap::new();
    for class in [1u64, 2, 3] {
        supports.insert(class, (0..2).map(|_| Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut r)).collect::<Vec<_>>());
    }
    let dets = detect(&image, &supports, &params, &arch).unwrap();
    let sorted = |d: &[Detection]| d.windows(2).all(|w| w[0].score >= w[1].score);
    let candidates: Vec<Detection> = (0..300)
        .map(|i| Detection {
            bbox: BBox::new(0.0, 0.0, 10.0 + i as f64, 12.0),
            class_id: 1 + i % 3,
            score: r.random(),
        })
        .collect();
    let merged = merge(candidates, &arch);
    let ok = params.content_hash() == hash && dets.len() <= 100 && sorted(&dets) && merged.len() == 100 && sorted(&merged);
    outcome(
        ok,
        format!("parameter hash unchanged, {} detections sorted, 300 candidates merged to {}", dets.len(), merged.len()),
    )
}

fn det(b: BBox, score: f64) -> Detection {
    Detection { bbox: b, class_id: 1, score }
}

fn metric_correctness() -> Outcome {
    let g = BBox::new(0.0, 0.0, 40.0, 40.0);
    let perfect = vec![ImageResult {
        detections: vec![det(g, 0.9)],
        ground_truth: vec![(1, g)],
    }];
    let fp_first = vec![ImageResult {
        detections: vec![det(BBox::new(60.0, 60.0, 90.0, 90.0), 0.9), det(g, 0.5)],
        ground_truth: vec![(1, g)],
    }];
    let ap_perfect = compute_metrics(&perfect).ap;
    let ap_half = average_precision(&fp_first, 0.5);
    let mut invariant = 0;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<ImageResult> = (0..r.random_range(1..6))
            .map(|_| {
                let gts: Vec<(u64, BBox)> = (0..r.random_range(0..5))
                    .map(|_| {
                        let (x, y) = (r.random_range(0.0..150.0), r.random_range(0.0..150.0));
                        (r.random_range(1..3), BBox::new(x, y, x + r.random_range(5.0..100.0), y + r.random_range(5.0..100.0)))
                    })
                    .collect();
                let detections = (0..r.random_range(0..8))
                    .map(|_| {
                        let (class_id, b) = if !gts.is_empty() && r.random_bool(0.6) {
                            let (c, b) = gts[r.random_range(0..gts.len())];
                            let j = r.random_range(-8.0..8.0);
                            (c, BBox::new(b.x1 + j, b.y1, b.x2 + j, b.y2))
                        } else {
                            let (x, y) = (r.random_range(0.0..150.0), r.random_range(0.0..150.0));
                            (r.random_range(1..3), BBox::new(x, y, x + 30.0, y + 30.0))
                        };
                        Detection {
                            bbox: b,
                            class_id,
                            score: r.random_range(1..1000) as f64 / 1000.0,
                        }
                    })
                    .collect();
                ImageResult {
                    detections,
                    ground_truth: gts,
                }
            })
            .collect();
        let warped: Vec<ImageResult> = images
            .iter()
            .map(|im| ImageResult {
                detections: im.detections.iter().map(|d| Detection { score: (3.0 * d.score).exp() / 50.0, ..*d }).collect(),
                ground_truth: im.ground_truth.clone(),
            })
            .collect();
        if compute_metrics(&images) == compute_metrics(&warped) {
            invariant += 1;
        }
    }
    outcome(
        ap_perfect == 1.0 && ap_half == 0.5 && invariant == 50,
        format!("perfect AP {ap_perfect}, FP-first AP {ap_half}, monotone-transform invariant on {invariant}/50 fixtures"),
    )
}

struct Experiment {
    dataset: Dataset,
    config: Config,
    full: airdet::checkpoint::Checkpoint,
    full_results: Vec<EvalResult>,
}

fn synthetic_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    Config::load(path).unwrap()
}

fn eval_all(ckpt: &airdet::checkpoint::Checkpoint, ds: &Dataset, cfg: &Config) -> Vec<EvalResult> {
    SHOTS.iter().map(|&k| evaluate(ckpt, ds, k, &SEEDS, cfg).unwrap()).collect()
}

fn synthetic_experiment(dir: &Path, slot: &mut Option<Experiment>) -> Outcome {
    let dataset = write_synthetic(dir, &SynthConfig::default()).unwrap();
    let config = synthetic_config();
    assert_eq!(config.training.iterations, 2000);

    let full = train(&config, &dataset, None).unwrap().checkpoint;
    let full_results = eval_all(&full, &dataset, &config);
    let mut ablated_cfg = config.clone();
    for s in ["relation.scs=false", "relation.glr=false", "relation.pre=false"] {
        ablated_cfg.set(s).unwrap();
    }
    let ablated = train(&ablated_cfg, &dataset, None).unwrap().checkpoint;
    let ablated5 = evaluate(&ablated, &dataset, 5, &SEEDS, &ablated_cfg).unwrap();
    let again = evaluate(&full, &dataset, 5, &SEEDS, &config).unwrap();

    let ap = |k: usize| full_results[SHOTS.iter().position(|&s| s == k).unwrap()].mean.ap;
    let trend = ap(5) >= ap(1);
    let ablation = ap(5) >= ablated5.mean.ap;
    let exact = again.to_json() == full_results[2].to_json();
    let per_k: Vec<String> = SHOTS
        .iter()
        .zip(&full_results)
        .map(|(k, r)| format!("{k}-shot AP {:.4}±{:.4}", r.mean.ap, r.std.ap))
        .collect();
    let detail = format!(
        "{}; (a) 5-shot >= 1-shot {}; (b) full {:.4} vs ablated {:.4} {}; (c) re-evaluation bit-exact {}",
        per_k.join(", "),
        verdict(trend),
        ap(5),
        ablated5.mean.ap,
        verdict(ablation),
        verdict(exact)
    );
    *slot = Some(Experiment {
        dataset,
        config,
        full,
        full_results,
    });
    outcome(trend && ablation && exact, detail)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "NOT MET"
    }
}

fn fine_tune_variant(exp: &Experiment) -> Outcome {
    let split = base_split(&exp.config, &exp.dataset).unwrap();
    let mut cfg = exp.config.clone();
    cfg.finetune.iterations = 200;
    let before = exp.full_results[2].mean.ap50;
    let mut after = Vec::new();
    let mut frozen = true;
    for &seed in &SEEDS {
        let supports = draw_supports(&split, 5, seed).unwrap();
        let tuned = fine_tune(&exp.full, &exp.dataset, &supports, &cfg).unwrap();
        frozen &= tuned.params.subset("backbone.") == exp.full.params.subset("backbone.");
        let r = evaluate(&tuned, &exp.dataset, 5, &[seed], &exp.config).unwrap();
        after.push(r.mean.ap50);
    }
    let after_mean = after.iter().sum::<f64>() / after.len() as f64;
    outcome(
        after_mean >= before && frozen,
        format!("5-shot AP50 {before:.4} -> {after_mean:.4} after 200 iterations, backbone bit-identical {frozen}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut ok = true;
    ok &= run("gradient suite", gradient_suite);
    ok &= run("oracle equivalence", oracle_equivalence);
    ok &= run("GLR algebra", glr_algebra);
    ok &= run("no-fine-tuning contract", no_fine_tuning_contract);
    ok &= run("metric correctness", metric_correctness);
    let dir = tempfile::tempdir().unwrap();
    let mut exp = None;
    ok &= run("synthetic-shapes experiment", || synthetic_experiment(dir.path(), &mut exp));
    match &exp {
        Some(e) => ok &= run("fine-tune variant", || fine_tune_variant(e)),
        None => {
            println!("FAIL  fine-tune variant: no trained checkpoint");
            ok = false;
        }
    }
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}
