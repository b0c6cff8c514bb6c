//! COCO-style metric fixtures and invariants.

use airdet::eval::{average_precision, compute_metrics, ImageResult};
use airdet::head::Detection;
use airdet::BBox;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 4.0..120.0f64, 4.0..120.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// A detection near a ground-truth box, or anywhere.
fn image() -> impl Strategy<Value = ImageResult> {
    prop::collection::vec((1u64..3, bbox()), 0..5).prop_flat_map(|gts| {
        let n = gts.len();
        let det = (any::<bool>(), 0..n.max(1), -10.0..10.0f64, -10.0..10.0f64, bbox(), 1u64..3);
        prop::collection::vec(det, 0..8).prop_map(move |raw| {
            let detections = raw
                .into_iter()
                .map(|(near, j, dx, dy, free, class)| match gts.get(j) {
                    Some(&(c, b)) if near => Detection {
                        bbox: BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy),
                        class_id: c,
                        score: 0.0,
                    },
                    _ => Detection {
                        bbox: free,
                        class_id: class,
                        score: 0.0,
                    },
                })
                .collect();
            ImageResult {
                detections,
                ground_truth: gts.clone(),
            }
        })
    })
}

/// Images with distinct scores on a 1/1000 grid.
fn fixture() -> impl Strategy<Value = Vec<ImageResult>> {
    (prop::collection::vec(image(), 1..6), any::<u64>()).prop_map(|(mut images, salt)| {
        let total: usize = images.iter().map(|i| i.detections.len()).sum();
        let mut ranks: Vec<usize> = (0..total).collect();
        let mut state = salt;
        for i in (1..total).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ranks.swap(i, (state >> 33) as usize % (i + 1));
        }
        let mut next = ranks.into_iter();
        for img in &mut images {
            for d in &mut img.detections {
                d.score = (next.next().unwrap() + 1) as f64 / 1000.0;
            }
        }
        images
    })
}

fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id: 1,
        score,
    }
}

#[test]
fn perfect_detections_score_one() {
    let images = vec![
        ImageResult {
            detections: vec![det(0.0, 0.0, 40.0, 40.0, 0.9), det(50.0, 50.0, 200.0, 200.0, 0.8)],
            ground_truth: vec![(1, BBox::new(0.0, 0.0, 40.0, 40.0)), (1, BBox::new(50.0, 50.0, 200.0, 200.0))],
        },
        ImageResult {
            detections: vec![det(10.0, 10.0, 30.0, 20.0, 0.7)],
            ground_truth: vec![(1, BBox::new(10.0, 10.0, 30.0, 20.0))],
        },
    ];
    let m = compute_metrics(&images);
    assert_eq!((m.ap, m.ap50, m.ap75, m.ar100), (1.0, 1.0, 1.0, 1.0));
    assert_eq!((m.aps, m.apm, m.apl), (Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn false_positive_first_halves_ap() {
    // Precision is 1/2 at recall 1 and the envelope is flat, so all 101
    // recall points read 0.5.
    let images = vec![ImageResult {
        detections: vec![det(100.0, 100.0, 140.0, 140.0, 0.9), det(0.0, 0.0, 40.0, 40.0, 0.6)],
        ground_truth: vec![(1, BBox::new(0.0, 0.0, 40.0, 40.0))],
    }];
    assert_eq!(average_precision(&images, 0.5), 0.5);
    let m = compute_metrics(&images);
    assert_eq!(m.ap, 0.5);
    assert_eq!(m.ar1, 0.0);
    assert_eq!(m.ar10, 1.0);
}

#[test]
fn no_detections_score_zero() {
    let images = vec![ImageResult {
        detections: vec![],
        ground_truth: vec![(1, BBox::new(0.0, 0.0, 40.0, 40.0))],
    }];
    let m = compute_metrics(&images);
    assert_eq!((m.ap, m.ap50, m.ar100), (0.0, 0.0, 0.0));
    assert_eq!((m.aps, m.apm, m.apl), (None, Some(0.0), None));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn monotone_score_transform_is_invisible(images in fixture()) {
        let before = compute_metrics(&images);
        let transformed: Vec<ImageResult> = images
            .iter()
            .map(|img| ImageResult {
                detections: img
                    .detections
                    .iter()
                    .map(|d| Detection { score: 0.05 + 0.9 * d.score.powi(3), ..*d })
                    .collect(),
                ground_truth: img.ground_truth.clone(),
            })
            .collect();
        prop_assert_eq!(before, compute_metrics(&transformed));
    }

    #[test]
    fn ap_does_not_grow_with_the_threshold(images in fixture()) {
        let aps: Vec<f64> = (0..10).map(|i| average_precision(&images, 0.5 + 0.05 * i as f64)).collect();
        for w in aps.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", aps);
        }
    }

    #[test]
    fn metrics_stay_in_range(images in fixture()) {
        let m = compute_metrics(&images);
        for (name, v) in m.columns() {
            if let Some(v) = v {
                prop_assert!((0.0..=1.0).contains(&v), "{} = {}", name, v);
            }
        }
    }
}
