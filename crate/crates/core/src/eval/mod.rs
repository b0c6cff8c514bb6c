//! Novel-class evaluation and detection metrics.

pub mod evaluate;
pub mod metrics;

pub use evaluate::{
    draw_supports, evaluate, evaluate_detector, support_chips, Detector, EmptyDetector, EvalResult, ModelDetector, OracleDetector,
};
pub use metrics::{average_precision, compute_metrics, ImageResult, Metrics};
