//! Dataset ingestion, class splits, support chips and episodes.

pub mod coco;
pub mod episode;
pub mod image_io;
pub mod split;
pub mod support;
pub mod synth;

pub use coco::{load_coco, parse_coco, Dataset};
pub use episode::{sample_episode, sample_supports, Episode};
pub use split::{split_classes, DatasetSplit, QueryImage, SupportInstance};
pub use support::{crop_support, fit_image, SupportChip};
