//! Losses, episodic training and fine-tuning.

pub mod episode;
pub mod losses;
pub mod trainer;

pub use episode::{episode_loss, episode_loss_fixed, EpisodeTargets, EpisodeTensors, ImageCache};
pub use losses::{compute_losses, EpisodeOutputs, LossReport};
pub use trainer::{base_split, episode_seed, fine_tune, support_episode, train, train_from, TrainOutcome, LOSS_CSV_HEADER};
