//! Reward, policy network, training, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod net;
pub mod reward;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use net::{Architecture, PolicyNet};
pub use reward::{compute_reward, reward_from_terms, RewardWeights};
pub use train::{train, TrainConfig, TrainOutcome};
