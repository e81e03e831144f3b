//! The hybrid encoder / CNN / BiLSTM classifier.

pub mod bilstm;
pub mod cnn;
pub mod config;
pub mod encoder;
pub mod head;
pub mod hybrid;
pub mod layers;

pub use config::ModelConfig;
pub use head::{cross_entropy_value, one_hot, smooth_targets};
pub use hybrid::{Batch, ForwardOutput, HybridModel};
pub use layers::{update_running_stats, BatchNorm, Dense, Forward};
