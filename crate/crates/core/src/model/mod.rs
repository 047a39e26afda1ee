//! Configuration, transformer encoder and the end-to-end networks.

pub mod config;
pub mod network;
pub mod transformer;

pub use config::{parse_kv, Modalities, Modality, Mode, ModelConfig, RunConfig};
pub use network::{fuse, BlockRecord, ClassScores, Forward, Model};
pub use transformer::Encoder;
