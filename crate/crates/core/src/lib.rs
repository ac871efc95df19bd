//! Siamese cosine adversarial fine-tuning for a toy image-text encoder,
//! with the white-box attacks and robust evaluation used to measure it.

pub mod attacks;
pub mod batch;
pub mod captions;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod losses;
pub mod presets;
pub mod record;
pub mod scalar;
pub mod text;

pub use batch::{EmbeddingBatch, ImageBatch, ImageShape};
pub use config::ExperimentConfig;
pub use encoder::{ArchSpec, ConvBlock, VisionEncoder};
pub use error::{Error, Result};
pub use eval::{EvalReport, TargetedAttackReport};
pub use finetune::{TrainConfig, TrainState};
pub use record::RunRecord;
pub use scalar::Scalar;
pub use text::{zero_shot_logits, TextEmbedder, TextHead};
