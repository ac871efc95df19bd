//! The packaged toy benchmark and the training recipes tuned for it.

use crate::attacks::Objective;
use crate::captions::caption_bank;
use crate::data::{ingest, Dataset, DatasetSpec};
use crate::encoder::{ArchSpec, VisionEncoder};
use crate::error::Result;
use crate::finetune::{InnerAttack, LossKind, TrainConfig};
use crate::text::{TextEmbedder, TextHead};

pub const EMBED_DIM: usize = 64;

/// Train and eval splits of the built-in image set plus its text head.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Dataset,
    pub eval: Dataset,
    pub head: TextHead,
}

impl Benchmark {
    /// 2500 synthetic 3x16x16 images in 10 classes, split 2000 / 500.
    pub fn builtin() -> Result<Self> {
        Self::from_spec(&DatasetSpec::default(), EMBED_DIM, 0)
    }

    pub fn from_spec(spec: &DatasetSpec, embed_dim: usize, text_seed: u64) -> Result<Self> {
        let splits = ingest(spec)?;
        let names = splits.train.class_names.clone();
        let head = TextHead::build(&TextEmbedder::new(embed_dim, text_seed), &names, caption_bank(&names))?;
        Ok(Self {
            train: splits.train,
            eval: splits.eval,
            head,
        })
    }

    /// Fresh encoder sized for this benchmark.
    pub fn init_encoder(&self, seed: u64) -> Result<VisionEncoder<f32>> {
        VisionEncoder::init(ArchSpec::small(self.train.images.shape(), self.head.dim()), seed)
    }
}

/// Clean supervised training through the frozen text head; the result is
/// the undefended encoder.
pub fn clean_pretrain() -> TrainConfig {
    TrainConfig {
        loss: LossKind::Tecoa,
        inner: InnerAttack {
            steps: 0,
            objective: Objective::CeUntargeted,
            ..InnerAttack::default()
        },
        lr: 2e-3,
        epochs: 50,
        ..TrainConfig::default()
    }
}

/// Siamese adversarial fine-tuning at budget `epsilon`.
pub fn simclip(epsilon: f64) -> TrainConfig {
    TrainConfig {
        epsilon,
        lr: 3e-5,
        warmup_steps: 5,
        total_steps: Some(450),
        ..TrainConfig::default()
    }
}
