//! Tile scorers: the scoring interface, the reference trainable model, a
//! configurable mock, and checkpoints.

pub mod adam;
pub mod features;
pub mod mock;
pub mod reference;

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::sampling::Task;
use crate::tiling::{TileRef, TilingConfig};

pub use adam::{adam_step, AdamState, LrSchedule, BETA1, BETA2, EPSILON, FINETUNE_LR, SCRATCH_LR};
pub use features::{tile_features, NUM_FEATURES};
pub use mock::{MockMode, MockScorer};
pub use reference::{partial_finetune_mask, Architecture, ReferenceModel, TrainMode};

/// Probability clipping bound shared by the loss and the metrics.
pub const PROB_EPS: f64 = 1e-15;

/// Index of the positive class in every binary scorer.
pub const POSITIVE: usize = 1;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `-ln p[target]` with `p` clipped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Anything that maps a tile to a class distribution. Scoring is split into
/// an embedding step (expensive, fixed) and a prediction step on the
/// embedding (cheap, depends on trainable parameters), so training can cache
/// embeddings.
pub trait TileScorer: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Required tile edge, if the scorer checks it.
    fn tile_px(&self) -> Option<u32>;

    fn embed(&self, tile: &TileRef, image: &RgbImage) -> Result<Vec<f64>>;

    fn predict(&self, embedding: &[f64]) -> Vec<f64>;

    fn score_tile(&self, tile: &TileRef, image: &RgbImage) -> Result<Vec<f64>> {
        if let Some(px) = self.tile_px() {
            if image.dimensions() != (px, px) {
                return Err(Error::Shape(format!(
                    "tile image is {}x{}, scorer expects {px}x{px}",
                    image.width(),
                    image.height()
                )));
            }
        }
        Ok(self.predict(&self.embed(tile, image)?))
    }
}

pub trait TrainableScorer: TileScorer + Clone {
    /// Called once before training with a sample of embeddings.
    fn prepare(&mut self, sample: &[&[f64]]) -> Result<()>;

    /// One optimiser step on a batch; returns the batch loss before the step.
    fn train_batch(&mut self, embeddings: &[&[f64]], targets: &[usize], lr: f64) -> Result<f64>;
}

/// Serializable scorer of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Reference(ReferenceModel),
    Mock(MockScorer),
}

impl TileScorer for Model {
    fn num_classes(&self) -> usize {
        match self {
            Model::Reference(m) => m.num_classes(),
            Model::Mock(m) => m.num_classes(),
        }
    }

    fn tile_px(&self) -> Option<u32> {
        match self {
            Model::Reference(m) => m.tile_px(),
            Model::Mock(m) => m.tile_px(),
        }
    }

    fn embed(&self, tile: &TileRef, image: &RgbImage) -> Result<Vec<f64>> {
        match self {
            Model::Reference(m) => m.embed(tile, image),
            Model::Mock(m) => m.embed(tile, image),
        }
    }

    fn predict(&self, embedding: &[f64]) -> Vec<f64> {
        match self {
            Model::Reference(m) => m.predict(embedding),
            Model::Mock(m) => m.predict(embedding),
        }
    }
}

impl TrainableScorer for Model {
    fn prepare(&mut self, sample: &[&[f64]]) -> Result<()> {
        match self {
            Model::Reference(m) => m.prepare(sample),
            Model::Mock(m) => m.prepare(sample),
        }
    }

    fn train_batch(&mut self, embeddings: &[&[f64]], targets: &[usize], lr: f64) -> Result<f64> {
        match self {
            Model::Reference(m) => m.train_batch(embeddings, targets, lr),
            Model::Mock(m) => m.train_batch(embeddings, targets, lr),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task: Task,
    pub tiling: TilingConfig,
    pub model: Model,
    pub epoch: usize,
    pub best_validation_loss: Option<f64>,
}

impl Checkpoint {
    pub fn new(task: Task, tiling: TilingConfig, model: Model) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            task,
            tiling,
            model,
            epoch: 0,
            best_validation_loss: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported checkpoint version {}", ck.format_version),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_store::Magnification;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_edges() {
        assert!(cross_entropy(&[0.0, 1.0], 1) < 1e-14);
        assert!((cross_entropy(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1) - 15.0 * std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn tile_size_mismatch_is_shape_error() {
        let m = ReferenceModel::new(Architecture::default(), 224, TrainMode::PartialFineTune, 0);
        let t = TileRef {
            slide_id: "s".into(),
            magnification: Magnification::X20,
            origin: [0, 0],
            tile_px: 224,
            label: None,
        };
        let img = RgbImage::new(100, 100);
        assert!(matches!(m.score_tile(&t, &img), Err(Error::Shape(_))));
        let p = m.score_tile(&t, &RgbImage::new(224, 224)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ck = Checkpoint::new(
            Task::OneStage,
            TilingConfig::default(),
            Model::Reference(ReferenceModel::new(Architecture::default(), 224, TrainMode::Full, 5)),
        );
        ck.epoch = 7;
        ck.best_validation_loss = Some(0.123456789);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn reference_scores_are_distributions(seed in 0u64..1000, xs in proptest::collection::vec(-3.0f64..3.0, NUM_FEATURES)) {
            let m = ReferenceModel::new(Architecture::default(), 224, TrainMode::Full, seed);
            let p = m.predict(&xs);
            prop_assert_eq!(p.len(), 2);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
