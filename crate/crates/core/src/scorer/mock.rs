//! Deterministic stand-in scorer for pipeline tests.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, TileScorer, TrainableScorer};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tiling::TileRef;

/// How the mock assigns a positive-class probability to a tile that is not
/// in its lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockMode {
    Constant { p: f64 },
    /// Pseudo-random in [0, 1), a fixed function of the seed and tile.
    Hashed { seed: u64 },
    /// Mean darkness of the tile, `1 - mean gray / 255`.
    Darkness,
}

/// Binary mock. Its embedding is the single value `p`, and prediction maps
/// it to `[1 - p, p]`. Training steps only report the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScorer {
    pub mode: MockMode,
    #[serde(skip)]
    table: HashMap<TileRef, f64>,
}

impl MockScorer {
    pub fn new(mode: MockMode) -> Self {
        MockScorer {
            mode,
            table: HashMap::new(),
        }
    }

    pub fn constant(p: f64) -> Self {
        Self::new(MockMode::Constant { p })
    }

    /// Fixes the probability of one tile; the tile's label is ignored.
    pub fn set(&mut self, tile: &TileRef, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(format!("mock probability {p} outside [0, 1]")));
        }
        self.table.insert(unlabelled(tile), p);
        Ok(())
    }

    pub fn probability(&self, tile: &TileRef, image: &RgbImage) -> f64 {
        if let Some(&p) = self.table.get(&unlabelled(tile)) {
            return p;
        }
        match &self.mode {
            MockMode::Constant { p } => *p,
            MockMode::Hashed { seed } => {
                let tag = format!("{}:{}:{}:{}", tile.slide_id, tile.magnification, tile.origin[0], tile.origin[1]);
                (derive_seed(*seed, &tag) >> 11) as f64 / (1u64 << 53) as f64
            }
            MockMode::Darkness => {
                let n = image.pixels().len().max(1) as f64;
                let gray: f64 = image.pixels().map(|p| crate::tissue::gray_of(p.0) as f64).sum();
                1.0 - gray / n / 255.0
            }
        }
    }
}

fn unlabelled(tile: &TileRef) -> TileRef {
    TileRef {
        label: None,
        ..tile.clone()
    }
}

impl TileScorer for MockScorer {
    fn num_classes(&self) -> usize {
        2
    }

    fn tile_px(&self) -> Option<u32> {
        None
    }

    fn embed(&self, tile: &TileRef, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(vec![self.probability(tile, image)])
    }

    fn predict(&self, embedding: &[f64]) -> Vec<f64> {
        let p = embedding[0].clamp(0.0, 1.0);
        vec![1.0 - p, p]
    }
}

impl TrainableScorer for MockScorer {
    fn prepare(&mut self, _sample: &[&[f64]]) -> Result<()> {
        Ok(())
    }

    fn train_batch(&mut self, embeddings: &[&[f64]], targets: &[usize], _lr: f64) -> Result<f64> {
        if embeddings.is_empty() || embeddings.len() != targets.len() {
            return Err(Error::Argument(format!(
                "mock batch of {} embeddings and {} targets",
                embeddings.len(),
                targets.len()
            )));
        }
        let total: f64 = embeddings
            .iter()
            .zip(targets)
            .map(|(e, &y)| cross_entropy(&self.predict(e), y))
            .sum();
        Ok(total / embeddings.len() as f64)
    }
}
