//! Reference tile classifier: fixed features, then hidden blocks of
//! `linear -> normalisation (fixed running statistics, learnable affine) ->
//! ReLU`, then a linear classification head with softmax.
//!
//! Parameter vector layout, block by block:
//! `[W_1, b_1, gamma_1, beta_1, ..., W_L, b_L, gamma_L, beta_L, W_head, b_head]`
//! with weights stored row-major as `out x in`.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::features::{tile_features, NUM_FEATURES};
use super::{cross_entropy, softmax, TileScorer, TrainableScorer};
use crate::error::{Error, Result};
use crate::tiling::TileRef;

/// Variance floor inside the normalisation layers.
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: NUM_FEATURES,
            hidden: vec![32, 32],
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    HeadWeight,
    HeadBias,
}

/// Contiguous run of parameters of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

impl Architecture {
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |kind, len| {
            out.push(ParamBlock { kind, offset, len });
            offset += len;
        };
        let mut fan_in = self.input_dim;
        for &h in &self.hidden {
            push(ParamKind::Weight, h * fan_in);
            push(ParamKind::Bias, h);
            push(ParamKind::NormScale, h);
            push(ParamKind::NormShift, h);
            fan_in = h;
        }
        push(ParamKind::HeadWeight, self.classes * fan_in);
        push(ParamKind::HeadBias, self.classes);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len).sum()
    }
}

/// Which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Normalisation affine parameters and the head only.
    #[default]
    PartialFineTune,
    Full,
}

/// Trainable mask: under partial fine-tuning, exactly the normalisation
/// scales and shifts plus the classifier head.
pub fn partial_finetune_mask(arch: &Architecture, mode: TrainMode) -> Vec<bool> {
    let mut mask = vec![false; arch.num_params()];
    for b in arch.blocks() {
        let on = match mode {
            TrainMode::Full => true,
            TrainMode::PartialFineTune => !matches!(b.kind, ParamKind::Weight | ParamKind::Bias),
        };
        mask[b.offset..b.offset + b.len].fill(on);
    }
    mask
}

/// Fixed statistics: input standardisation and per-block running
/// mean/variance. Not part of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub arch: Architecture,
    pub tile_px: u32,
    pub theta: Vec<f64>,
    pub mask: Vec<bool>,
    pub buffers: Buffers,
    pub adam: AdamState,
}

/// Activations kept for the backward pass.
struct Trace {
    input: Vec<f64>,
    /// per block: normalised pre-activation and post-ReLU output
    normed: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl ReferenceModel {
    /// Randomly initialised model (He-normal weights, unit scales, zero
    /// shifts and biases) with identity buffers.
    pub fn new(arch: Architecture, tile_px: u32, mode: TrainMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; arch.num_params()];
        let mut fan_in = arch.input_dim;
        let mut hidden = arch.hidden.iter();
        for b in arch.blocks() {
            let slot = &mut theta[b.offset..b.offset + b.len];
            match b.kind {
                ParamKind::Weight => {
                    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sd");
                    slot.iter_mut().for_each(|w| *w = n.sample(&mut rng));
                    fan_in = *hidden.next().expect("one weight block per hidden layer");
                }
                ParamKind::HeadWeight => {
                    let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid sd");
                    slot.iter_mut().for_each(|w| *w = n.sample(&mut rng));
                }
                ParamKind::NormScale => slot.fill(1.0),
                ParamKind::Bias | ParamKind::NormShift | ParamKind::HeadBias => slot.fill(0.0),
            }
        }
        let mask = partial_finetune_mask(&arch, mode);
        let trainable = mask.iter().filter(|&&m| m).count();
        let buffers = Buffers {
            input_mean: vec![0.0; arch.input_dim],
            input_std: vec![1.0; arch.input_dim],
            running_mean: arch.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            running_var: arch.hidden.iter().map(|&h| vec![1.0; h]).collect(),
        };
        ReferenceModel {
            arch,
            tile_px,
            theta,
            mask,
            buffers,
            adam: AdamState::new(trainable),
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Sets the input standardisation and running statistics from a sample
    /// of feature vectors, layer by layer.
    pub fn calibrate(&mut self, samples: &[&[f64]]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Argument("calibration needs at least one sample".into()));
        }
        let d = self.arch.input_dim;
        let n = samples.len() as f64;
        let (mean, std) = column_stats(samples.iter().copied(), d, n);
        self.buffers.input_mean = mean;
        self.buffers.input_std = std.into_iter().map(|s| s.max(1e-6)).collect();
        let mut current: Vec<Vec<f64>> = samples.iter().map(|x| self.standardise(x)).collect();
        let blocks = self.arch.blocks();
        for (l, &h) in self.arch.hidden.iter().enumerate() {
            let fan_in = current[0].len();
            let (wb, bb) = (blocks[4 * l], blocks[4 * l + 1]);
            let pre: Vec<Vec<f64>> = current
                .iter()
                .map(|z| self.linear(wb.offset, bb.offset, h, fan_in, z))
                .collect();
            let (m, s) = column_stats(pre.iter().map(Vec::as_slice), h, n);
            self.buffers.running_mean[l] = m;
            self.buffers.running_var[l] = s.iter().map(|v| v * v).collect();
            current = pre.iter().map(|a| self.norm_relu(l, a).1).collect();
        }
        Ok(())
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.buffers.input_mean)
            .zip(&self.buffers.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn linear(&self, w_off: usize, b_off: usize, out: usize, fan_in: usize, z: &[f64]) -> Vec<f64> {
        (0..out)
            .map(|o| {
                let row = &self.theta[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.theta[b_off + o]
            })
            .collect()
    }

    /// Returns (normalised, post-ReLU) for block `l`.
    fn norm_relu(&self, l: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let blocks = self.arch.blocks();
        let (g, b) = (blocks[4 * l + 2].offset, blocks[4 * l + 3].offset);
        let mean = &self.buffers.running_mean[l];
        let var = &self.buffers.running_var[l];
        let normed: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j]) / (var[j] + NORM_EPS).sqrt())
            .collect();
        let out = normed
            .iter()
            .enumerate()
            .map(|(j, n)| (self.theta[g + j] * n + self.theta[b + j]).max(0.0))
            .collect();
        (normed, out)
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let blocks = self.arch.blocks();
        let input = self.standardise(x);
        let mut z = input.clone();
        let mut normed = Vec::new();
        let mut outputs = Vec::new();
        for (l, &h) in self.arch.hidden.iter().enumerate() {
            let a = self.linear(blocks[4 * l].offset, blocks[4 * l + 1].offset, h, z.len(), &z);
            let (n, o) = self.norm_relu(l, &a);
            normed.push(n);
            outputs.push(o.clone());
            z = o;
        }
        let head_w = blocks[blocks.len() - 2].offset;
        let head_b = blocks[blocks.len() - 1].offset;
        let logits = self.linear(head_w, head_b, self.arch.classes, z.len(), &z);
        Trace {
            input,
            normed,
            outputs,
            probs: softmax(&logits),
        }
    }

    pub fn predict_features(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).probs
    }

    /// Mean cross-entropy over a batch and its gradient with respect to the
    /// full parameter vector.
    pub fn loss_and_full_gradient(&self, inputs: &[&[f64]], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
        if inputs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.arch.classes) {
            return Err(Error::Argument(format!("target class {t} outside the class set")));
        }
        let blocks = self.arch.blocks();
        let bsz = inputs.len() as f64;
        let mut grad = vec![0.0; self.theta.len()];
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(targets) {
            if x.len() != self.arch.input_dim {
                return Err(Error::Shape(format!(
                    "feature vector of length {}, expected {}",
                    x.len(),
                    self.arch.input_dim
                )));
            }
            let tr = self.forward(x);
            loss += cross_entropy(&tr.probs, y);
            // d loss / d logits = p - onehot(y), averaged over the batch
            let mut delta: Vec<f64> = tr.probs.clone();
            delta[y] -= 1.0;
            delta.iter_mut().for_each(|d| *d /= bsz);

            let (hw, hb) = (blocks[blocks.len() - 2].offset, blocks[blocks.len() - 1].offset);
            let last = tr.outputs.last().unwrap_or(&tr.input);
            let fan_in = last.len();
            let mut dz = vec![0.0; fan_in];
            for c in 0..self.arch.classes {
                grad[hb + c] += delta[c];
                for i in 0..fan_in {
                    grad[hw + c * fan_in + i] += delta[c] * last[i];
                    dz[i] += self.theta[hw + c * fan_in + i] * delta[c];
                }
            }
            for l in (0..self.arch.hidden.len()).rev() {
                let (w, b, g, s) = (
                    blocks[4 * l].offset,
                    blocks[4 * l + 1].offset,
                    blocks[4 * l + 2].offset,
                    blocks[4 * l + 3].offset,
                );
                let prev = if l == 0 { &tr.input } else { &tr.outputs[l - 1] };
                let fan_in = prev.len();
                let mut dprev = vec![0.0; fan_in];
                for j in 0..self.arch.hidden[l] {
                    if tr.outputs[l][j] <= 0.0 {
                        continue;
                    }
                    let dy = dz[j];
                    grad[g + j] += dy * tr.normed[l][j];
                    grad[s + j] += dy;
                    let da = dy * self.theta[g + j] / (self.buffers.running_var[l][j] + NORM_EPS).sqrt();
                    grad[b + j] += da;
                    for i in 0..fan_in {
                        grad[w + j * fan_in + i] += da * prev[i];
                        dprev[i] += self.theta[w + j * fan_in + i] * da;
                    }
                }
                dz = dprev;
            }
        }
        Ok((loss / bsz, grad))
    }

    /// Loss and gradient restricted to the trainable parameters, in
    /// `trainable_indices` order.
    pub fn loss_and_gradient(&self, inputs: &[&[f64]], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (loss, full) = self.loss_and_full_gradient(inputs, targets)?;
        let grad = self.trainable_indices().into_iter().map(|i| full[i]).collect();
        Ok((loss, grad))
    }

    pub fn loss(&self, inputs: &[&[f64]], targets: &[usize]) -> f64 {
        inputs
            .iter()
            .zip(targets)
            .map(|(x, &y)| cross_entropy(&self.forward(x).probs, y))
            .sum::<f64>()
            / inputs.len() as f64
    }
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize, n: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

impl TileScorer for ReferenceModel {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn tile_px(&self) -> Option<u32> {
        Some(self.tile_px)
    }

    fn embed(&self, _tile: &TileRef, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(tile_features(image).to_vec())
    }

    fn predict(&self, embedding: &[f64]) -> Vec<f64> {
        self.predict_features(embedding)
    }
}

impl TrainableScorer for ReferenceModel {
    fn prepare(&mut self, sample: &[&[f64]]) -> Result<()> {
        self.calibrate(sample)
    }

    fn train_batch(&mut self, embeddings: &[&[f64]], targets: &[usize], lr: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_gradient(embeddings, targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        let idx = self.trainable_indices();
        adam_step(&mut self.theta, &idx, &grad, &mut self.adam, lr)?;
        Ok(loss)
    }
}
