//! Two-phase training: balanced random sampling, then hard mining, with
//! validation after every epoch, a one-way phase switch and early stopping.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{aggregate, Aggregation};
use crate::rng;
use crate::sampling::{Balance, BalancedBatches, BalancedQueue, Task, TilePools};
use crate::scorer::{cross_entropy, LrSchedule, TrainMode, TrainableScorer, POSITIVE};
use crate::slide_store::{ClassLabel, DatasetManifest, ManifestEntry, Split};
use crate::tiling::{annotation_tiles, extract_tile, tissue_tiles, TileRef, TilingConfig};
use crate::tissue::{tissue_mask, DEFAULT_MASK_MAGNIFICATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    RandomBalanced,
    HardMining,
}

/// What one validation result did to the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub improved: bool,
    pub switched: bool,
    pub stop: bool,
}

/// Validation-driven phase control. Epochs are counted from 1.
///
/// An epoch improves when its loss is below the best so far by at least
/// `min_delta`. After `switch_patience` consecutive non-improving epochs in
/// the random phase the machine moves to hard mining; after
/// `stop_patience` consecutive non-improving epochs in total it stops. The
/// stagnation counter runs across the switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMachine {
    pub phase: Phase,
    pub epoch: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub switched_at: Option<usize>,
    pub switch_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
}

impl PhaseMachine {
    pub fn new(switch_patience: usize, stop_patience: usize) -> Self {
        PhaseMachine {
            phase: Phase::RandomBalanced,
            epoch: 0,
            best: None,
            best_epoch: None,
            since_improvement: 0,
            switched_at: None,
            switch_patience,
            stop_patience,
            min_delta: 1e-6,
        }
    }

    pub fn observe(&mut self, validation_loss: f64) -> Transition {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some(b) => validation_loss < b - self.min_delta,
        };
        if improved {
            self.best = Some(validation_loss);
            self.best_epoch = Some(self.epoch);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        let switched = self.phase == Phase::RandomBalanced && self.since_improvement >= self.switch_patience;
        if switched {
            self.phase = Phase::HardMining;
            self.switched_at = Some(self.epoch);
        }
        Transition {
            improved,
            switched,
            stop: self.since_improvement >= self.stop_patience,
        }
    }
}

/// `k` hardest tiles of one slide: the most positive-looking tiles of a
/// negative slide, the least positive-looking of a positive slide. Ties go
/// to the smaller tile in `TileRef` order.
pub fn hard_mine_select(tile_probs: &[(TileRef, f64)], positive: bool, k: usize) -> Result<Vec<(TileRef, f64)>> {
    if tile_probs.is_empty() {
        return Err(Error::Argument("hard mining needs at least one tile".into()));
    }
    let mut v = tile_probs.to_vec();
    v.sort_by(|a, b| {
        let by_p = if positive { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) };
        by_p.then_with(|| a.0.cmp(&b.0))
    });
    v.truncate(k);
    Ok(v)
}

/// Mined tiles waiting to be trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct HardMiningPool {
    pub pending: Vec<(TileRef, usize)>,
    pub capacity: usize,
    pub batch_size: usize,
}

impl HardMiningPool {
    pub fn new(capacity: usize, batch_size: usize) -> Self {
        HardMiningPool {
            pending: Vec::new(),
            capacity,
            batch_size,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn push(&mut self, tile: TileRef, target: usize) {
        self.pending.push((tile, target));
    }

    pub fn is_full(&self) -> bool {
        self.pending.len() >= self.capacity
    }

    /// Shuffles the pool and removes every full batch. The remainder, fewer
    /// than `batch_size` tiles, stays for the next drain.
    pub fn drain_batches(&mut self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<(TileRef, usize)>> {
        self.pending.shuffle(rng);
        let full = self.pending.len() / self.batch_size * self.batch_size;
        let rest = self.pending.split_off(full);
        let batches = self
            .pending
            .chunks(self.batch_size)
            .map(<[_]>::to_vec)
            .collect();
        self.pending = rest;
        batches
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub balance: Balance,
    pub tiling: TilingConfig,
    pub batch_size: usize,
    /// Tiles mined per slide.
    pub k: usize,
    /// Pool size that triggers training on mined tiles.
    pub pool_capacity: usize,
    pub switch_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    /// Defaults by `train_mode` when absent.
    pub lr: Option<LrSchedule>,
    pub train_mode: TrainMode,
    /// Hidden widths of the reference model.
    pub hidden: Vec<usize>,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::OneStage,
            balance: Balance::Merged,
            tiling: TilingConfig::default(),
            batch_size: 32,
            k: 16,
            pool_capacity: 256,
            switch_patience: 2,
            stop_patience: 10,
            max_epochs: 100,
            lr: None,
            train_mode: TrainMode::PartialFineTune,
            hidden: vec![32, 32],
            aggregation: Aggregation::Max,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_schedule(&self) -> LrSchedule {
        self.lr.clone().unwrap_or_else(|| match self.train_mode {
            TrainMode::PartialFineTune => LrSchedule::finetune(),
            TrainMode::Full => LrSchedule::scratch(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        if self.batch_size == 0 || self.k == 0 || self.pool_capacity == 0 {
            return Err(Error::Configuration("batch_size, k and pool_capacity must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Configuration("hidden widths must be non-empty and positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Configuration("max_epochs must be positive".into()));
        }
        let lr = self.lr_schedule();
        if !(lr.base_lr > 0.0 && lr.decay > 0.0 && lr.interval > 0) {
            return Err(Error::Configuration("learning-rate schedule must be positive".into()));
        }
        Ok(())
    }
}

/// Candidate tiles of one slide with their cached embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideData {
    pub slide_id: String,
    pub label: ClassLabel,
    pub target: usize,
    pub pools: TilePools,
    embeddings: HashMap<TileRef, Vec<f64>>,
}

fn key(tile: &TileRef) -> TileRef {
    TileRef {
        label: None,
        ..tile.clone()
    }
}

impl SlideData {
    pub fn new(
        slide_id: impl Into<String>,
        label: ClassLabel,
        target: usize,
        pools: TilePools,
        embeddings: impl IntoIterator<Item = (TileRef, Vec<f64>)>,
    ) -> Result<Self> {
        let embeddings: HashMap<TileRef, Vec<f64>> = embeddings.into_iter().map(|(t, e)| (key(&t), e)).collect();
        let slide_id = slide_id.into();
        for t in pools.tissue.iter().chain(&pools.annotation) {
            if !embeddings.contains_key(&key(t)) {
                return Err(Error::Integrity(format!("slide {slide_id}: tile {:?} has no embedding", t.origin)));
            }
        }
        if pools.tissue.is_empty() {
            return Err(Error::NoTissue(format!("slide {slide_id} has no tissue tiles")));
        }
        Ok(SlideData {
            slide_id,
            label,
            target,
            pools,
            embeddings,
        })
    }

    pub fn embedding(&self, tile: &TileRef) -> &[f64] {
        &self.embeddings[&key(tile)]
    }

    /// Tiles hard mining chooses from: annotated regions for annotated
    /// positive slides, the whole tissue otherwise.
    pub fn mining_candidates(&self) -> &[TileRef] {
        if self.target == POSITIVE && self.pools.annotated && !self.pools.annotation.is_empty() {
            &self.pools.annotation
        } else {
            &self.pools.tissue
        }
    }
}

/// Tiles, annotation tiles and embeddings for each entry whose label takes
/// part in the task, in entry order. Slides without usable tissue are
/// returned separately with the error text.
pub fn prepare_slides<S: TrainableScorer>(
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    task: Task,
    tiling: &TilingConfig,
    scorer: &S,
) -> Result<(Vec<SlideData>, Vec<(String, String)>)> {
    let results: Vec<Option<Result<SlideData>>> = entries
        .par_iter()
        .map(|e| {
            let target = task.target(e.label)?;
            Some(load_slide_data(manifest, e, target, tiling, scorer))
        })
        .collect();
    let mut slides = Vec::new();
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            None => {}
            Some(Ok(s)) => slides.push(s),
            Some(Err(err @ (Error::NoTissue(_) | Error::EmptyTiling { .. }))) => {
                skipped.push((e.slide_id.clone(), err.to_string()))
            }
            Some(Err(err)) => return Err(err),
        }
    }
    Ok((slides, skipped))
}

fn load_slide_data<S: TrainableScorer>(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    target: usize,
    tiling: &TilingConfig,
    scorer: &S,
) -> Result<SlideData> {
    let slide = manifest.open(&entry.slide_id)?;
    let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION)?;
    let tissue = tissue_tiles(&slide, &mask, tiling)?;
    let ann = manifest.annotations(entry)?;
    let annotation = if ann.is_empty() {
        Vec::new()
    } else {
        annotation_tiles(&ann, tiling, (slide.width(), slide.height()))?
    };
    let mut unique: Vec<TileRef> = tissue.iter().chain(&annotation).map(key).collect();
    unique.sort();
    unique.dedup();
    let embeddings = unique
        .par_iter()
        .map(|t| {
            let img = extract_tile(&slide, t)?;
            Ok((t.clone(), scorer.embed(t, &img)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let pools = TilePools {
        annotated: !annotation.is_empty(),
        tissue,
        annotation,
    };
    SlideData::new(entry.slide_id.clone(), entry.label, target, pools, embeddings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub loss: f64,
    /// Slide-level positive probability per slide.
    pub probabilities: BTreeMap<String, f64>,
}

/// Positive probability of every tile in `tiles`, in order.
pub fn predict_tiles<S: TrainableScorer>(scorer: &S, slide: &SlideData, tiles: &[TileRef]) -> Vec<f64> {
    tiles
        .iter()
        .map(|t| scorer.predict(slide.embedding(t))[POSITIVE])
        .collect()
}

/// Mean slide-level cross-entropy, slide probabilities pooled over tissue
/// tiles with `aggregation`.
pub fn validate<S: TrainableScorer>(scorer: &S, slides: &[SlideData], aggregation: Aggregation) -> Result<ValidationResult> {
    if slides.is_empty() {
        return Err(Error::Configuration("validation split has no usable slides".into()));
    }
    let per_slide: Vec<(String, f64, usize)> = slides
        .par_iter()
        .map(|s| {
            let p = aggregate(&predict_tiles(scorer, s, &s.pools.tissue), aggregation)?;
            Ok((s.slide_id.clone(), p, s.target))
        })
        .collect::<Result<_>>()?;
    let loss = per_slide
        .iter()
        .map(|(_, p, y)| cross_entropy(&[1.0 - p, *p], *y))
        .sum::<f64>()
        / per_slide.len() as f64;
    Ok(ValidationResult {
        loss,
        probabilities: per_slide.into_iter().map(|(id, p, _)| (id, p)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedTile {
    pub tile: TileRef,
    pub p: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Start {
        seed: u64,
        config: TrainConfig,
        train_slides: usize,
        validation_slides: usize,
        skipped: Vec<(String, String)>,
    },
    InitialValidation {
        validation_loss: f64,
        probabilities: BTreeMap<String, f64>,
    },
    Mined {
        epoch: usize,
        slide_id: String,
        target: usize,
        candidates: usize,
        tiles: Vec<MinedTile>,
    },
    PoolTrain {
        epoch: usize,
        pool_size: usize,
        batch_sizes: Vec<usize>,
        carried: usize,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        phase: Phase,
        lr: f64,
        train_loss: Option<f64>,
        steps: usize,
        validation_loss: f64,
        improved: bool,
        best_validation_loss: f64,
        probabilities: BTreeMap<String, f64>,
    },
    PhaseSwitch {
        epoch: usize,
        from: Phase,
        to: Phase,
    },
    Stop {
        epoch: usize,
        reason: String,
        best_epoch: usize,
        best_validation_loss: f64,
    },
}

/// Collects log events, mirroring them to a JSON-lines file when given one.
pub struct TrainLog {
    pub events: Vec<LogEvent>,
    file: Option<(PathBuf, std::io::BufWriter<std::fs::File>)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog {
            events: Vec::new(),
            file: None,
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            events: Vec::new(),
            file: Some((path.to_path_buf(), std::io::BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, event: LogEvent) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&event).map_err(|e| Error::json(path.as_path(), e))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.events.push(event);
        Ok(())
    }
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub struct TrainOutcome<S> {
    pub best_model: S,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub initial_validation_loss: f64,
    pub epochs_run: usize,
    pub switched_at: Option<usize>,
}

/// Called with the model and epoch whenever validation improves.
pub type ImprovementHook<'a, S> = dyn FnMut(&S, usize, f64) -> Result<()> + 'a;

/// Runs the two-phase loop on prepared slides and returns the model with
/// the lowest validation loss.
pub fn run_training<S: TrainableScorer>(
    mut scorer: S,
    train: &[SlideData],
    validation: &[SlideData],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_improvement: Option<&mut ImprovementHook<'_, S>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let mut on_improvement = on_improvement;
    let seed = cfg.seed;
    let schedule = cfg.lr_schedule();

    let sample: Vec<&[f64]> = train
        .iter()
        .flat_map(|s| s.pools.tissue.iter().chain(&s.pools.annotation).map(move |t| s.embedding(t)))
        .collect();
    if sample.is_empty() {
        return Err(Error::Configuration("training split has no usable slides".into()));
    }
    scorer.prepare(&sample)?;

    let initial = validate(&scorer, validation, cfg.aggregation)?;
    log.push(LogEvent::InitialValidation {
        validation_loss: initial.loss,
        probabilities: initial.probabilities.clone(),
    })?;

    let by_id: HashMap<&str, &SlideData> = train.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let pools: HashMap<String, TilePools> = train.iter().map(|s| (s.slide_id.clone(), s.pools.clone())).collect();
    let queue_slides: Vec<(String, ClassLabel)> = train.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
    let queue = BalancedQueue::new(&queue_slides, &cfg.task.groups(cfg.balance), rng::derive_seed(seed, "queue"))?;
    let mut batches = BalancedBatches::new(queue, &pools, cfg.batch_size, rng::derive_seed(seed, "tiles"))?;

    let mut machine = PhaseMachine::new(cfg.switch_patience, cfg.stop_patience);
    let mut pool = HardMiningPool::new(cfg.pool_capacity, cfg.batch_size);
    let mut mining_rng = rng::stream(seed, "hard_mining");
    let mut best_model = scorer.clone();

    loop {
        let epoch = machine.epoch + 1;
        let lr = schedule.lr(epoch - 1);
        let phase = machine.phase;
        let mut losses = Vec::new();
        match phase {
            Phase::RandomBalanced => loop {
                let batch = batches.next_batch()?;
                let slide_of = |t: &TileRef| by_id[t.slide_id.as_str()];
                let embs: Vec<&[f64]> = batch.tiles.iter().map(|t| slide_of(t).embedding(t)).collect();
                let targets: Vec<usize> = batch.tiles.iter().map(|t| slide_of(t).target).collect();
                losses.push(finite(scorer.train_batch(&embs, &targets, lr)?, epoch)?);
                if batch.epoch_end {
                    break;
                }
            },
            Phase::HardMining => {
                let mut order: Vec<&SlideData> = train.iter().collect();
                order.shuffle(&mut mining_rng);
                for slide in order {
                    let candidates = slide.mining_candidates();
                    let probs = predict_tiles(&scorer, slide, candidates);
                    let scored: Vec<(TileRef, f64)> = candidates.iter().cloned().zip(probs).collect();
                    let mined = hard_mine_select(&scored, slide.target == POSITIVE, cfg.k)?;
                    for (t, _) in &mined {
                        pool.push(t.clone(), slide.target);
                    }
                    log.push(LogEvent::Mined {
                        epoch,
                        slide_id: slide.slide_id.clone(),
                        target: slide.target,
                        candidates: candidates.len(),
                        tiles: mined.into_iter().map(|(tile, p)| MinedTile { tile, p }).collect(),
                    })?;
                    if pool.is_full() {
                        let pool_size = pool.len();
                        let drained = pool.drain_batches(&mut mining_rng);
                        let mut pool_losses = Vec::new();
                        for b in &drained {
                            let embs: Vec<&[f64]> = b.iter().map(|(t, _)| by_id[t.slide_id.as_str()].embedding(t)).collect();
                            let targets: Vec<usize> = b.iter().map(|(_, y)| *y).collect();
                            pool_losses.push(finite(scorer.train_batch(&embs, &targets, lr)?, epoch)?);
                        }
                        log.push(LogEvent::PoolTrain {
                            epoch,
                            pool_size,
                            batch_sizes: drained.iter().map(Vec::len).collect(),
                            carried: pool.len(),
                            loss: mean(&pool_losses),
                        })?;
                        losses.extend(pool_losses);
                    }
                }
            }
        }

        let val = validate(&scorer, validation, cfg.aggregation)?;
        let tr = machine.observe(val.loss);
        if tr.improved {
            best_model = scorer.clone();
            if let Some(hook) = on_improvement.as_deref_mut() {
                hook(&scorer, epoch, val.loss)?;
            }
        }
        log.push(LogEvent::Epoch {
            epoch,
            phase,
            lr,
            train_loss: (!losses.is_empty()).then(|| mean(&losses)),
            steps: losses.len(),
            validation_loss: val.loss,
            improved: tr.improved,
            best_validation_loss: machine.best.expect("set after the first epoch"),
            probabilities: val.probabilities,
        })?;
        if tr.switched {
            log.push(LogEvent::PhaseSwitch {
                epoch,
                from: Phase::RandomBalanced,
                to: Phase::HardMining,
            })?;
        }
        let reason = if tr.stop {
            Some("patience")
        } else if epoch >= cfg.max_epochs {
            Some("max_epochs")
        } else {
            None
        };
        if let Some(reason) = reason {
            let best_epoch = machine.best_epoch.expect("set after the first epoch");
            let best = machine.best.expect("set after the first epoch");
            log.push(LogEvent::Stop {
                epoch,
                reason: reason.into(),
                best_epoch,
                best_validation_loss: best,
            })?;
            return Ok(TrainOutcome {
                best_model,
                best_epoch,
                best_validation_loss: best,
                initial_validation_loss: initial.loss,
                epochs_run: epoch,
                switched_at: machine.switched_at,
            });
        }
    }
}

fn finite(loss: f64, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Prepares the train and validation splits of `manifest` for `cfg.task`.
pub fn prepare_splits<S: TrainableScorer>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    scorer: &S,
) -> Result<(Vec<SlideData>, Vec<SlideData>, Vec<(String, String)>)> {
    let train_entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    let val_entries: Vec<&ManifestEntry> = manifest.split(Split::Validation).collect();
    let (train, mut skipped) = prepare_slides(manifest, &train_entries, cfg.task, &cfg.tiling, scorer)?;
    let (validation, s2) = prepare_slides(manifest, &val_entries, cfg.task, &cfg.tiling, scorer)?;
    skipped.extend(s2);
    Ok((train, validation, skipped))
}
