//! Dataset generation and the command-level operations: mask, tile, train,
//! infer and evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::evaluation::{build_report, BootstrapConfig, EvalReport, MethodPredictions};
use crate::inference::{aggregate_wsi, combine_two_stage, infer_slide, write_heatmap_outputs, Aggregation, Heatmap, Stage};
use crate::rng::{derive_seed, stream};
use crate::sampling::Task;
use crate::scorer::{Architecture, Checkpoint, Model, ReferenceModel, NUM_FEATURES};
use crate::slide_store::{
    generate_synthetic_slide, open_slide, write_slide, AnnotationSet, ClassLabel, DatasetManifest, Ellipse,
    ManifestEntry, Split, SyntheticSlideSpec, TextureStyle, TissueShape, ANNOTATIONS_FILE,
};
use crate::tiling::{annotation_tiles, TileRef, TilingConfig};
use crate::tissue::{tissue_mask, TissueMask, DEFAULT_MASK_MAGNIFICATION};
use crate::training::{prepare_splits, run_training, LogEvent, TrainConfig, TrainLog};

/// Slides per label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelCounts {
    pub diffuse_adc: usize,
    pub other_adc: usize,
    pub non_neoplastic: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.diffuse_adc + self.other_adc + self.non_neoplastic
    }

    fn labels(&self) -> Vec<ClassLabel> {
        let mut v = vec![ClassLabel::DiffuseAdc; self.diffuse_adc];
        v.extend(vec![ClassLabel::OtherAdc; self.other_adc]);
        v.extend(vec![ClassLabel::NonNeoplastic; self.non_neoplastic]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    #[serde(default)]
    pub style: TextureStyle,
    #[serde(default)]
    pub train: LabelCounts,
    #[serde(default)]
    pub validation: LabelCounts,
    #[serde(default)]
    pub test: LabelCounts,
}

fn default_side() -> u32 {
    896
}

fn default_lesions() -> (usize, usize) {
    (1, 3)
}

/// Synthetic dataset description, one entry per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    /// Inclusive range of lesion polygons per diffuse-type slide.
    #[serde(default = "default_lesions")]
    pub lesions_per_slide: (usize, usize),
    pub sources: Vec<SourceSpec>,
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Configuration("dataset spec has no sources".into()));
        }
        if self.width < 224 || self.height < 224 {
            return Err(Error::Configuration("slides must be at least 224 px on each side".into()));
        }
        let (lo, hi) = self.lesions_per_slide;
        if lo == 0 || lo > hi {
            return Err(Error::Configuration("lesions_per_slide must be a range [lo, hi] with lo >= 1".into()));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.sources {
            let ok = !s.name.is_empty() && s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok || !names.insert(s.name.as_str()) {
                return Err(Error::Configuration(format!("source name {:?} is empty, repeated or not [A-Za-z0-9_-]", s.name)));
            }
        }
        Ok(())
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "val",
        Split::Test => "test",
    }
}

/// Random tissue layout: one or two overlapping ellipses.
fn random_tissue(w: u32, h: u32, rng: &mut impl Rng) -> TissueShape {
    let n = rng.random_range(1..=2);
    let (fw, fh) = (w as f64, h as f64);
    let ellipses = (0..n)
        .map(|_| Ellipse {
            cx: fw * rng.random_range(0.35..0.65),
            cy: fh * rng.random_range(0.35..0.65),
            rx: fw * rng.random_range(0.25..0.42),
            ry: fh * rng.random_range(0.25..0.42),
        })
        .collect();
    TissueShape::Ellipses { ellipses }
}

/// Star-shaped lesion polygon centred inside the tissue. Most lesions are
/// smaller than one tile; the rest span several.
fn random_lesion(w: u32, h: u32, tissue: &TissueShape, rng: &mut impl Rng) -> Vec<[i64; 2]> {
    let (cx, cy) = loop {
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        if tissue.contains_pixel(x, y) {
            break (x as f64, y as f64);
        }
    };
    let radius = if rng.random_bool(0.6) {
        rng.random_range(20.0..45.0)
    } else {
        rng.random_range(70.0..160.0)
    };
    let n = rng.random_range(6..=10);
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.3..0.3)) / n as f64;
            let r = radius * rng.random_range(0.6..1.0);
            [
                (cx + r * a.cos()).round().clamp(0.0, w as f64) as i64,
                (cy + r * a.sin()).round().clamp(0.0, h as f64) as i64,
            ]
        })
        .collect()
}

/// Per-slide generation plan, fully determined by the dataset spec.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<(Vec<ManifestEntry>, Vec<SyntheticSlideSpec>)> {
    spec.validate()?;
    let mut entries = Vec::new();
    let mut slides = Vec::new();
    for source in &spec.sources {
        for (split, counts) in [
            (Split::Train, source.train),
            (Split::Validation, source.validation),
            (Split::Test, source.test),
        ] {
            let mut labels = counts.labels();
            labels.shuffle(&mut stream(spec.seed, &format!("labels/{}/{}", source.name, split_name(split))));
            for (i, label) in labels.into_iter().enumerate() {
                let slide_id = format!("{}_{}_{:03}", source.name, split_name(split), i);
                let seed = derive_seed(spec.seed, &slide_id);
                let mut rng = stream(seed, "layout");
                let tissue = random_tissue(spec.width, spec.height, &mut rng);
                let lesion_polygons = if label == ClassLabel::DiffuseAdc {
                    let n = rng.random_range(spec.lesions_per_slide.0..=spec.lesions_per_slide.1);
                    (0..n).map(|_| random_lesion(spec.width, spec.height, &tissue, &mut rng)).collect()
                } else {
                    Vec::new()
                };
                entries.push(ManifestEntry {
                    slide_id: slide_id.clone(),
                    source: source.name.clone(),
                    split,
                    label,
                    has_annotations: label == ClassLabel::DiffuseAdc,
                });
                slides.push(SyntheticSlideSpec {
                    slide_id,
                    width: spec.width,
                    height: spec.height,
                    label,
                    tissue,
                    lesion_polygons,
                    seed,
                    style: source.style.clone(),
                });
            }
        }
    }
    Ok((entries, slides))
}

/// Renders every slide of `spec` under `out` and writes the manifest.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let (entries, slides) = plan_dataset(spec)?;
    let manifest = DatasetManifest::new(out, entries)?;
    slides.par_iter().try_for_each(|s| -> Result<()> {
        let (pyramid, ann) = generate_synthetic_slide(s)?;
        let dir = manifest.slide_dir(&s.slide_id);
        write_slide(&pyramid, &dir)?;
        if !ann.is_empty() {
            ann.save(&dir.join(ANNOTATIONS_FILE))?;
        }
        Ok(())
    })?;
    manifest.save()?;
    write_json(&out.join("dataset_spec.json"), spec)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub slide_id: String,
    pub threshold: u8,
    pub tissue_fraction: f64,
    pub width: u32,
    pub height: u32,
}

/// Computes the tissue mask of a slide directory and writes `mask.png` and
/// `mask.json` into `out`.
pub fn mask_command(slide_dir: &Path, out: &Path) -> Result<(TissueMask, MaskSummary)> {
    let slide = open_slide(slide_dir)?;
    let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    mask.save_png(&out.join("mask.png"))?;
    let summary = MaskSummary {
        slide_id: slide.slide_id.clone(),
        threshold: mask.threshold_used,
        tissue_fraction: mask.tissue_fraction(),
        width: mask.width,
        height: mask.height,
    };
    write_json(&out.join("mask.json"), &summary)?;
    Ok((mask, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileListing {
    pub slide_id: String,
    pub config: TilingConfig,
    pub tissue_tiles: Vec<TileRef>,
    pub annotation_tiles: Vec<TileRef>,
}

/// Tissue tiles and, when the slide directory holds annotations, annotation
/// tiles.
pub fn tile_command(slide_dir: &Path, cfg: &TilingConfig) -> Result<TileListing> {
    let slide = open_slide(slide_dir)?;
    let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION)?;
    let tissue = crate::tiling::tissue_tiles(&slide, &mask, cfg)?;
    let ann_path = slide_dir.join(ANNOTATIONS_FILE);
    let annotation = if ann_path.is_file() {
        let ann = AnnotationSet::load(&ann_path)?;
        ann.validate(slide.width(), slide.height())?;
        if ann.is_empty() {
            Vec::new()
        } else {
            annotation_tiles(&ann, cfg, (slide.width(), slide.height()))?
        }
    } else {
        Vec::new()
    };
    Ok(TileListing {
        slide_id: slide.slide_id.clone(),
        config: cfg.clone(),
        tissue_tiles: tissue,
        annotation_tiles: annotation,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub initial_validation_loss: f64,
    pub epochs_run: usize,
    pub switched_at: Option<usize>,
    pub skipped: Vec<(String, String)>,
}

/// Fresh reference model for a training configuration.
pub fn initial_model(cfg: &TrainConfig) -> Model {
    let arch = Architecture {
        input_dim: NUM_FEATURES,
        hidden: cfg.hidden.clone(),
        classes: 2,
    };
    Model::Reference(ReferenceModel::new(
        arch,
        cfg.tiling.tile_px,
        cfg.train_mode,
        derive_seed(cfg.seed, "model_init"),
    ))
}

/// Trains `model` on the manifest's train split, validating on its
/// validation split. Writes `checkpoint.json` on every improvement and the
/// JSON-lines log `train.jsonl` into `out`.
pub fn train_command(manifest: &DatasetManifest, cfg: &TrainConfig, model: Model, out: &Path) -> Result<(Checkpoint, TrainSummary)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, validation, skipped) = prepare_splits(manifest, cfg, &model)?;
    let mut log = TrainLog::to_file(&out.join(TRAIN_LOG_FILE))?;
    log.push(LogEvent::Start {
        seed: cfg.seed,
        config: cfg.clone(),
        train_slides: train.len(),
        validation_slides: validation.len(),
        skipped: skipped.clone(),
    })?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut save = |m: &Model, epoch: usize, loss: f64| -> Result<()> {
        let mut ck = Checkpoint::new(cfg.task, cfg.tiling.clone(), m.clone());
        ck.epoch = epoch;
        ck.best_validation_loss = Some(loss);
        ck.save(&ck_path)
    };
    let outcome = run_training(model, &train, &validation, cfg, &mut log, Some(&mut save))?;
    let mut ck = Checkpoint::new(cfg.task, cfg.tiling.clone(), outcome.best_model);
    ck.epoch = outcome.best_epoch;
    ck.best_validation_loss = Some(outcome.best_validation_loss);
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_validation_loss: outcome.best_validation_loss,
        initial_validation_loss: outcome.initial_validation_loss,
        epochs_run: outcome.epochs_run,
        switched_at: outcome.switched_at,
        skipped,
    };
    Ok((ck, summary))
}

pub const PREDICTIONS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub p_diffuse: f64,
    /// Stage probabilities, present for two-stage runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_stage1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_stage2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideFailure {
    pub slide_id: String,
    pub kind: String,
    pub message: String,
}

/// Contents of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub format_version: u32,
    pub method: String,
    pub stage: Stage,
    pub aggregation: Aggregation,
    pub split: Split,
    pub predictions: Vec<SlidePrediction>,
    pub failures: Vec<SlideFailure>,
}

/// JSON Schema of the predictions file.
pub const PREDICTIONS_SCHEMA: &str = include_str!("../schema/predictions.schema.json");

impl Predictions {
    pub fn load(path: &Path) -> Result<Self> {
        let p: Predictions = read_json(path)?;
        if p.format_version != PREDICTIONS_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported predictions version {}", p.format_version),
            });
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn by_slide(&self) -> MethodPredictions {
        self.predictions.iter().map(|p| (p.slide_id.clone(), p.p_diffuse)).collect()
    }
}

#[derive(Debug, Clone)]
pub enum InferMode {
    OneStage(Checkpoint),
    TwoStage { stage1: Checkpoint, stage2: Checkpoint },
}

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub split: Split,
    pub aggregation: Aggregation,
    pub method: Option<String>,
    /// Write overlays and `heatmap.json` per slide under this directory.
    pub heatmap_dir: Option<PathBuf>,
}

fn slide_heatmap(manifest: &DatasetManifest, slide_id: &str, ck: &Checkpoint) -> Result<(crate::slide_store::SlidePyramid, Heatmap)> {
    let slide = manifest.open(slide_id)?;
    let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION)?;
    let hm = infer_slide(&slide, &mask, &ck.tiling, &ck.model)?;
    Ok((slide, hm))
}

fn infer_one(manifest: &DatasetManifest, slide_id: &str, mode: &InferMode, opts: &InferOptions) -> Result<SlidePrediction> {
    let heat_out = |sub: &str, slide: &crate::slide_store::SlidePyramid, hm: &Heatmap| -> Result<()> {
        if let Some(dir) = &opts.heatmap_dir {
            write_heatmap_outputs(hm, slide, DEFAULT_MASK_MAGNIFICATION, &dir.join(slide_id).join(sub))?;
        }
        Ok(())
    };
    match mode {
        InferMode::OneStage(ck) => {
            let (slide, hm) = slide_heatmap(manifest, slide_id, ck)?;
            heat_out("", &slide, &hm)?;
            Ok(SlidePrediction {
                slide_id: slide_id.to_string(),
                p_diffuse: aggregate_wsi(&hm, opts.aggregation)?,
                p_stage1: None,
                p_stage2: None,
            })
        }
        InferMode::TwoStage { stage1, stage2 } => {
            let (slide, h1) = slide_heatmap(manifest, slide_id, stage1)?;
            let (_, h2) = slide_heatmap(manifest, slide_id, stage2)?;
            heat_out("stage1", &slide, &h1)?;
            heat_out("stage2", &slide, &h2)?;
            let p1 = aggregate_wsi(&h1, opts.aggregation)?;
            let p2 = aggregate_wsi(&h2, opts.aggregation)?;
            Ok(SlidePrediction {
                slide_id: slide_id.to_string(),
                p_diffuse: combine_two_stage(p1, p2)?,
                p_stage1: Some(p1),
                p_stage2: Some(p2),
            })
        }
    }
}

/// Slide-level predictions for every entry of `opts.split`. A slide that
/// fails is recorded under `failures` and the run continues.
pub fn infer_command(manifest: &DatasetManifest, mode: &InferMode, opts: &InferOptions) -> Result<Predictions> {
    if let InferMode::TwoStage { stage1, stage2 } = mode {
        if stage1.task != Task::AdcDetection {
            return Err(Error::Configuration(format!(
                "stage-1 checkpoint was trained for {:?}, expected adc_detection",
                stage1.task
            )));
        }
        if stage2.task == Task::AdcDetection {
            return Err(Error::Configuration("stage-2 checkpoint must not be an adc_detection model".into()));
        }
    }
    let ids: Vec<&str> = manifest.split(opts.split).map(|e| e.slide_id.as_str()).collect();
    let results: Vec<Result<SlidePrediction>> = ids.par_iter().map(|id| infer_one(manifest, id, mode, opts)).collect();
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(p) => predictions.push(p),
            Err(e) => failures.push(SlideFailure {
                slide_id: id.to_string(),
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    let stage = match mode {
        InferMode::OneStage(_) => Stage::OneStage,
        InferMode::TwoStage { .. } => Stage::TwoStage,
    };
    let default_method = match stage {
        Stage::OneStage => "one_stage",
        Stage::TwoStage => "two_stage",
    };
    Ok(Predictions {
        format_version: PREDICTIONS_VERSION,
        method: opts.method.clone().unwrap_or_else(|| default_method.to_string()),
        stage,
        aggregation: opts.aggregation,
        split: opts.split,
        predictions,
        failures,
    })
}

/// Builds the report for one or more predictions files and writes it to
/// `out`.
pub fn evaluate_command(manifest: &DatasetManifest, predictions: &[Predictions], cfg: &BootstrapConfig, out: &Path) -> Result<EvalReport> {
    let mut methods: BTreeMap<String, MethodPredictions> = BTreeMap::new();
    for p in predictions {
        if methods.insert(p.method.clone(), p.by_slide()).is_some() {
            return Err(Error::Configuration(format!("method {:?} given twice", p.method)));
        }
    }
    let report = build_report(manifest, &methods, cfg)?;
    report.write(out)?;
    Ok(report)
}
