use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use slidemine::inference::{Aggregation, Heatmap, HEATMAP_FILE, OVERLAY_FILE};
use slidemine::pipeline::{
    generate_dataset, infer_command, initial_model, train_command, DatasetSpec, InferMode, InferOptions,
    LabelCounts, SourceSpec, TrainSummary,
};
use slidemine::scorer::{Checkpoint, TrainMode};
use slidemine::slide_store::{ClassLabel, DatasetManifest, Split, TextureStyle};
use slidemine::training::TrainConfig;

fn spec(seed: u64) -> DatasetSpec {
    let counts = |d, o, n| LabelCounts {
        diffuse_adc: d,
        other_adc: o,
        non_neoplastic: n,
    };
    DatasetSpec {
        seed,
        width: 672,
        height: 672,
        lesions_per_slide: (1, 3),
        sources: vec![SourceSpec {
            name: "s".into(),
            style: TextureStyle::default(),
            train: counts(8, 6, 8),
            validation: counts(3, 2, 3),
            test: counts(4, 2, 2),
        }],
    }
}

struct Trained {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    checkpoint: Checkpoint,
    summary: TrainSummary,
    root: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let manifest = generate_dataset(&spec(31), &root.join("data")).unwrap();
        let cfg = TrainConfig {
            train_mode: TrainMode::Full,
            max_epochs: 12,
            seed: 31,
            ..TrainConfig::default()
        };
        let (checkpoint, summary) = train_command(&manifest, &cfg, initial_model(&cfg), &root.join("train")).unwrap();
        Trained {
            _dir: dir,
            manifest,
            checkpoint,
            summary,
            root,
        }
    })
}

fn infer_with_heatmaps(t: &Trained, out: &Path) {
    let opts = InferOptions {
        split: Split::Test,
        aggregation: Aggregation::Max,
        method: None,
        heatmap_dir: Some(out.to_path_buf()),
    };
    let preds = infer_command(&t.manifest, &InferMode::OneStage(t.checkpoint.clone()), &opts).unwrap();
    assert!(preds.failures.is_empty(), "{:?}", preds.failures);
}

#[test]
fn training_lowers_validation_loss() {
    let t = trained();
    assert!(
        t.summary.best_validation_loss < t.summary.initial_validation_loss,
        "{:?}",
        t.summary
    );
    let saved = Checkpoint::load(&t.root.join("train").join("checkpoint.json")).unwrap();
    assert_eq!(saved, t.checkpoint);
}

#[test]
fn heatmap_is_brighter_on_lesions() {
    let t = trained();
    let out = t.root.join("heatmaps_lesion");
    infer_with_heatmaps(t, &out);
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for e in t.manifest.split(Split::Test).filter(|e| e.label == ClassLabel::DiffuseAdc) {
        let hm = Heatmap::load(&out.join(&e.slide_id).join(HEATMAP_FILE)).unwrap();
        assert!(out.join(&e.slide_id).join(OVERLAY_FILE).exists());
        let ann = t.manifest.annotations(e).unwrap();
        let side = (hm.tile_px * hm.downsample) as f64;
        for r in 0..hm.rows {
            for c in 0..hm.cols {
                let Some(p) = hm.get(r, c) else { continue };
                let [x, y] = hm.cell_origin(r, c).map(f64::from);
                let hit = |fx: f64, fy: f64| ann.polygons.iter().any(|poly| poly.contains(x + fx * side, y + fy * side));
                if hit(0.5, 0.5) {
                    inside.push(p);
                } else if ![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.5)].iter().any(|&(a, b)| hit(a, b)) {
                    outside.push(p);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!inside.is_empty() && !outside.is_empty());
    assert!(
        mean(&inside) > mean(&outside),
        "inside {:.3} over {} cells, outside {:.3} over {}",
        mean(&inside),
        inside.len(),
        mean(&outside),
        outside.len()
    );
}

#[test]
fn heatmaps_are_bit_identical_across_runs() {
    let t = trained();
    let (a, b) = (t.root.join("hm_a"), t.root.join("hm_b"));
    infer_with_heatmaps(t, &a);
    infer_with_heatmaps(t, &b);
    for e in t.manifest.split(Split::Test) {
        for f in [HEATMAP_FILE, OVERLAY_FILE] {
            let x = std::fs::read(a.join(&e.slide_id).join(f)).unwrap();
            let y = std::fs::read(b.join(&e.slide_id).join(f)).unwrap();
            assert!(x == y, "{} {f} differs", e.slide_id);
        }
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(5);
    s.sources[0].train = LabelCounts::default();
    s.sources[0].validation = LabelCounts::default();
    let a = generate_dataset(&s, &dir.path().join("a")).unwrap();
    generate_dataset(&s, &dir.path().join("b")).unwrap();
    assert_eq!(a.entries.len(), 8);
    let (fa, fb) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert!(fa.len() > 8 * 2);
    assert!(fa == fb);
}
