//! Slide-level metrics: ROC AUC, ROC curves, log loss, percentile bootstrap
//! intervals, and per-source report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{write_json, Error, Result};
use crate::inference::{aggregate, Aggregation};
use crate::rng::derive_seed;
use crate::scorer::PROB_EPS;
use crate::slide_store::{ClassLabel, DatasetManifest, Split};

/// `(score, is_positive)`.
pub type Scored = (f64, bool);

fn class_counts(preds: &[Scored]) -> (usize, usize) {
    let p = preds.iter().filter(|x| x.1).count();
    (p, preds.len() - p)
}

fn require_both(preds: &[Scored]) -> Result<(usize, usize)> {
    let (p, n) = class_counts(preds);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes ({p} positive, {n} negative)"
        )));
    }
    Ok((p, n))
}

/// Mann-Whitney form: mid-ranks give ties half credit.
pub fn roc_auc(preds: &[Scored]) -> Result<f64> {
    let (np, nn) = require_both(preds)?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].0.total_cmp(&preds[b].0));
    // sum of doubled mid-ranks of positives keeps everything integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]].0 == preds[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let pos_in_group = order[i..=j].iter().filter(|&&k| preds[k].1).count() as u128;
        rank2_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let np128 = np as u128;
    let u2 = rank2_sum - np128 * (np128 + 1);
    Ok(u2 as f64 / (2.0 * np as f64 * nn as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `None` for the origin.
    pub threshold: Option<f64>,
}

/// One point per distinct score, from (0, 0) to (1, 1).
pub fn roc_curve(preds: &[Scored]) -> Result<Vec<RocPoint>> {
    let (np, nn) = require_both(preds)?;
    let mut sorted = preds.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / np as f64,
            threshold: Some(t),
        });
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mean binary cross-entropy with `p` clipped to `[1e-15, 1 - 1e-15]`.
pub fn log_loss(preds: &[Scored]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Argument("log loss of an empty set".into()));
    }
    let total: f64 = preds
        .iter()
        .map(|&(p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocAuc,
    LogLoss,
}

impl Metric {
    pub fn compute(&self, preds: &[Scored]) -> Result<f64> {
        match self {
            Metric::RocAuc => roc_auc(preds),
            Metric::LogLoss => log_loss(preds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iters: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iters: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Percentile interval over slide-level resamples with replacement.
///
/// Iteration `i` draws from its own stream seeded with `seed + i`, so the
/// result does not depend on scheduling. Resamples on which the metric is
/// undefined are redrawn from the same stream; more than `10 * iters` draws
/// in total is an error.
pub fn bootstrap_ci(preds: &[Scored], metric: Metric, cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    if preds.len() < 2 {
        return Err(Error::Argument(format!("bootstrap needs at least 2 slides, got {}", preds.len())));
    }
    if cfg.iters == 0 || !(0.0 < cfg.alpha && cfg.alpha < 1.0) {
        return Err(Error::Argument("bootstrap needs iters > 0 and alpha in (0, 1)".into()));
    }
    metric.compute(preds)?;
    let cap = 10 * cfg.iters;
    let n = preds.len();
    let results: Vec<(f64, usize)> = (0..cfg.iters)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let mut sample = Vec::with_capacity(n);
            for attempt in 1..=cap {
                sample.clear();
                sample.extend((0..n).map(|_| preds[rng.random_range(0..n)]));
                match metric.compute(&sample) {
                    Ok(v) => return Ok((v, attempt)),
                    Err(Error::UndefinedMetric(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::UndefinedMetric("bootstrap redraw limit reached".into()))
        })
        .collect::<Result<_>>()?;
    let draws: usize = results.iter().map(|r| r.1).sum();
    if draws > cap {
        return Err(Error::UndefinedMetric(format!(
            "bootstrap needed {draws} draws for {} iterations (limit {cap})",
            cfg.iters
        )));
    }
    let stats: Vec<f64> = results.into_iter().map(|r| r.0).collect();
    let lo = aggregate(&stats, Aggregation::Quantile { q: cfg.alpha / 2.0 })?;
    let hi = aggregate(&stats, Aggregation::Quantile { q: 1.0 - cfg.alpha / 2.0 })?;
    Ok((lo, hi))
}

/// Slide-level predictions of one method: slide id to `p_diffuse`.
pub type MethodPredictions = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub source: String,
    pub n_wsis: usize,
    pub n_positive: usize,
    /// `None` when the source has a single class.
    pub roc_auc: Option<f64>,
    pub roc_auc_ci: Option<(f64, f64)>,
    pub log_loss: f64,
    pub log_loss_ci: (f64, f64),
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bootstrap: BootstrapConfig,
    pub rows: Vec<ReportRow>,
}

/// One row per (method, source) over the test split. Positives are
/// diffuse-type slides.
pub fn build_report(
    manifest: &DatasetManifest,
    predictions: &BTreeMap<String, MethodPredictions>,
    cfg: &BootstrapConfig,
) -> Result<EvalReport> {
    let test: Vec<_> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Configuration("manifest has no test slides".into()));
    }
    let mut missing = BTreeSet::new();
    for preds in predictions.values() {
        for e in &test {
            if !preds.contains_key(&e.slide_id) {
                missing.insert(e.slide_id.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Completeness(missing.into_iter().collect()));
    }
    let mut rows = Vec::new();
    for (method, preds) in predictions {
        for source in manifest.sources(Split::Test) {
            let scored: Vec<Scored> = test
                .iter()
                .filter(|e| e.source == source)
                .map(|e| (preds[&e.slide_id], e.label == ClassLabel::DiffuseAdc))
                .collect();
            let row_cfg = BootstrapConfig {
                seed: derive_seed(cfg.seed, &format!("{method}/{source}")),
                ..*cfg
            };
            let (n_positive, _) = class_counts(&scored);
            let auc = roc_auc(&scored).ok();
            let (auc_ci, roc) = match auc {
                Some(_) => (
                    Some(bootstrap_ci(&scored, Metric::RocAuc, &row_cfg)?),
                    roc_curve(&scored)?,
                ),
                None => (None, Vec::new()),
            };
            rows.push(ReportRow {
                method: method.clone(),
                source,
                n_wsis: scored.len(),
                n_positive,
                roc_auc: auc,
                roc_auc_ci: auc_ci,
                log_loss: log_loss(&scored)?,
                log_loss_ci: bootstrap_ci(&scored, Metric::LogLoss, &row_cfg)?,
                roc,
            });
        }
    }
    Ok(EvalReport {
        bootstrap: *cfg,
        rows,
    })
}

fn with_ci(v: f64, ci: (f64, f64)) -> String {
    format!("{v:.4} [{:.4}, {:.4}]", ci.0, ci.1)
}

impl EvalReport {
    /// Plain-text table, intervals in brackets.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let header = ["method", "source", "wsis", "positive", "roc_auc", "log_loss"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.source.clone(),
                    r.n_wsis.to_string(),
                    r.n_positive.to_string(),
                    match (r.roc_auc, r.roc_auc_ci) {
                        (Some(a), Some(ci)) => with_ci(a, ci),
                        _ => "n/a".to_string(),
                    },
                    with_ci(r.log_loss, r.log_loss_ci),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut line = |cells: &[&str]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header);
        for r in &body {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            line(&cells);
        }
        out
    }

    /// `method,fpr,tpr,threshold` lines for one source.
    pub fn roc_csv(&self, source: &str) -> String {
        let mut out = String::from("method,fpr,tpr,threshold\n");
        for r in self.rows.iter().filter(|r| r.source == source) {
            for p in &r.roc {
                let t = p.threshold.map(|t| t.to_string()).unwrap_or_else(|| "inf".into());
                let _ = writeln!(out, "{},{},{},{}", r.method, p.fpr, p.tpr, t);
            }
        }
        out
    }

    /// Writes `report.json`, `report.txt` and one `roc_<source>.csv` per source.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.render_text()).map_err(|e| Error::io(&txt, e))?;
        let sources: BTreeSet<&str> = self.rows.iter().map(|r| r.source.as_str()).collect();
        for s in sources {
            let path = dir.join(format!("roc_{s}.csv"));
            std::fs::write(&path, self.roc_csv(s)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
