//! Sliding-window inference, heatmaps, slide-level aggregation and the
//! two-stage probability product.

use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::scorer::{TileScorer, POSITIVE};
use crate::slide_store::{Magnification, SlidePyramid};
use crate::tiling::{extract_tile, grid_axes, TileRef, TilingConfig};
use crate::tissue::TissueMask;

pub const HEATMAP_FILE: &str = "heatmap.json";
pub const OVERLAY_FILE: &str = "overlay.png";
/// Overlay opacity at p = 1.
pub const OVERLAY_MAX_ALPHA: f64 = 0.6;

/// Per-tile positive probabilities on the sliding-window grid. Cells below
/// the tissue threshold are `None`.
///
/// Column `c` starts at working-magnification x position
/// `min(c * stride, extent[0] - tile_px)`, and likewise for rows, so the last
/// clamped column is recoverable from the geometry alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heatmap {
    pub slide_id: String,
    pub magnification: Magnification,
    pub tile_px: u32,
    pub stride: u32,
    /// Level-0 position of cell (0, 0).
    pub origin: [u32; 2],
    /// Slide size at the working magnification.
    pub extent: [u32; 2],
    /// Downsample of the working magnification relative to level 0.
    pub downsample: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.cols + col]
    }

    pub fn present_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Level-0 origin of a cell.
    pub fn cell_origin(&self, row: usize, col: usize) -> [u32; 2] {
        let axis = |i: usize, extent: u32| (i as u32 * self.stride).min(extent - self.tile_px);
        [
            self.origin[0] + axis(col, self.extent[0]) * self.downsample,
            self.origin[1] + axis(row, self.extent[1]) * self.downsample,
        ]
    }

    pub fn cell_tile(&self, row: usize, col: usize) -> TileRef {
        TileRef {
            slide_id: self.slide_id.clone(),
            magnification: self.magnification,
            origin: self.cell_origin(row, col),
            tile_px: self.tile_px,
            label: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Positive-class probability of each tile, in input order.
pub fn score_tiles<S: TileScorer + ?Sized>(slide: &SlidePyramid, tiles: &[TileRef], scorer: &S) -> Result<Vec<f64>> {
    if scorer.num_classes() <= POSITIVE {
        return Err(Error::Configuration("scorer has no positive class".into()));
    }
    tiles
        .par_iter()
        .map(|t| {
            let img = extract_tile(slide, t)?;
            Ok(scorer.score_tile(t, &img)?[POSITIVE])
        })
        .collect()
}

/// Scores every tissue tile of `slide` and lays the results out on the grid.
pub fn infer_slide<S: TileScorer + ?Sized>(
    slide: &SlidePyramid,
    mask: &TissueMask,
    cfg: &TilingConfig,
    scorer: &S,
) -> Result<Heatmap> {
    cfg.validate()?;
    let ds = slide.downsample_for(cfg.magnification)?;
    let extent = slide.working_extent(cfg.magnification)?;
    let (xs, ys) = grid_axes(extent, cfg.tile_px, cfg.stride_px)?;
    let cells: Vec<(usize, TileRef)> = crate::tiling::grid_tiles(slide, mask, cfg)?
        .into_iter()
        .filter(|g| g.tissue_fraction >= cfg.min_tissue_fraction)
        .map(|g| (g.row * xs.len() + g.col, g.tile))
        .collect();
    if cells.is_empty() {
        return Err(Error::NoTissue(format!(
            "slide {}: no tile reaches tissue fraction {}",
            slide.slide_id, cfg.min_tissue_fraction
        )));
    }
    let tiles: Vec<TileRef> = cells.iter().map(|(_, t)| t.clone()).collect();
    let probs = score_tiles(slide, &tiles, scorer)?;
    let mut values = vec![None; xs.len() * ys.len()];
    for ((idx, _), p) in cells.iter().zip(probs) {
        values[*idx] = Some(p);
    }
    Ok(Heatmap {
        slide_id: slide.slide_id.clone(),
        magnification: cfg.magnification,
        tile_px: cfg.tile_px,
        stride: cfg.stride_px,
        origin: [0, 0],
        extent: [extent.0, extent.1],
        downsample: ds,
        rows: ys.len(),
        cols: xs.len(),
        values,
    })
}

/// Slide-level pooling of tile probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    /// Linear-interpolation quantile, `q` in [0, 1].
    Quantile { q: f64 },
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Aggregation::Max => f.write_str("max"),
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Quantile { q } => write!(f, "quantile({q})"),
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => {
                let q = s
                    .strip_prefix("quantile(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("quantile:"))
                    .and_then(|q| q.parse::<f64>().ok())
                    .ok_or_else(|| Error::Argument(format!("unknown aggregation {s:?}")))?;
                Ok(Aggregation::Quantile { q })
            }
        }
    }
}

pub fn aggregate(values: &[f64], method: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty heatmap".into()));
    }
    match method {
        Aggregation::Max => Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Aggregation::Mean => Ok(values.iter().sum::<f64>() / values.len() as f64),
        Aggregation::Quantile { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Argument(format!("quantile {q} outside [0, 1]")));
            }
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
        }
    }
}

pub fn aggregate_wsi(heatmap: &Heatmap, method: Aggregation) -> Result<f64> {
    aggregate(&heatmap.present_values(), method)
}

/// `P(diffuse) = P(diffuse | ADC) * P(ADC)`.
pub fn combine_two_stage(p1_adc: f64, p2_diffuse_given_adc: f64) -> Result<f64> {
    for (name, p) in [("stage-1", p1_adc), ("stage-2", p2_diffuse_given_adc)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("{name} probability {p} outside [0, 1]")));
        }
    }
    Ok(p1_adc * p2_diffuse_given_adc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsiPrediction {
    pub slide_id: String,
    pub p_diffuse: f64,
    pub aggregation: Aggregation,
    pub stage: Stage,
}

/// Red overlay with opacity `OVERLAY_MAX_ALPHA * p`. A thumbnail pixel is
/// covered by a cell when its centre falls inside the cell's footprint; where
/// cells overlap the highest probability wins.
pub fn export_heatmap(heatmap: &Heatmap, thumbnail: &RgbImage, thumb_downsample: u32) -> RgbImage {
    let (tw, th) = thumbnail.dimensions();
    let mut best = vec![0.0f64; (tw * th) as usize];
    let fp = (heatmap.tile_px * heatmap.downsample) as f64;
    let t = thumb_downsample as f64;
    // pixel i is covered when x0 <= (i + 0.5) * t < x0 + fp
    let span = |x0: f64, limit: u32| {
        let first = (x0 / t - 0.5).ceil().max(0.0) as u32;
        let end = (((x0 + fp) / t - 0.5).ceil().max(0.0) as u32).min(limit);
        first..end
    };
    for row in 0..heatmap.rows {
        for col in 0..heatmap.cols {
            let Some(p) = heatmap.get(row, col) else { continue };
            let [x0, y0] = heatmap.cell_origin(row, col);
            for y in span(y0 as f64, th) {
                for x in span(x0 as f64, tw) {
                    let b = &mut best[(y * tw + x) as usize];
                    *b = b.max(p);
                }
            }
        }
    }
    let mut out = thumbnail.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let a = OVERLAY_MAX_ALPHA * best[i];
        if a <= 0.0 {
            continue;
        }
        let red = [255.0, 0.0, 0.0];
        *px = Rgb([0, 1, 2].map(|c| ((1.0 - a) * px.0[c] as f64 + a * red[c]).round() as u8));
    }
    out
}

/// Writes `overlay.png` and `heatmap.json` into `dir`.
pub fn write_heatmap_outputs(heatmap: &Heatmap, slide: &SlidePyramid, thumb_mag: Magnification, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let thumb = slide.thumbnail(thumb_mag)?;
    let ds = slide.downsample_for(thumb_mag)?;
    let overlay = export_heatmap(heatmap, &thumb, ds);
    let path = dir.join(OVERLAY_FILE);
    overlay.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    heatmap.save(&dir.join(HEATMAP_FILE))
}
