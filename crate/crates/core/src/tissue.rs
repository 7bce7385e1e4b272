//! Tissue detection: grayscale conversion, Otsu thresholding and the
//! thumbnail-resolution tissue mask that tiling is restricted to.

use std::io::BufWriter;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::slide_store::{Magnification, SlidePyramid};

/// Magnification the mask is computed at (downsample 16 from x20).
pub const DEFAULT_MASK_MAGNIFICATION: Magnification = Magnification::X1_25;

/// Luma of one pixel, `round(0.299 R + 0.587 G + 0.114 B)` in exact
/// integer arithmetic (halves round up).
pub fn gray_of(rgb: [u8; 3]) -> u8 {
    let [r, g, b] = rgb.map(u32::from);
    ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
}

pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        image::Luma([gray_of(image.get_pixel(x, y).0)])
    })
}

pub fn histogram(gray: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for p in gray.pixels() {
        h[p.0[0] as usize] += 1;
    }
    h
}

/// Otsu threshold over a 256-bin histogram.
///
/// Returns the `t` maximising the between-class variance of
/// `{gray <= t}` vs `{gray > t}`; the smallest such `t` on ties.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateHistogram("histogram is empty".into()));
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied < 2 {
        return Err(Error::DegenerateHistogram(
            "all mass in a single bin, nothing to separate".into(),
        ));
    }
    let n = total as i128;
    let sum_all: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();
    let (mut w0, mut s0) = (0i128, 0i128);
    let mut best = (0u8, f64::NEG_INFINITY);
    for t in 0..255usize {
        w0 += hist[t] as i128;
        s0 += t as i128 * hist[t] as i128;
        let w1 = n - w0;
        // n^2 * sigma_b^2 = (s0 * n - w0 * sum)^2 / (w0 * w1)
        let score = if w0 == 0 || w1 == 0 {
            0.0
        } else {
            let d = (s0 * n - w0 * sum_all) as f64;
            d * d / (w0 as f64 * w1 as f64)
        };
        if score > best.1 {
            best = (t as u8, score);
        }
    }
    Ok(best.0)
}

/// Boolean tissue map over a slide thumbnail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub magnification: Magnification,
    /// Level-0 pixels per mask cell along each axis.
    pub downsample: u32,
    pub threshold_used: u8,
    pub grid: Vec<bool>,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.grid[(y * self.width + x) as usize]
    }

    pub fn tissue_cells(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.tissue_cells() as f64 / self.grid.len() as f64
    }

    /// Area-weighted fraction of a level-0 rectangle covered by tissue cells.
    pub fn coverage(&self, rect: &Rect) -> f64 {
        let ds = self.downsample as f64;
        let area = rect.width() * rect.height();
        if area <= 0.0 {
            return 0.0;
        }
        let cx0 = (rect.x0 / ds).floor().max(0.0) as u32;
        let cy0 = (rect.y0 / ds).floor().max(0.0) as u32;
        let cx1 = ((rect.x1 / ds).ceil() as u32).min(self.width);
        let cy1 = ((rect.y1 / ds).ceil() as u32).min(self.height);
        let mut covered = 0.0;
        for cy in cy0..cy1 {
            let oy = (rect.y1.min((cy + 1) as f64 * ds) - rect.y0.max(cy as f64 * ds)).max(0.0);
            for cx in cx0..cx1 {
                if !self.get(cx, cy) {
                    continue;
                }
                let ox = (rect.x1.min((cx + 1) as f64 * ds) - rect.x0.max(cx as f64 * ds)).max(0.0);
                covered += ox * oy;
            }
        }
        covered / area
    }

    /// Writes the mask as a 1-bit grayscale PNG (white = tissue).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        let row_bytes = self.width.div_ceil(8) as usize;
        let mut data = vec![0u8; row_bytes * self.height as usize];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    data[y as usize * row_bytes + (x / 8) as usize] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&data).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }
}

/// Otsu-thresholds the grayscale thumbnail at `thumb_mag`. Tissue is the
/// dark class: a cell is tissue when its gray value is `<= t`.
pub fn tissue_mask(slide: &SlidePyramid, thumb_mag: Magnification) -> Result<TissueMask> {
    let downsample = slide.downsample_for(thumb_mag)?;
    let thumb = slide.thumbnail(thumb_mag)?;
    let gray = to_grayscale(&thumb);
    let t = otsu_threshold(&histogram(&gray)).map_err(|e| match e {
        Error::DegenerateHistogram(msg) => {
            Error::NoTissue(format!("slide {}: {msg}", slide.slide_id))
        }
        other => other,
    })?;
    let grid: Vec<bool> = gray.pixels().map(|p| p.0[0] <= t).collect();
    Ok(TissueMask {
        width: gray.width(),
        height: gray.height(),
        magnification: thumb_mag,
        downsample,
        threshold_used: t,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_store::synthetic::{Ellipse, TissueShape};
    use crate::slide_store::{generate_synthetic_slide, ClassLabel, SyntheticSlideSpec, TextureStyle};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Exhaustive oracle: class weights and means recomputed from scratch
    /// for every candidate threshold.
    fn otsu_oracle(hist: &[u64; 256]) -> u8 {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best = (0u8, -1.0f64);
        for t in 0..255usize {
            let w0: f64 = hist[..=t].iter().map(|&c| c as f64).sum();
            let w1: f64 = hist[t + 1..].iter().map(|&c| c as f64).sum();
            if w0 == 0.0 || w1 == 0.0 {
                if best.1 < 0.0 {
                    best = (t as u8, 0.0);
                }
                continue;
            }
            let m0 = hist[..=t].iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / w0;
            let m1 = hist[t + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + t + 1) as f64 * c as f64)
                .sum::<f64>()
                / w1;
            let var = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
            if var > best.1 {
                best = (t as u8, var);
            }
        }
        best.0
    }

    #[test]
    fn luma_examples() {
        assert_eq!(gray_of([255, 255, 255]), 255);
        assert_eq!(gray_of([0, 0, 0]), 0);
        assert_eq!(gray_of([100, 150, 200]), 141);
    }

    #[test]
    fn single_bin_is_degenerate() {
        let mut h = [0u64; 256];
        h[128] = 1000;
        assert!(matches!(otsu_threshold(&h), Err(Error::DegenerateHistogram(_))));
        assert!(matches!(otsu_threshold(&[0; 256]), Err(Error::DegenerateHistogram(_))));
    }

    #[test]
    fn two_spikes() {
        let mut h = [0u64; 256];
        h[50] = 500;
        h[200] = 500;
        let t = otsu_threshold(&h).unwrap();
        // every t in [50, 199] induces the same partition; the oracle and
        // the tie rule both pick the smallest
        assert_eq!(t, otsu_oracle(&h));
        assert_eq!(t, 50);
    }

    #[test]
    fn matches_brute_force_on_random_histograms() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut h = [0u64; 256];
            let occupied = rng.random_range(2..=256);
            for _ in 0..occupied {
                h[rng.random_range(0..256)] += rng.random_range(1..5000);
            }
            if h.iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            assert_eq!(otsu_threshold(&h).unwrap(), otsu_oracle(&h));
        }
    }

    proptest! {
        #[test]
        fn bimodal_threshold_lies_between_modes(lo in 20u8..100, hi in 150u8..240, a in 1u64..10_000, b in 1u64..10_000) {
            let mut h = [0u64; 256];
            h[lo as usize] = a;
            h[hi as usize] = b;
            let t = otsu_threshold(&h).unwrap();
            prop_assert!(t >= lo && t < hi);
        }
    }

    fn disk_slide(seed: u64, size: u32, r: f64) -> (SlidePyramid, TissueShape) {
        let shape = TissueShape::Ellipses {
            ellipses: vec![Ellipse {
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                rx: r,
                ry: r,
            }],
        };
        let spec = SyntheticSlideSpec {
            slide_id: "disk".into(),
            width: size,
            height: size,
            label: ClassLabel::NonNeoplastic,
            tissue: shape.clone(),
            lesion_polygons: vec![],
            seed,
            style: TextureStyle::default(),
        };
        (generate_synthetic_slide(&spec).unwrap().0, shape)
    }

    #[test]
    fn disk_on_white_recovered() {
        let (slide, shape) = disk_slide(3, 1600, 600.0);
        let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION).unwrap();
        let ds = mask.downsample;
        let (mut inter, mut union) = (0u32, 0u32);
        for cy in 0..mask.height {
            for cx in 0..mask.width {
                // ground truth at mask resolution: share of the cell's
                // level-0 pixels inside the disk
                let mut inside = 0;
                for y in cy * ds..(cy + 1) * ds {
                    for x in cx * ds..(cx + 1) * ds {
                        inside += shape.contains_pixel(x, y) as u32;
                    }
                }
                let m = mask.get(cx, cy);
                if inside == ds * ds {
                    assert!(m, "interior cell ({cx},{cy}) not detected");
                } else if inside == 0 {
                    assert!(!m, "background cell ({cx},{cy}) marked tissue");
                }
                let truth = inside * 2 >= ds * ds;
                inter += (truth && m) as u32;
                union += (truth || m) as u32;
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou > 0.98, "iou {iou}");
        // tissue is the dark class
        assert!(mask.threshold_used < 245);
    }

    #[test]
    fn all_white_slide_has_no_tissue() {
        let img = RgbImage::from_pixel(256, 256, image::Rgb([255, 255, 255]));
        let slide = SlidePyramid::from_base_image("white", img, &[1, 16]).unwrap();
        assert!(matches!(
            tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION),
            Err(Error::NoTissue(_))
        ));
    }

    #[test]
    fn two_mode_fraction_matches_histogram_count() {
        // All-tissue slide with two stain intensities in the thumbnail.
        let img = RgbImage::from_fn(320, 320, |x, y| {
            if (x / 16 + y / 16) % 3 == 0 {
                image::Rgb([90, 60, 110])
            } else {
                image::Rgb([220, 180, 190])
            }
        });
        let slide = SlidePyramid::from_base_image("two", img, &[1, 16]).unwrap();
        let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION).unwrap();
        let gray = to_grayscale(&slide.thumbnail(DEFAULT_MASK_MAGNIFICATION).unwrap());
        let h = histogram(&gray);
        let below: u64 = h[..=mask.threshold_used as usize].iter().sum();
        assert_eq!(mask.tissue_cells() as u64, below);
        assert!((mask.tissue_fraction() - below as f64 / gray.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn mask_is_pure() {
        let (slide, _) = disk_slide(4, 640, 200.0);
        let a = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION).unwrap();
        let b = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_is_area_weighted() {
        let mask = TissueMask {
            width: 2,
            height: 1,
            magnification: Magnification::X1_25,
            downsample: 16,
            threshold_used: 200,
            grid: vec![true, false],
        };
        assert_eq!(mask.coverage(&Rect::from_origin(0.0, 0.0, 32.0, 16.0)), 0.5);
        assert_eq!(mask.coverage(&Rect::from_origin(8.0, 0.0, 16.0, 16.0)), 0.5);
        assert_eq!(mask.coverage(&Rect::from_origin(0.0, 0.0, 16.0, 16.0)), 1.0);
    }

    #[test]
    fn png_export_is_one_bit() {
        let (slide, _) = disk_slide(4, 640, 200.0);
        let mask = tissue_mask(&slide, DEFAULT_MASK_MAGNIFICATION).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.png");
        mask.save_png(&p).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&p).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().bit_depth, png::BitDepth::One);
        let back = image::open(&p).unwrap().to_luma8();
        for (x, y, px) in back.enumerate_pixels() {
            assert_eq!(px.0[0] > 0, mask.get(x, y));
        }
    }
}
