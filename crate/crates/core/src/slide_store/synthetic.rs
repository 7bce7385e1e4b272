//! Deterministic synthetic slides, standing in for clinical scans.
//!
//! Texture model: near-white background, pink tissue with additive noise and
//! sparse pale nuclei. Other-ADC slides add gland-like rings; diffuse-type
//! slides add dense, very dark scattered nuclei inside the lesion polygons.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, ClassLabel, Polygon, SlidePyramid};
use crate::error::{Error, Result};
use crate::geometry;

/// Downsamples written for every generated slide: x20, x10 and the x1.25
/// thumbnail the tissue mask is computed on.
pub const GENERATED_DOWNSAMPLES: [u32; 3] = [1, 2, 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Where tissue lies on the slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TissueShape {
    Full,
    Empty,
    Rect { x0: u32, y0: u32, x1: u32, y1: u32 },
    Ellipses { ellipses: Vec<Ellipse> },
}

impl TissueShape {
    /// Ground-truth membership of pixel `(x, y)` (by pixel centre).
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            TissueShape::Full => true,
            TissueShape::Empty => false,
            TissueShape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            TissueShape::Ellipses { ellipses } => ellipses.iter().any(|e| e.contains(fx, fy)),
        }
    }
}

/// Stain and texture parameters. Sources differ by style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureStyle {
    pub background_gray: f64,
    pub background_sd: f64,
    pub tissue_rgb: [f64; 3],
    pub tissue_noise_sd: f64,
    pub nucleus_rgb: [f64; 3],
    /// Expected nuclei per tissue pixel.
    pub nucleus_density: f64,
    pub gland_rgb: [f64; 3],
    pub lumen_rgb: [f64; 3],
    pub gland_density: f64,
    pub lesion_rgb: [f64; 3],
    /// Expected dark nuclei per lesion pixel.
    pub lesion_density: f64,
}

impl Default for TextureStyle {
    fn default() -> Self {
        TextureStyle {
            background_gray: 250.0,
            background_sd: 2.0,
            tissue_rgb: [220.0, 180.0, 190.0],
            tissue_noise_sd: 6.0,
            nucleus_rgb: [165.0, 125.0, 175.0],
            nucleus_density: 1.0 / 1500.0,
            gland_rgb: [175.0, 115.0, 160.0],
            lumen_rgb: [238.0, 220.0, 228.0],
            gland_density: 1.0 / 5000.0,
            lesion_rgb: [70.0, 35.0, 95.0],
            lesion_density: 1.0 / 70.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub label: ClassLabel,
    pub tissue: TissueShape,
    #[serde(default)]
    pub lesion_polygons: Vec<Vec<[i64; 2]>>,
    pub seed: u64,
    #[serde(default)]
    pub style: TextureStyle,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn noisy(rgb: &[f64; 3], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|c| clamp_u8(rgb[c] + noise.sample(rng))))
}

/// Calls `f` for each pixel of a disk clipped to the image.
fn for_disk(w: u32, h: u32, cx: f64, cy: f64, r: f64, mut f: impl FnMut(u32, u32)) {
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as i64).min(w as i64 - 1);
    let y1 = ((cy + r).ceil() as i64).min(h as i64 - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as u32 {
        for x in x0..=x1 as u32 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                f(x, y);
            }
        }
    }
}

fn poisson_count(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Renders a slide and returns it with its annotations (the lesion polygons
/// exactly as given). Deterministic in `spec.seed`.
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec) -> Result<(SlidePyramid, AnnotationSet)> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::Argument("synthetic slide must have positive size".into()));
    }
    if !spec.lesion_polygons.is_empty() && spec.label != ClassLabel::DiffuseAdc {
        return Err(Error::Argument(format!(
            "slide {}: lesion polygons given for a {} slide",
            spec.slide_id, spec.label
        )));
    }
    let annotations = AnnotationSet {
        slide_id: spec.slide_id.clone(),
        polygons: spec
            .lesion_polygons
            .iter()
            .map(|v| Polygon::new(ClassLabel::DiffuseAdc, v.clone()))
            .collect(),
    };
    annotations.validate(w, h)?;

    let style = &spec.style;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_noise = Normal::new(0.0, style.background_sd.max(1e-9)).expect("finite sd");
    let tissue_noise = Normal::new(0.0, style.tissue_noise_sd.max(1e-9)).expect("finite sd");
    let blob_noise = Normal::new(0.0, 4.0).expect("finite sd");

    let lesion_px = |x: u32, y: u32| -> bool {
        annotations
            .polygons
            .iter()
            .any(|p| geometry::pixel_in_polygon(&p.vertices, x, y))
    };
    let mut tissue = vec![false; (w as usize) * (h as usize)];
    for y in 0..h {
        for x in 0..w {
            tissue[(y * w + x) as usize] = spec.tissue.contains_pixel(x, y) || lesion_px(x, y);
        }
    }
    let is_tissue = |x: u32, y: u32| tissue[(y * w + x) as usize];

    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = if is_tissue(x, y) {
                noisy(&style.tissue_rgb, &tissue_noise, &mut rng)
            } else {
                let v = (style.background_gray + bg_noise.sample(&mut rng))
                    .round()
                    .clamp(245.0, 255.0) as u8;
                Rgb([v, v, v])
            };
            img.put_pixel(x, y, px);
        }
    }

    // Sparse pale nuclei on all tissue: a Poisson process over the whole
    // slide thinned to tissue.
    let area = w as f64 * h as f64;
    for _ in 0..poisson_count(style.nucleus_density * area, &mut rng) {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let r = rng.random_range(2.0..3.0);
        if !is_tissue(cx as u32, cy as u32) {
            continue;
        }
        let color = noisy(&style.nucleus_rgb, &blob_noise, &mut rng);
        for_disk(w, h, cx, cy, r, |x, y| {
            if is_tissue(x, y) {
                img.put_pixel(x, y, color);
            }
        });
    }

    if spec.label == ClassLabel::OtherAdc {
        for _ in 0..poisson_count(style.gland_density * area, &mut rng) {
            let cx = rng.random::<f64>() * w as f64;
            let cy = rng.random::<f64>() * h as f64;
            let outer = rng.random_range(9.0..16.0);
            if !is_tissue(cx as u32, cy as u32) {
                continue;
            }
            let ring = noisy(&style.gland_rgb, &blob_noise, &mut rng);
            let lumen = noisy(&style.lumen_rgb, &blob_noise, &mut rng);
            let inner = outer - 3.0;
            for_disk(w, h, cx, cy, outer, |x, y| {
                if !is_tissue(x, y) {
                    return;
                }
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let c = if dx * dx + dy * dy <= inner * inner { lumen } else { ring };
                img.put_pixel(x, y, c);
            });
        }
    }

    for poly in &annotations.polygons {
        let (bx0, by0, bx1, by1) = poly.bounding_box();
        let bw = (bx1 - bx0) as f64;
        let bh = (by1 - by0) as f64;
        for _ in 0..poisson_count(style.lesion_density * bw * bh, &mut rng) {
            let cx = bx0 as f64 + rng.random::<f64>() * bw;
            let cy = by0 as f64 + rng.random::<f64>() * bh;
            let r = rng.random_range(2.0..4.0);
            if !poly.contains(cx, cy) {
                continue;
            }
            let color = noisy(&style.lesion_rgb, &blob_noise, &mut rng);
            for_disk(w, h, cx, cy, r, |x, y| {
                if geometry::pixel_in_polygon(&poly.vertices, x, y) {
                    img.put_pixel(x, y, color);
                }
            });
        }
    }

    let pyramid = SlidePyramid::from_base_image(spec.slide_id.clone(), img, &GENERATED_DOWNSAMPLES)?;
    Ok((pyramid, annotations))
}
