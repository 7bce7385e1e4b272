//! Fixed per-tile feature extractor: colour statistics, gradient texture,
//! and dark-nucleus detection. It plays the role of the frozen backbone.

use image::RgbImage;

use crate::tissue::gray_of;

pub const NUM_FEATURES: usize = 16;

/// Gray level below which a pixel counts as nucleus-dark.
const DARK_GRAY: u8 = 100;
const MEDIUM_GRAY: u8 = 160;
const WHITE_GRAY: u8 = 235;
const MIN_BLOB_AREA: usize = 4;
const GRADIENT_EDGES: [u32; 3] = [8, 24, 64];

/// Feature layout:
///
/// | index | feature |
/// |-------|---------|
/// | 0-2   | mean R, G, B (/255) |
/// | 3-5   | std R, G, B (/255) |
/// | 6, 7  | mean and std of gray (/255) |
/// | 8-11  | gradient magnitude histogram, 4 bins (fractions) |
/// | 12    | fraction of dark pixels |
/// | 13    | fraction of medium-dark pixels |
/// | 14    | dark blobs per 10k pixels |
/// | 15    | fraction of near-white pixels |
pub fn tile_features(image: &RgbImage) -> [f64; NUM_FEATURES] {
    let (w, h) = image.dimensions();
    let n = (w as usize) * (h as usize);
    let mut f = [0.0; NUM_FEATURES];
    if n == 0 {
        return f;
    }
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    let mut gray = Vec::with_capacity(n);
    let (mut dark, mut medium, mut white) = (0usize, 0usize, 0usize);
    for p in image.pixels() {
        let g = gray_of(p.0);
        gray.push(g);
        let vals = [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64, g as f64];
        for c in 0..4 {
            sum[c] += vals[c];
            sq[c] += vals[c] * vals[c];
        }
        if g < DARK_GRAY {
            dark += 1;
        } else if g < MEDIUM_GRAY {
            medium += 1;
        }
        if g >= WHITE_GRAY {
            white += 1;
        }
    }
    let nf = n as f64;
    for c in 0..4 {
        let mean = sum[c] / nf;
        let var = (sq[c] / nf - mean * mean).max(0.0);
        let (mi, si) = if c < 3 { (c, c + 3) } else { (6, 7) };
        f[mi] = mean / 255.0;
        f[si] = var.sqrt() / 255.0;
    }

    let mut bins = [0usize; 4];
    let idx = |x: u32, y: u32| (y * w + x) as usize;
    for y in 0..h {
        for x in 0..w {
            let g = gray[idx(x, y)] as i32;
            let gx = if x + 1 < w { gray[idx(x + 1, y)] as i32 - g } else { 0 };
            let gy = if y + 1 < h { gray[idx(x, y + 1)] as i32 - g } else { 0 };
            let m = (gx.unsigned_abs()) + (gy.unsigned_abs());
            let b = GRADIENT_EDGES.iter().take_while(|&&e| m >= e).count();
            bins[b] += 1;
        }
    }
    for (i, &b) in bins.iter().enumerate() {
        f[8 + i] = b as f64 / nf;
    }
    f[12] = dark as f64 / nf;
    f[13] = medium as f64 / nf;
    f[14] = count_dark_blobs(&gray, w, h) as f64 * 10_000.0 / nf;
    f[15] = white as f64 / nf;
    f
}

/// 4-connected components of dark pixels with at least `MIN_BLOB_AREA`
/// pixels.
fn count_dark_blobs(gray: &[u8], w: u32, h: u32) -> usize {
    let (w, h) = (w as usize, h as usize);
    let mut seen = vec![false; gray.len()];
    let mut stack = Vec::new();
    let mut blobs = 0;
    for start in 0..gray.len() {
        if seen[start] || gray[start] >= DARK_GRAY {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && gray[j] < DARK_GRAY {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area >= MIN_BLOB_AREA {
            blobs += 1;
        }
    }
    blobs
}
