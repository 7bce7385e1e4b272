use std::path::PathBuf;
use std::sync::OnceLock;

use image::RgbImage;

use super::Magnification;
use crate::error::{Error, Result};

/// One pyramid level. Pixels live either in memory or in a PNG that is
/// decoded on first access.
#[derive(Debug)]
pub struct Level {
    pub width: u32,
    pub height: u32,
    pub downsample: u32,
    path: Option<PathBuf>,
    pixels: OnceLock<RgbImage>,
}

impl Level {
    pub fn in_memory(image: RgbImage, downsample: u32) -> Self {
        let (width, height) = image.dimensions();
        let pixels = OnceLock::new();
        let _ = pixels.set(image);
        Level {
            width,
            height,
            downsample,
            path: None,
            pixels,
        }
    }

    pub fn on_disk(path: PathBuf, width: u32, height: u32, downsample: u32) -> Self {
        Level {
            width,
            height,
            downsample,
            path: Some(path),
            pixels: OnceLock::new(),
        }
    }

    pub fn is_loaded(&self) -> bool {
        self.pixels.get().is_some()
    }

    /// Pixel store of this level, decoding it from disk if needed.
    pub fn pixels(&self) -> Result<&RgbImage> {
        if let Some(p) = self.pixels.get() {
            return Ok(p);
        }
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Integrity("level has neither pixels nor a backing file".into()))?;
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        if img.dimensions() != (self.width, self.height) {
            return Err(Error::Integrity(format!(
                "{} is {}x{}, metadata says {}x{}",
                path.display(),
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        // Another reader may have won the race; either copy is identical.
        let _ = self.pixels.set(img);
        Ok(self.pixels.get().expect("pixels just set"))
    }
}

/// Multi-resolution slide image. Level 0 is the base (x20) scan.
#[derive(Debug)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub base_magnification: Magnification,
    pub mpp: Option<f64>,
    levels: Vec<Level>,
}

/// Box (area) average by an integer factor. Output dimensions are
/// `ceil(w / factor)`; partial edge blocks average over the pixels they have.
pub fn box_downsample(src: &RgbImage, factor: u32) -> RgbImage {
    assert!(factor >= 1);
    if factor == 1 {
        return src.clone();
    }
    let (w, h) = src.dimensions();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = RgbImage::new(ow, oh);
    for oy in 0..oh {
        let y0 = oy * factor;
        let y1 = (y0 + factor).min(h);
        for ox in 0..ow {
            let x0 = ox * factor;
            let x1 = (x0 + factor).min(w);
            let mut sum = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = src.get_pixel(x, y).0;
                    for c in 0..3 {
                        sum[c] += p[c] as u64;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as u64;
            let px = [0, 1, 2].map(|c| ((sum[c] + n / 2) / n) as u8);
            out.put_pixel(ox, oy, image::Rgb(px));
        }
    }
    out
}

impl SlidePyramid {
    /// Assembles a pyramid, checking the level invariants: level 0 has
    /// downsample 1, downsamples strictly increase, and each level's size is
    /// `ceil(base / downsample)`.
    pub fn new(
        slide_id: impl Into<String>,
        base_magnification: Magnification,
        mpp: Option<f64>,
        levels: Vec<Level>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if base_magnification != Magnification::X20 {
            return Err(Error::Capability(format!(
                "base magnification {base_magnification} unsupported, slides must be scanned at x20"
            )));
        }
        let first = levels
            .first()
            .ok_or_else(|| Error::Integrity(format!("slide {slide_id} has no levels")))?;
        if first.downsample != 1 {
            return Err(Error::Integrity(format!(
                "slide {slide_id}: level 0 downsample is {}, expected 1",
                first.downsample
            )));
        }
        if first.width == 0 || first.height == 0 {
            return Err(Error::Integrity(format!("slide {slide_id}: empty base level")));
        }
        let (w0, h0) = (first.width, first.height);
        for (i, pair) in levels.windows(2).enumerate() {
            if pair[1].downsample <= pair[0].downsample {
                return Err(Error::Integrity(format!(
                    "slide {slide_id}: downsample of level {} ({}) does not exceed level {} ({})",
                    i + 1,
                    pair[1].downsample,
                    i,
                    pair[0].downsample
                )));
            }
        }
        for (i, level) in levels.iter().enumerate() {
            let expect = (w0.div_ceil(level.downsample), h0.div_ceil(level.downsample));
            if (level.width, level.height) != expect {
                return Err(Error::Integrity(format!(
                    "slide {slide_id}: level {i} is {}x{}, expected {}x{}",
                    level.width, level.height, expect.0, expect.1
                )));
            }
        }
        Ok(SlidePyramid {
            slide_id,
            base_magnification,
            mpp,
            levels,
        })
    }

    /// Builds an in-memory pyramid from a base image by box-averaging each
    /// requested downsample directly from level 0.
    pub fn from_base_image(
        slide_id: impl Into<String>,
        base: RgbImage,
        downsamples: &[u32],
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(downsamples.len());
        for &ds in downsamples {
            if ds == 0 {
                return Err(Error::Argument("downsample factor must be positive".into()));
            }
            let img = box_downsample(&base, ds);
            levels.push(Level::in_memory(img, ds));
        }
        SlidePyramid::new(slide_id, Magnification::X20, None, levels)
    }

    pub fn width(&self) -> u32 {
        self.levels[0].width
    }

    pub fn height(&self) -> u32 {
        self.levels[0].height
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn downsamples(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.downsample).collect()
    }

    pub fn level_for_downsample(&self, ds: u32) -> Option<&Level> {
        self.levels.iter().find(|l| l.downsample == ds)
    }

    /// Downsample of `mag` relative to this slide's base magnification.
    pub fn downsample_for(&self, mag: Magnification) -> Result<u32> {
        mag.downsample_from(self.base_magnification).ok_or_else(|| {
            Error::Capability(format!(
                "magnification {mag} is above the base magnification {}",
                self.base_magnification
            ))
        })
    }

    /// Extent in pixels at `mag` over which whole tiles can be placed:
    /// `floor(base / downsample)`, so every footprint stays inside level 0.
    pub fn working_extent(&self, mag: Magnification) -> Result<(u32, u32)> {
        let ds = self.downsample_for(mag)?;
        Ok((self.width() / ds, self.height() / ds))
    }

    /// Reads a `w x h` region at `mag` whose top-left corner is `origin` in
    /// level-0 pixels.
    ///
    /// Served from the level with the matching downsample when one exists and
    /// `origin` is aligned to it; otherwise area-averaged from the coarsest
    /// finer level that divides the requested downsample.
    pub fn read_region(
        &self,
        mag: Magnification,
        origin: (u32, u32),
        size: (u32, u32),
    ) -> Result<RgbImage> {
        let ds = self.downsample_for(mag)?;
        let (ox, oy) = origin;
        let (w, h) = size;
        if w == 0 || h == 0 {
            return Err(Error::Range(format!("empty region {w}x{h}")));
        }
        let end_x = ox as u64 + w as u64 * ds as u64;
        let end_y = oy as u64 + h as u64 * ds as u64;
        if end_x > self.width() as u64 || end_y > self.height() as u64 {
            return Err(Error::Range(format!(
                "region origin ({ox},{oy}) size {w}x{h} at {mag} exceeds slide {} ({}x{})",
                self.slide_id,
                self.width(),
                self.height()
            )));
        }
        let source = self
            .levels
            .iter()
            .rev()
            .find(|l| ds % l.downsample == 0 && ox % l.downsample == 0 && oy % l.downsample == 0)
            .expect("level 0 always qualifies");
        let pixels = source.pixels()?;
        let factor = ds / source.downsample;
        let (sx, sy) = (ox / source.downsample, oy / source.downsample);
        if factor == 1 {
            return Ok(image::imageops::crop_imm(pixels, sx, sy, w, h).to_image());
        }
        let n = (factor * factor) as u64;
        let mut out = RgbImage::new(w, h);
        for j in 0..h {
            for i in 0..w {
                let mut sum = [0u64; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = pixels.get_pixel(sx + i * factor + dx, sy + j * factor + dy).0;
                        for c in 0..3 {
                            sum[c] += p[c] as u64;
                        }
                    }
                }
                out.put_pixel(i, j, image::Rgb([0, 1, 2].map(|c| ((sum[c] + n / 2) / n) as u8)));
            }
        }
        Ok(out)
    }

    /// Whole-slide image at `mag`, `ceil(base / downsample)` pixels per side.
    pub fn thumbnail(&self, mag: Magnification) -> Result<RgbImage> {
        let ds = self.downsample_for(mag)?;
        if let Some(level) = self.level_for_downsample(ds) {
            return Ok(level.pixels()?.clone());
        }
        let source = self
            .levels
            .iter()
            .rev()
            .find(|l| ds % l.downsample == 0)
            .expect("level 0 always qualifies");
        Ok(box_downsample(source.pixels()?, ds / source.downsample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if (x + y) % 2 == 0 {
                image::Rgb([255, 255, 255])
            } else {
                image::Rgb([0, 0, 0])
            }
        })
    }

    #[test]
    fn white_slide_reads_white() {
        let img = RgbImage::from_pixel(64, 48, image::Rgb([255, 255, 255]));
        let slide = SlidePyramid::from_base_image("w", img, &[1, 2]).unwrap();
        for mag in [Magnification::X20, Magnification::X10, Magnification::X5] {
            let r = slide.read_region(mag, (8, 8), (4, 4)).unwrap();
            assert!(r.pixels().all(|p| p.0 == [255, 255, 255]));
        }
    }

    #[test]
    fn x10_read_of_checker_is_area_average() {
        // Direct averaging oracle: every 2x2 block of a checker holds two
        // white and two black pixels -> (2*255 + 2*0) / 4 = 127.5, rounded
        // half up to 128.
        let img = checker(8, 8);
        let oracle = |x: u32, y: u32| -> u8 {
            let mut s = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += img.get_pixel(2 * x + dx, 2 * y + dy).0[0] as u32;
                }
            }
            ((s + 2) / 4) as u8
        };
        // once with an explicit level 1, once area-averaged from level 0
        for downsamples in [&[1u32, 2][..], &[1u32][..]] {
            let slide = SlidePyramid::from_base_image("c", img.clone(), downsamples).unwrap();
            let r = slide.read_region(Magnification::X10, (0, 0), (4, 4)).unwrap();
            for (x, y, p) in r.enumerate_pixels() {
                assert_eq!(p.0, [oracle(x, y); 3]);
                assert_eq!(p.0[0], 128);
            }
        }
    }

    #[test]
    fn out_of_bounds_is_range_error() {
        let slide = SlidePyramid::from_base_image("r", checker(32, 32), &[1, 2]).unwrap();
        let err = slide
            .read_region(Magnification::X20, (40, 0), (4, 4))
            .unwrap_err();
        assert!(matches!(err, Error::Range(_)));
        // footprint of an x10 read is twice the size
        let err = slide
            .read_region(Magnification::X10, (0, 0), (17, 4))
            .unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn above_base_is_capability_error() {
        let slide = SlidePyramid::from_base_image("c", checker(8, 8), &[1]).unwrap();
        let err = slide
            .read_region(Magnification::X40, (0, 0), (2, 2))
            .unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn level_invariants_enforced() {
        let bad = vec![
            Level::in_memory(checker(8, 8), 1),
            Level::in_memory(checker(3, 4), 2),
        ];
        assert!(matches!(
            SlidePyramid::new("b", Magnification::X20, None, bad),
            Err(Error::Integrity(_))
        ));
        let unordered = vec![
            Level::in_memory(checker(8, 8), 1),
            Level::in_memory(checker(2, 2), 4),
            Level::in_memory(checker(4, 4), 2),
        ];
        assert!(matches!(
            SlidePyramid::new("b", Magnification::X20, None, unordered),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn odd_sizes_use_ceil_dimensions() {
        let slide = SlidePyramid::from_base_image("o", checker(9, 5), &[1, 2, 4]).unwrap();
        let dims: Vec<_> = slide.levels().iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(9, 5), (5, 3), (3, 2)]);
        assert_eq!(slide.working_extent(Magnification::X10).unwrap(), (4, 2));
    }
}
