use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Level, Magnification, SlidePyramid};
use crate::error::{read_json, write_json, Error, Result};

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelMeta {
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub downsample: u32,
    pub file: String,
}

/// Contents of `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMetadata {
    pub slide_id: String,
    pub base_magnification: Magnification,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpp: Option<f64>,
    pub levels: Vec<LevelMeta>,
}

/// Opens a slide directory. Only the metadata and PNG headers are read
/// here; pixel data is decoded on first access to each level.
pub fn open_slide(dir: &Path) -> Result<SlidePyramid> {
    let meta_path = dir.join(METADATA_FILE);
    if !meta_path.is_file() {
        return Err(Error::Format {
            path: meta_path,
            msg: "missing slide metadata".into(),
        });
    }
    let meta: SlideMetadata = read_json(&meta_path).map_err(|e| match e {
        Error::Json { path, source } => Error::Format {
            path,
            msg: source.to_string(),
        },
        other => other,
    })?;
    let mut levels = Vec::with_capacity(meta.levels.len());
    for (i, lm) in meta.levels.iter().enumerate() {
        if lm.index != i {
            return Err(Error::Integrity(format!(
                "slide {}: level entry {} has index {}",
                meta.slide_id, i, lm.index
            )));
        }
        let path: PathBuf = dir.join(&lm.file);
        if !path.is_file() {
            return Err(Error::Integrity(format!(
                "slide {}: level {} file {} is missing",
                meta.slide_id,
                i,
                path.display()
            )));
        }
        let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        if (w, h) != (lm.width, lm.height) {
            return Err(Error::Integrity(format!(
                "slide {}: level {} raster is {w}x{h}, metadata says {}x{}",
                meta.slide_id, i, lm.width, lm.height
            )));
        }
        levels.push(Level::on_disk(path, lm.width, lm.height, lm.downsample));
    }
    SlidePyramid::new(meta.slide_id, meta.base_magnification, meta.mpp, levels)
}

/// Writes every level as `level_<i>.png` plus `metadata.json` into `dir`.
pub fn write_slide(slide: &SlidePyramid, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metas = Vec::new();
    for (i, level) in slide.levels().iter().enumerate() {
        let file = format!("level_{i}.png");
        let path = dir.join(&file);
        level.pixels()?.save_with_format(&path, image::ImageFormat::Png).map_err(|source| {
            Error::Image {
                path: path.clone(),
                source,
            }
        })?;
        metas.push(LevelMeta {
            index: i,
            width: level.width,
            height: level.height,
            downsample: level.downsample,
            file,
        });
    }
    let meta = SlideMetadata {
        slide_id: slide.slide_id.clone(),
        base_magnification: slide.base_magnification,
        mpp: slide.mpp,
        levels: metas,
    };
    write_json(&dir.join(METADATA_FILE), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn sample_slide() -> SlidePyramid {
        let img = RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8 * 6, y as u8 * 8, 100]));
        SlidePyramid::from_base_image("s1", img, &[1, 2]).unwrap()
    }

    #[test]
    fn two_level_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let slide = sample_slide();
        write_slide(&slide, dir.path()).unwrap();
        let back = open_slide(dir.path()).unwrap();
        assert_eq!(back.downsamples(), vec![1, 2]);
        assert!(!back.levels()[0].is_loaded());
        let a = slide.read_region(Magnification::X20, (0, 0), (40, 30)).unwrap();
        let b = back.read_region(Magnification::X20, (0, 0), (40, 30)).unwrap();
        assert_eq!(a, b);
        assert!(!back.levels()[1].is_loaded(), "x20 read must not decode level 1");
    }

    #[test]
    fn missing_level_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_slide(&sample_slide(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("level_1.png")).unwrap();
        assert!(matches!(open_slide(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_metadata_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(open_slide(dir.path()), Err(Error::Format { .. })));
        std::fs::write(dir.path().join(METADATA_FILE), "{not json").unwrap();
        assert!(matches!(open_slide(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn dimension_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_slide(&sample_slide(), dir.path()).unwrap();
        RgbImage::new(7, 7).save(dir.path().join("level_1.png")).unwrap();
        assert!(matches!(open_slide(dir.path()), Err(Error::Integrity(_))));
    }
}
