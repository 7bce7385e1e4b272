//! On-disk slide pyramids, annotations, dataset manifests and the synthetic
//! slide generator.
//!
//! A slide is a directory holding `metadata.json` plus one PNG per pyramid
//! level. Pixels are decoded lazily, one level at a time, on first access;
//! after opening, a [`SlidePyramid`] is immutable and can be shared across
//! threads.

mod annotations;
mod format;
mod manifest;
mod pyramid;
pub mod synthetic;

pub use annotations::{AnnotationSet, Polygon};
pub use format::{open_slide, write_slide, LevelMeta, SlideMetadata, METADATA_FILE};
pub use manifest::{DatasetManifest, ManifestEntry, Split, ANNOTATIONS_FILE, MANIFEST_FILE};
pub use pyramid::{box_downsample, Level, SlidePyramid};
pub use synthetic::{generate_synthetic_slide, Ellipse, SyntheticSlideSpec, TextureStyle, TissueShape};

use serde::{Deserialize, Serialize};

/// Diagnostic category of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    DiffuseAdc,
    OtherAdc,
    NonNeoplastic,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::DiffuseAdc,
        ClassLabel::OtherAdc,
        ClassLabel::NonNeoplastic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::DiffuseAdc => "diffuse_adc",
            ClassLabel::OtherAdc => "other_adc",
            ClassLabel::NonNeoplastic => "non_neoplastic",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Objective-equivalent magnification. Slides are scanned at x20; coarser
/// magnifications are power-of-two downsamples of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "x40")]
    X40,
    #[serde(rename = "x20")]
    X20,
    #[serde(rename = "x10")]
    X10,
    #[serde(rename = "x5")]
    X5,
    #[serde(rename = "x2.5")]
    X2_5,
    #[serde(rename = "x1.25")]
    X1_25,
}

impl Magnification {
    /// Objective power as a number (x20 -> 20.0).
    pub fn power(&self) -> f64 {
        match self {
            Magnification::X40 => 40.0,
            Magnification::X20 => 20.0,
            Magnification::X10 => 10.0,
            Magnification::X5 => 5.0,
            Magnification::X2_5 => 2.5,
            Magnification::X1_25 => 1.25,
        }
    }

    /// Integer downsample of `self` relative to `base`, or `None` when `self`
    /// is finer than `base` or not an integer multiple of it.
    pub fn downsample_from(&self, base: Magnification) -> Option<u32> {
        let ratio = base.power() / self.power();
        if ratio < 1.0 || ratio.fract() != 0.0 {
            return None;
        }
        Some(ratio as u32)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Magnification::X40 => "x40",
            Magnification::X20 => "x20",
            Magnification::X10 => "x10",
            Magnification::X5 => "x5",
            Magnification::X2_5 => "x2.5",
            Magnification::X1_25 => "x1.25",
        }
    }
}

impl std::str::FromStr for Magnification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x40" => Ok(Magnification::X40),
            "x20" => Ok(Magnification::X20),
            "x10" => Ok(Magnification::X10),
            "x5" => Ok(Magnification::X5),
            "x2.5" => Ok(Magnification::X2_5),
            "x1.25" => Ok(Magnification::X1_25),
            other => Err(format!("unknown magnification '{other}'")),
        }
    }
}

impl std::fmt::Display for Magnification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
