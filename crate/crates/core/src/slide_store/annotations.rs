use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ClassLabel;
use crate::error::{read_json, write_json, Error, Result};
use crate::geometry;

/// Free-hand annotation outline in level-0 integer pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polygon {
    pub label: ClassLabel,
    pub vertices: Vec<[i64; 2]>,
}

impl Polygon {
    pub fn new(label: ClassLabel, vertices: Vec<[i64; 2]>) -> Self {
        Polygon { label, vertices }
    }

    pub fn bounding_box(&self) -> (i64, i64, i64, i64) {
        geometry::bounding_box(&self.vertices)
    }

    /// Vertex centroid; the "centre of the annotation" used for tiling is
    /// the bounding-box centre, not this.
    pub fn vertex_centroid(&self) -> (f64, f64) {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |acc, v| (acc.0 + v[0] as f64, acc.1 + v[1] as f64));
        (sx / n, sy / n)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        geometry::point_in_polygon(&self.vertices, x, y)
    }
}

/// Contents of `annotations.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub polygons: Vec<Polygon>,
}

impl AnnotationSet {
    pub fn empty(slide_id: impl Into<String>) -> Self {
        AnnotationSet {
            slide_id: slide_id.into(),
            polygons: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    /// Checks every polygon has at least three vertices, carries the
    /// diffuse-type label and lies inside a `width x height` base level.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (i, poly) in self.polygons.iter().enumerate() {
            if poly.vertices.len() < 3 {
                return Err(Error::Argument(format!(
                    "slide {}: polygon {i} has {} vertices, need at least 3",
                    self.slide_id,
                    poly.vertices.len()
                )));
            }
            if poly.label != ClassLabel::DiffuseAdc {
                return Err(Error::Argument(format!(
                    "slide {}: polygon {i} labelled {}, only diffuse_adc outlines are supported",
                    self.slide_id, poly.label
                )));
            }
            for v in &poly.vertices {
                if v[0] < 0 || v[1] < 0 || v[0] > width as i64 || v[1] > height as i64 {
                    return Err(Error::Range(format!(
                        "slide {}: polygon {i} vertex ({}, {}) outside {width}x{height}",
                        self.slide_id, v[0], v[1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
