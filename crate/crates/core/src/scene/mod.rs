//! Scenes: point clouds with annotated ground-truth objects, the procedural
//! generator that produces them, caption templates with their consistency
//! checker, JSON I/O and the caption vocabulary.
//!
//! Axis convention used by every spatial phrase: "left" is smaller `x`,
//! "front" is smaller `y`, `z` points up and the floor is `z = room_min_z`.

pub mod captions;
mod generate;
pub mod io;
pub mod vocab;

pub use captions::{check_caption, Relation};
pub use generate::{dataset_scene_seed, generate_dataset, generate_synthetic_scene};
pub use io::{load_scene, save_scene, scene_from_json, scene_to_json};
pub use vocab::{tokenize, Vocabulary, EOS, PAD, SOS, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box3D;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub category: String,
    pub bbox: Box3D,
    pub captions: Vec<String>,
}

/// One point: position in meters followed by RGB in `[0, 1]`.
pub type ScenePoint = [f64; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<ScenePoint>,
    pub gt_objects: Vec<GroundTruthObject>,
}

impl Scene {
    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = &self.points[i];
        [p[0], p[1], p[2]]
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.points.len()).map(|i| self.xyz(i)).collect()
    }

    /// Axis-aligned bounds of all points.
    pub fn bounds(&self) -> Option<Box3D> {
        let xyz = self.positions();
        Box3D::enclosing(&xyz)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Room extents are drawn per axis between these bounds (meters).
    pub room_size_min: [f64; 3],
    pub room_size_max: [f64; 3],
    /// The room's floor corner is shifted by up to this much in x and y.
    pub room_origin_jitter: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Total points per scene, objects and background together.
    pub num_points: usize,
    /// Share of `num_points` sampled on the floor and walls.
    pub background_fraction: f64,
    pub palette: Vec<PaletteEntry>,
    pub categories: Vec<CategorySpec>,
    pub size_jitter: f64,
    pub color_noise: f64,
    /// Minimal free space between object footprints and between objects and walls.
    pub min_gap: f64,
    pub max_retries: usize,
    pub captions_min: usize,
    pub captions_max: usize,
    pub relations: Vec<Relation>,
    /// Objects whose footprint is closer than this to a wall are "next to" it.
    pub wall_near: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let palette = [
            ("red", [0.85, 0.12, 0.12]),
            ("green", [0.15, 0.70, 0.20]),
            ("blue", [0.15, 0.25, 0.85]),
            ("yellow", [0.90, 0.85, 0.10]),
            ("black", [0.08, 0.08, 0.08]),
            ("orange", [0.95, 0.50, 0.10]),
            ("purple", [0.55, 0.20, 0.70]),
            ("pink", [0.95, 0.55, 0.70]),
        ];
        let categories = [
            ("chair", [0.5, 0.5, 0.9]),
            ("table", [1.2, 0.8, 0.75]),
            ("bed", [2.0, 1.6, 0.5]),
            ("cabinet", [0.6, 0.5, 1.2]),
            ("sofa", [1.8, 0.8, 0.8]),
            ("bookshelf", [0.9, 0.35, 1.8]),
            ("nightstand", [0.5, 0.4, 0.55]),
            ("lamp", [0.3, 0.3, 1.5]),
        ];
        Self {
            room_size_min: [8.0, 8.0, 3.0],
            room_size_max: [8.0, 8.0, 3.0],
            room_origin_jitter: 0.0,
            objects_min: 3,
            objects_max: 8,
            num_points: 2048,
            background_fraction: 0.4,
            palette: palette.iter().map(|(n, c)| PaletteEntry { name: n.to_string(), rgb: *c }).collect(),
            categories: categories.iter().map(|(n, s)| CategorySpec { name: n.to_string(), size: *s }).collect(),
            size_jitter: 0.1,
            color_noise: 0.02,
            min_gap: 0.3,
            max_retries: 500,
            captions_min: 1,
            captions_max: 3,
            relations: vec![Relation::Direction, Relation::Ordinal, Relation::Wall],
            wall_near: 0.5,
        }
    }
}

/// Color of floor points.
pub const FLOOR_RGB: [f64; 3] = [0.55, 0.45, 0.35];
/// Color of wall points.
pub const WALL_RGB: [f64; 3] = [0.80, 0.80, 0.75];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot place {requested} objects in a {room:?} room after {retries} attempts")]
    Unplaceable { requested: usize, room: [f64; 3], retries: usize },
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
