//! Procedural labelled LIDAR sequences: 2.5-D height-field scenes, a
//! ray-casting scanner model and writers for the dataset file formats.

mod lidar;
mod scene;
mod sequence;
mod spline;

pub use lidar::{simulate_scan, LidarModel};
pub use scene::{build_scene, ground_truth_map, Region, Scene, SceneParams, Shape};
pub use sequence::{generate_sequence, EgoPath, SequenceMeta, GT_DIR, META_FILE};
pub use spline::Spline2;

use thiserror::Error;

/// Semantic ids used by generated scenes (SemanticKITTI numbering).
pub mod semantic {
    pub const ROAD: u32 = 40;
    pub const PARKING: u32 = 44;
    pub const GRASS: u32 = 72;
    pub const BUSH: u32 = 70;
    pub const WALL: u32 = 50;
    pub const TRUNK: u32 = 71;
    pub const BOX: u32 = 99;
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene does not cover every cost class: missing {0:?}")]
    Coverage(Vec<&'static str>),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Map(#[from] crate::tmap::MapError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
