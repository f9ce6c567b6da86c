//! Ground-truth traversability dataset generation from labelled scan
//! sequences: semantic-to-cost mapping, multi-scan aggregation, ground
//! estimation and BEV projection.

mod aggregate;
mod generate;
mod ground;
mod io;
mod ontology;
mod project;
mod sequence;

pub use aggregate::{aggregate_loaded, aggregate_scans, select_frames, AggregationConfig, LabeledScan};
pub use generate::{generate_dataset, map_from_cloud, DatasetManifest, FrameEntry, MANIFEST_FILE};
pub use ground::{estimate_ground, GroundGrid};
pub use io::{load_labels, load_poses, load_scan, save_labels, save_poses, save_scan};
pub use ontology::{map_semantics, Ontology};
pub use project::project_traversability;
pub use sequence::{FrameRecord, SequenceIndex, LABEL_DIR, POSE_FILE, SCAN_DIR};

use thiserror::Error;

use crate::cloud::PoseError;
use crate::tmap::MapError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed length {len} at byte offset {offset} (record size {record})")]
    Format {
        path: String,
        len: usize,
        offset: usize,
        record: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: {source}")]
    Pose {
        path: String,
        line: usize,
        #[source]
        source: PoseError,
    },
    #[error("semantic ids missing from the ontology: {0:?}")]
    UnknownSemantic(Vec<u32>),
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}
