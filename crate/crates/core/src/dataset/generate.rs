use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_loaded, estimate_ground, io_err, project_traversability, AggregationConfig, DatasetError,
    LabeledScan, Ontology, SequenceIndex,
};
use crate::cloud::Pose;
use crate::grid::GridSpec;
use crate::tmap::{write_atomic, TraversabilityMap};

pub const MANIFEST_FILE: &str = "manifest.json";
const MAP_DIR: &str = "maps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    /// Scan file, absolute or relative to the sequence root.
    pub scan: PathBuf,
    /// Sensor-to-world pose, 3x4 row-major.
    pub pose: [f64; 12],
    /// Map file relative to the dataset directory.
    pub map: PathBuf,
}

impl FrameEntry {
    pub fn pose(&self) -> Pose {
        Pose::from_row_major_3x4(&self.pose).expect("manifest poses were validated on write")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub sequence_id: String,
    pub sequence_root: PathBuf,
    pub grid: GridSpec,
    pub aggregation: AggregationConfig,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub const FORMAT: &'static str = "fastc-dataset/1";

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != Self::FORMAT {
            return Err(DatasetError::Sequence(format!("unsupported dataset format {:?}", m.format)));
        }
        Ok(m)
    }

    pub fn scan_path(&self, frame: &FrameEntry) -> PathBuf {
        self.sequence_root.join(&frame.scan)
    }
}

/// Builds one ground-truth map per frame of `seq` and writes
/// `maps/NNNNNN.tmap` plus `manifest.json` under `out_dir`. Frames are
/// processed in parallel; each map is written atomically. If any frame
/// fails, everything this call wrote is removed.
pub fn generate_dataset(
    seq: &SequenceIndex,
    ontology: &Ontology,
    cfg: &AggregationConfig,
    grid: &GridSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(DatasetError::Sequence("empty sequence".into()));
    }
    let scans = (0..seq.len())
        .into_par_iter()
        .map(|t| {
            Ok(LabeledScan {
                cloud: seq.load_costed(t, ontology)?,
                pose: seq.frames[t].pose,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    let map_dir = out_dir.join(MAP_DIR);
    let created_out = !out_dir.exists();
    fs::create_dir_all(&map_dir).map_err(io_err(&map_dir))?;

    let result = (0..seq.len())
        .into_par_iter()
        .map(|t| {
            let cloud = aggregate_loaded(&scans, t, cfg);
            let ground = estimate_ground(&cloud, grid, cfg);
            let map = project_traversability(&cloud, &ground, grid, cfg);
            let rel = PathBuf::from(MAP_DIR).join(format!("{:06}.tmap", seq.frames[t].index));
            map.save(&out_dir.join(&rel))?;
            let frame = &seq.frames[t];
            let scan = frame.scan.strip_prefix(&seq.root).unwrap_or(&frame.scan).to_path_buf();
            Ok(FrameEntry {
                index: frame.index,
                scan,
                pose: frame.pose.to_row_major_3x4(),
                map: rel,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()
        .and_then(|frames| {
            let manifest = DatasetManifest {
                format: DatasetManifest::FORMAT.into(),
                sequence_id: seq.id.clone(),
                sequence_root: seq.root.clone(),
                grid: *grid,
                aggregation: *cfg,
                frames,
            };
            let path = out_dir.join(MANIFEST_FILE);
            let text = serde_json::to_string_pretty(&manifest)?;
            write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
            Ok(manifest)
        });

    if result.is_err() {
        let _ = fs::remove_dir_all(&map_dir);
        let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
        if created_out {
            let _ = fs::remove_dir(out_dir);
        }
    }
    result
}

/// Single-frame map from an already-costed cloud (no aggregation).
pub fn map_from_cloud(
    cloud: &crate::cloud::PointCloud,
    grid: &GridSpec,
    cfg: &AggregationConfig,
) -> TraversabilityMap {
    let ground = estimate_ground(cloud, grid, cfg);
    project_traversability(cloud, &ground, grid, cfg)
}
