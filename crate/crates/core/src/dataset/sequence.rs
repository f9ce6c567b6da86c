use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, load_labels, load_poses, load_scan, map_semantics, DatasetError, Ontology};
use crate::cloud::{PointCloud, Pose};

pub const SCAN_DIR: &str = "velodyne";
pub const LABEL_DIR: &str = "labels";
pub const POSE_FILE: &str = "poses.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
    pub pose: Pose,
}

/// A scan sequence laid out as `velodyne/NNNNNN.bin`,
/// `labels/NNNNNN.label` and `poses.txt` (one pose per scan, sensor to
/// world).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceIndex {
    pub id: String,
    pub root: PathBuf,
    pub frames: Vec<FrameRecord>,
}

impl SequenceIndex {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let scan_dir = root.join(SCAN_DIR);
        let mut scans: Vec<(usize, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&scan_dir).map_err(io_err(&scan_dir))? {
            let path = entry.map_err(io_err(&scan_dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let index: usize = stem
                .parse()
                .map_err(|_| DatasetError::Sequence(format!("scan name {stem:?} is not a frame number")))?;
            scans.push((index, path));
        }
        scans.sort();
        if scans.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DatasetError::Sequence("duplicate frame numbers".into()));
        }
        let poses = load_poses(&root.join(POSE_FILE))?;
        if poses.len() != scans.len() {
            return Err(DatasetError::Sequence(format!(
                "{} scans but {} poses",
                scans.len(),
                poses.len()
            )));
        }
        let frames = scans
            .into_iter()
            .zip(poses)
            .map(|((index, scan), pose)| {
                let labels = root.join(LABEL_DIR).join(format!("{index:06}.label"));
                FrameRecord {
                    index,
                    scan,
                    labels: labels.exists().then_some(labels),
                    pose,
                }
            })
            .collect();
        let id = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            id,
            root: root.to_path_buf(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_scan(&self, t: usize) -> Result<PointCloud, DatasetError> {
        let frame = self.frame(t)?;
        load_scan(&frame.scan)
    }

    /// Scan `t` with per-point cost ids attached as labels.
    pub fn load_costed(&self, t: usize, ontology: &Ontology) -> Result<PointCloud, DatasetError> {
        let frame = self.frame(t)?;
        let mut cloud = load_scan(&frame.scan)?;
        let label_path = frame
            .labels
            .as_ref()
            .ok_or_else(|| DatasetError::Sequence(format!("frame {t} has no label file")))?;
        let labels = load_labels(label_path)?;
        if labels.len() != cloud.len() {
            return Err(DatasetError::Sequence(format!(
                "frame {t}: {} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        let costs = map_semantics(&labels, ontology)?;
        cloud.labels = Some(costs.into_iter().map(u32::from).collect());
        Ok(cloud)
    }

    pub fn frame(&self, t: usize) -> Result<&FrameRecord, DatasetError> {
        self.frames
            .get(t)
            .ok_or_else(|| DatasetError::Sequence(format!("frame {t} out of range (len {})", self.len())))
    }
}
