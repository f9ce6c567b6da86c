use std::path::Path;

use rayon::prelude::*;

use super::{Result, TrainError};
use crate::cloud::{PointCloud, Pose};
use crate::dataset::{load_scan, DatasetManifest, SequenceIndex};
use crate::model::{FrameInput, ModelConfig, Sample};
use crate::rng::derive_seed;
use crate::synth::GT_DIR;
use crate::tmap::TraversabilityMap;

/// A scan with its pose and ground-truth map.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub target: TraversabilityMap,
}

/// Frames grouped by sequence; windows never cross a sequence boundary.
#[derive(Debug, Clone, Default)]
pub struct FrameSet {
    pub sequences: Vec<Vec<LabeledFrame>>,
}

/// Position of one frame inside a [`FrameSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId {
    pub sequence: usize,
    pub frame: usize,
}

impl FrameSet {
    pub fn from_sequence(frames: Vec<LabeledFrame>) -> Self {
        Self {
            sequences: vec![frames],
        }
    }

    /// A synthetic sequence directory with analytic maps under `gt/`.
    pub fn load_synthetic(dir: &Path) -> Result<Self> {
        let seq = SequenceIndex::open(dir)?;
        let frames = seq
            .frames
            .par_iter()
            .map(|f| {
                let map_path = dir.join(GT_DIR).join(format!("{:06}.tmap", f.index));
                Ok(LabeledFrame {
                    cloud: strip_labels(load_scan(&f.scan)?),
                    pose: f.pose,
                    target: TraversabilityMap::load(&map_path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_sequence(frames))
    }

    /// A generated dataset directory (manifest plus maps).
    pub fn load_dataset(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let frames = manifest
            .frames
            .par_iter()
            .map(|f| {
                Ok(LabeledFrame {
                    cloud: strip_labels(load_scan(&manifest.scan_path(f))?),
                    pose: f.pose(),
                    target: TraversabilityMap::load(&dir.join(&f.map))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_sequence(frames))
    }

    /// Either layout, detected by the presence of a dataset manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(crate::dataset::MANIFEST_FILE).exists() {
            Self::load_dataset(dir)
        } else {
            Self::load_synthetic(dir)
        }
    }

    pub fn merge(mut self, other: FrameSet) -> Self {
        self.sequences.extend(other.sequences);
        self
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<FrameId> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, v)| (0..v.len()).map(move |f| FrameId { sequence: s, frame: f }))
            .collect()
    }

    pub fn frame(&self, id: FrameId) -> &LabeledFrame {
        &self.sequences[id.sequence][id.frame]
    }

    /// Frames at `offsets` relative to `id`, clamped to the sequence.
    pub fn window(&self, id: FrameId, offsets: &[i64]) -> Vec<FrameId> {
        let last = self.sequences[id.sequence].len() as i64 - 1;
        offsets
            .iter()
            .map(|&o| FrameId {
                sequence: id.sequence,
                frame: (id.frame as i64 + o).clamp(0, last) as usize,
            })
            .collect()
    }

    /// Pillarizes every frame once. Pillar sampling is seeded per frame so
    /// the result is independent of batch composition.
    pub fn prepare(&self, cfg: &ModelConfig, offsets: &[i64], seed: u64) -> Result<PreparedSet<'_>> {
        if offsets.len() < cfg.frames || offsets.first() != Some(&0) {
            return Err(TrainError::Config(format!(
                "{} frames need at least that many offsets starting at 0, got {offsets:?}",
                cfg.frames
            )));
        }
        let ids = self.ids();
        let inputs = ids
            .par_iter()
            .map(|&id| {
                let f = self.frame(id);
                let stream = ((id.sequence as u64) << 32) | id.frame as u64;
                FrameInput::from_cloud(&f.cloud, f.pose, cfg, derive_seed(seed, stream)).map_err(TrainError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut offsets_of_seq = Vec::new();
        let mut acc = 0;
        for s in &self.sequences {
            offsets_of_seq.push(acc);
            acc += s.len();
        }
        Ok(PreparedSet {
            set: self,
            ids,
            inputs,
            seq_start: offsets_of_seq,
            offsets: offsets[..cfg.frames].to_vec(),
        })
    }
}

fn strip_labels(mut cloud: PointCloud) -> PointCloud {
    cloud.labels = None;
    cloud
}

/// Pillarized frames ready to assemble into model samples.
#[derive(Debug)]
pub struct PreparedSet<'a> {
    pub set: &'a FrameSet,
    pub ids: Vec<FrameId>,
    inputs: Vec<FrameInput>,
    seq_start: Vec<usize>,
    offsets: Vec<i64>,
}

impl PreparedSet<'_> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn input(&self, id: FrameId) -> &FrameInput {
        &self.inputs[self.seq_start[id.sequence] + id.frame]
    }

    /// The sample centred on the `i`-th frame, current frame first.
    pub fn sample(&self, i: usize) -> Sample {
        self.set
            .window(self.ids[i], &self.offsets)
            .into_iter()
            .map(|id| self.input(id).clone())
            .collect()
    }

    pub fn target(&self, i: usize) -> &TraversabilityMap {
        &self.set.frame(self.ids[i]).target
    }
}
