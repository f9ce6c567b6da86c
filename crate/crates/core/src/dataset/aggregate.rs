use serde::{Deserialize, Serialize};

use super::{DatasetError, Ontology, SequenceIndex};
use crate::cloud::{PointCloud, Pose};

/// Multi-scan aggregation and projection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Number of scans merged per frame.
    pub scans: usize,
    /// Frame step between merged scans.
    pub stride: usize,
    /// Upper edge of the projection band above the estimated ground.
    pub vehicle_height: f64,
    /// Depth of the projection band below the estimated ground.
    pub band_below: f64,
    /// Quantile of neighbourhood z used as the ground elevation.
    pub ground_percentile: f64,
}

impl AggregationConfig {
    /// SemanticKITTI-style aggregation (71 scans, stride 2).
    pub fn on_road() -> Self {
        Self {
            scans: 71,
            stride: 2,
            ..Self::default()
        }
    }

    /// RELLIS-style aggregation (141 scans, stride 5).
    pub fn off_road() -> Self {
        Self {
            scans: 141,
            stride: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.scans < 1 || self.stride < 1 {
            return Err(DatasetError::Config("scans and stride must be >= 1".into()));
        }
        if !(self.ground_percentile > 0.0 && self.ground_percentile < 1.0) {
            return Err(DatasetError::Config(format!(
                "ground_percentile {} outside (0, 1)",
                self.ground_percentile
            )));
        }
        if !(self.vehicle_height > 0.0) || !(self.band_below >= 0.0) {
            return Err(DatasetError::Config("height band must be non-empty".into()));
        }
        Ok(())
    }
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            scans: 71,
            stride: 2,
            vehicle_height: 2.5,
            band_below: 0.3,
            ground_percentile: 0.05,
        }
    }
}

/// Frames merged for target `t`: `t, t-S, t+S, t-2S, t+2S, ...`, skipping
/// indices outside `0..len`, until `n` are collected or both ends run out.
pub fn select_frames(len: usize, t: usize, n: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n.min(len));
    if t >= len || n == 0 {
        return out;
    }
    out.push(t);
    let mut k = 1usize;
    while out.len() < n {
        let step = k * stride;
        let back = t.checked_sub(step);
        let fwd = (t + step < len).then_some(t + step);
        if back.is_none() && fwd.is_none() {
            break;
        }
        for idx in [back, fwd].into_iter().flatten() {
            if out.len() < n {
                out.push(idx);
            }
        }
        k += 1;
    }
    out
}

/// A scan already in memory with per-point cost ids.
#[derive(Debug, Clone)]
pub struct LabeledScan {
    pub cloud: PointCloud,
    pub pose: Pose,
}

/// Merges the selected scans into the frame of scan `t`. Each point moves
/// by `M_t⁻¹ · M_ti`.
pub fn aggregate_loaded(scans: &[LabeledScan], t: usize, cfg: &AggregationConfig) -> PointCloud {
    let to_target = scans[t].pose.inverse();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in select_frames(scans.len(), t, cfg.scans, cfg.stride) {
        let rel = to_target.compose(&scans[i].pose);
        let moved = scans[i].cloud.transformed(&rel);
        points.extend_from_slice(&moved.points);
        match &scans[i].cloud.labels {
            Some(l) => labels.extend_from_slice(l),
            None => labels.extend(std::iter::repeat_n(4, moved.points.len())),
        }
    }
    PointCloud::with_labels(points, labels)
}

/// Loads the scans around `t` from disk and merges them into frame `t`,
/// labelled with cost ids.
pub fn aggregate_scans(
    seq: &SequenceIndex,
    t: usize,
    cfg: &AggregationConfig,
    ontology: &Ontology,
) -> Result<PointCloud, DatasetError> {
    cfg.validate()?;
    seq.frame(t)?;
    let to_target = seq.frames[t].pose.inverse();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in select_frames(seq.len(), t, cfg.scans, cfg.stride) {
        let cloud = seq.load_costed(i, ontology)?;
        let rel = to_target.compose(&seq.frames[i].pose);
        let moved = cloud.transformed(&rel);
        points.extend(moved.points);
        labels.extend(moved.labels.unwrap_or_default());
    }
    Ok(PointCloud::with_labels(points, labels))
}
