use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_scene, ground_truth_map, simulate_scan, LidarModel, Scene, SceneParams, SynthError};
use crate::cloud::Pose;
use crate::dataset::{save_labels, save_poses, save_scan};
use crate::grid::GridSpec;
use crate::rng;

/// Analytic ground-truth maps, `gt/NNNNNN.tmap`.
pub const GT_DIR: &str = "gt";
pub const META_FILE: &str = "sequence.json";

/// Drive along the scene's road centreline with yaw on the tangent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoPath {
    /// Arc length of frame 0 measured from the road start.
    pub start: f64,
    /// Arc length travelled between frames.
    pub step: f64,
    /// Sensor height above the terrain.
    pub mount_height: f64,
}

impl Default for EgoPath {
    fn default() -> Self {
        Self {
            start: 20.0,
            step: 1.0,
            mount_height: 1.8,
        }
    }
}

impl EgoPath {
    pub fn pose(&self, scene: &Scene, k: usize) -> Pose {
        let s = self.start + self.step * k as f64;
        let [x, y] = scene.road.point_at(s);
        let yaw = scene.road.heading_at(s);
        Pose::from_xyz_yaw(x, y, scene.terrain(x, y) + self.mount_height, yaw)
    }
}

/// Everything needed to regenerate a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub frames: usize,
    pub scene: SceneParams,
    pub ego: EgoPath,
    pub lidar: LidarModel,
    pub grid: GridSpec,
}

/// Writes `frames` scans, labels, poses and ground-truth maps under
/// `out_dir` in the dataset file formats.
pub fn generate_sequence(
    seed: u64,
    frames: usize,
    scene_params: &SceneParams,
    ego: &EgoPath,
    lidar: &LidarModel,
    grid: &GridSpec,
    out_dir: &Path,
) -> Result<SequenceMeta, SynthError> {
    if frames == 0 {
        return Err(SynthError::Params("need at least one frame".into()));
    }
    lidar.validate()?;
    let end = ego.start + ego.step * (frames - 1) as f64;
    if !(ego.step >= 0.0) || ego.start < 0.0 {
        return Err(SynthError::Params("ego path must move forward from a non-negative start".into()));
    }
    let scene = build_scene(rng::derive_seed(seed, 1), scene_params)?;
    if end > scene.road.length() {
        return Err(SynthError::Params(format!(
            "path ends at {end:.1} m but the road is {:.1} m long",
            scene.road.length()
        )));
    }
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let scan_dir = out_dir.join(crate::dataset::SCAN_DIR);
    let label_dir = out_dir.join(crate::dataset::LABEL_DIR);
    let gt_dir = out_dir.join(GT_DIR);
    for d in [&scan_dir, &label_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(io(d))?;
    }

    let poses: Vec<Pose> = (0..frames).map(|k| ego.pose(&scene, k)).collect();
    poses.par_iter().enumerate().try_for_each(|(k, pose)| -> Result<(), SynthError> {
        let cloud = simulate_scan(&scene, pose, lidar, rng::derive_seed(seed, 1000 + k as u64));
        save_scan(&scan_dir.join(format!("{k:06}.bin")), &cloud.points)?;
        save_labels(
            &label_dir.join(format!("{k:06}.label")),
            cloud.labels.as_deref().unwrap_or(&[]),
        )?;
        ground_truth_map(&scene, pose, grid).save(&gt_dir.join(format!("{k:06}.tmap")))?;
        Ok(())
    })?;
    save_poses(&out_dir.join(crate::dataset::POSE_FILE), &poses)?;

    let meta = SequenceMeta {
        seed,
        frames,
        scene: scene_params.clone(),
        ego: ego.clone(),
        lidar: lidar.clone(),
        grid: *grid,
    };
    let meta_path = out_dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    crate::tmap::write_atomic(&meta_path, text.as_bytes()).map_err(io(&meta_path))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SequenceIndex;
    use crate::tmap::TraversabilityMap;

    fn small() -> SceneParams {
        SceneParams {
            half_extent: 30.0,
            bushes: 12,
            boxes: 10,
            walls: 3,
            trunks: 6,
            ..Default::default()
        }
    }

    fn lidar() -> LidarModel {
        LidarModel {
            ring_elevations_deg: LidarModel::uniform_rings(8, -20.0, -2.0),
            azimuth_step_deg: 2.0,
            max_range: 15.0,
            ..Default::default()
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn three_frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::centered(6.4, (-3.0, 3.0), 0.2).unwrap();
        let ego = EgoPath::default();
        generate_sequence(4, 3, &small(), &ego, &lidar(), &g, dir.path()).unwrap();
        let seq = SequenceIndex::open(dir.path()).unwrap();
        assert_eq!(seq.len(), 3);
        let scene = build_scene(rng::derive_seed(4, 1), &small()).unwrap();
        for k in 0..3 {
            let f = seq.frame(k).unwrap();
            let expect = ego.pose(&scene, k);
            assert!((f.pose.matrix() - expect.matrix()).abs().max() < 1e-9);
            assert!(f.labels.is_some());
            let m = TraversabilityMap::load(&dir.path().join(GT_DIR).join(format!("{k:06}.tmap"))).unwrap();
            assert_eq!(m.shape(), (64, 64));
            assert_eq!(m.histogram()[4], 0);
        }
    }

    #[test]
    fn regenerate_is_bit_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let g = GridSpec::centered(3.2, (-3.0, 3.0), 0.2).unwrap();
        for d in [&a, &b] {
            generate_sequence(9, 2, &small(), &EgoPath::default(), &lidar(), &g, d.path()).unwrap();
        }
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn zero_frames_rejected() {
        let d = tempfile::tempdir().unwrap();
        let g = GridSpec::desk_scale();
        assert!(generate_sequence(1, 0, &small(), &EgoPath::default(), &lidar(), &g, d.path()).is_err());
    }
}
