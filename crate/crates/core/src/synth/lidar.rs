use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{semantic, Scene};
use crate::cloud::{PointCloud, Pose};
use crate::rng;

/// Spinning multi-beam scanner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    /// Beam elevations in degrees (negative looks down).
    pub ring_elevations_deg: Vec<f64>,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    pub min_range: f64,
    /// Standard deviation of additive range noise in metres.
    pub range_noise: f64,
    /// Probability that a return is lost.
    pub dropout: f64,
}

impl LidarModel {
    /// Evenly spaced rings between two elevations (inclusive).
    pub fn uniform_rings(rings: usize, lowest_deg: f64, highest_deg: f64) -> Vec<f64> {
        if rings == 1 {
            return vec![lowest_deg];
        }
        (0..rings)
            .map(|i| lowest_deg + (highest_deg - lowest_deg) * i as f64 / (rings - 1) as f64)
            .collect()
    }

    /// 16 downward beams; far ground is covered by only a few rings.
    pub fn sparse16() -> Self {
        Self {
            ring_elevations_deg: Self::uniform_rings(16, -25.0, -3.0),
            azimuth_step_deg: 0.4,
            max_range: 20.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), super::SynthError> {
        let bad = |m: &str| Err(super::SynthError::Params(m.to_string()));
        if self.ring_elevations_deg.is_empty() {
            return bad("at least one ring");
        }
        if !(self.max_range > 0.0) || !(self.min_range >= 0.0) || self.min_range >= self.max_range {
            return bad("need 0 <= min_range < max_range");
        }
        if !(self.azimuth_step_deg > 0.0) {
            return bad("azimuth step must be positive");
        }
        if !(self.range_noise >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("noise must be >= 0 and dropout in [0, 1)");
        }
        Ok(())
    }
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            ring_elevations_deg: Self::uniform_rings(32, -24.0, 2.0),
            azimuth_step_deg: 0.4,
            max_range: 30.0,
            min_range: 0.5,
            range_noise: 0.01,
            dropout: 0.02,
        }
    }
}

/// Constant reflectance per material.
pub(crate) fn reflectance(sem: u32) -> f32 {
    match sem {
        semantic::ROAD => 0.12,
        semantic::PARKING => 0.22,
        semantic::GRASS => 0.45,
        semantic::BUSH => 0.6,
        semantic::TRUNK => 0.3,
        semantic::WALL => 0.85,
        semantic::BOX => 0.7,
        _ => 0.5,
    }
}

const MARCH_STEP: f64 = 0.05;
const REFINE_ITERS: usize = 12;

/// Casts every (ring, azimuth) ray from the sensor against the scene's
/// height field. Returns points in the sensor frame labelled with semantic
/// ids.
pub fn simulate_scan(scene: &Scene, pose: &Pose, lidar: &LidarModel, seed: u64) -> PointCloud {
    let mut rng = rng::rng(seed, 0x11DA2);
    let noise = Normal::new(0.0, lidar.range_noise.max(0.0)).expect("finite sigma");
    let rot = pose.rotation();
    let origin = pose.translation();
    let to_sensor = pose.inverse();
    let n_az = (360.0 / lidar.azimuth_step_deg).round() as usize;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for &elev_deg in &lidar.ring_elevations_deg {
        let elev = elev_deg.to_radians();
        for a in 0..n_az {
            let az = (a as f64 * lidar.azimuth_step_deg).to_radians();
            let local = nalgebra::Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let dir = rot * local;
            let Some((t_hit, sem)) = cast(scene, &origin, &dir, lidar) else {
                continue;
            };
            // Draw both random numbers for every hit so streams stay aligned.
            let drop = rng.gen::<f64>() < lidar.dropout;
            let t = t_hit + noise.sample(&mut rng);
            if drop || t > lidar.max_range || t < lidar.min_range {
                continue;
            }
            let w = origin + dir * t;
            let s = to_sensor.matrix() * nalgebra::Vector4::new(w.x, w.y, w.z, 1.0);
            points.push([s.x as f32, s.y as f32, s.z as f32, reflectance(sem)]);
            labels.push(sem);
        }
    }
    PointCloud::with_labels(points, labels)
}

fn cast(
    scene: &Scene,
    origin: &nalgebra::Vector3<f64>,
    dir: &nalgebra::Vector3<f64>,
    lidar: &LidarModel,
) -> Option<(f64, u32)> {
    let above = |t: f64| -> Option<bool> {
        let p = origin + dir * t;
        scene.surface_at(p.x, p.y).map(|s| p.z > s)
    };
    let mut prev = lidar.min_range;
    if !above(prev)? {
        return None;
    }
    let mut t = prev;
    while t < lidar.max_range + 3.0 * lidar.range_noise {
        t += MARCH_STEP;
        if !above(t)? {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..REFINE_ITERS {
                let mid = 0.5 * (lo + hi);
                match above(mid) {
                    Some(true) => lo = mid,
                    _ => hi = mid,
                }
            }
            let p = origin + dir * hi;
            let sem = scene.raster_semantic_at(p.x, p.y)?;
            return Some((hi, sem));
        }
        prev = t;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Region, SceneParams, Shape, Spline2};

    fn flat_scene(regions: Vec<Region>) -> Scene {
        let params = SceneParams {
            half_extent: 40.0,
            terrain_amplitude: 0.0,
            ..Default::default()
        };
        let road = Spline2::new(vec![[-40.0, 0.0], [40.0, 0.0]]);
        Scene::from_layout(0, params, road, regions, [0.0, 0.0])
    }

    fn quiet() -> LidarModel {
        LidarModel {
            range_noise: 0.0,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn flat_scene_hits_ground_only() {
        let scene = flat_scene(Vec::new());
        let pose = Pose::from_xyz_yaw(0.0, 0.0, 1.8, 0.3);
        let cloud = simulate_scan(&scene, &pose, &quiet(), 1);
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            assert!((p[2] + 1.8).abs() < 1e-3, "z = {}", p[2]);
            let r = ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) as f64).sqrt();
            assert!(r <= 30.0 + 1e-6);
        }
    }

    #[test]
    fn wall_ahead() {
        // Wall face at x = 10 m in front of the sensor.
        let wall = Region {
            semantic: semantic::WALL,
            shape: Shape::Rect {
                center: [10.5, 0.0],
                half: [0.5, 4.0],
                yaw: 0.0,
            },
            height: 3.0,
        };
        let scene = flat_scene(vec![wall]);
        let cloud = simulate_scan(&scene, &Pose::from_xyz_yaw(0.0, 0.0, 1.8, 0.0), &quiet(), 1);
        let labels = cloud.labels.as_ref().unwrap();
        let wall_pts: Vec<_> = cloud
            .points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == semantic::WALL)
            .map(|(p, _)| *p)
            .collect();
        assert!(wall_pts.len() > 20);
        // Rays with |azimuth| small and elevation such that z stays above 0
        // at x=10 hit the vertical face: x ≈ 10 (within the raster cell).
        let face: Vec<_> = wall_pts.iter().filter(|p| p[1].abs() < 1.0 && p[2] > -1.7).collect();
        assert!(!face.is_empty());
        for p in face {
            assert!((p[0] - 10.0).abs() < 0.11, "x = {}", p[0]);
        }
    }

    #[test]
    fn density_falls_with_range() {
        let scene = flat_scene(Vec::new());
        let cloud = simulate_scan(&scene, &Pose::from_xyz_yaw(0.0, 0.0, 1.8, 0.0), &LidarModel::default(), 3);
        let per_area = |r0: f64, r1: f64| {
            let n = cloud
                .points
                .iter()
                .filter(|p| {
                    let r = (p[0] as f64).hypot(p[1] as f64);
                    r >= r0 && r < r1
                })
                .count();
            n as f64 / (std::f64::consts::PI * (r1 * r1 - r0 * r0))
        };
        let near = per_area(4.0, 6.0);
        let far = per_area(24.0, 26.0);
        assert!(near > 3.0 * far, "near {near} far {far}");
    }

    #[test]
    fn deterministic_per_seed() {
        let scene = flat_scene(Vec::new());
        let pose = Pose::from_xyz_yaw(1.0, 2.0, 1.8, 0.1);
        let a = simulate_scan(&scene, &pose, &LidarModel::default(), 5);
        let b = simulate_scan(&scene, &pose, &LidarModel::default(), 5);
        assert_eq!(a, b);
        assert_ne!(a, simulate_scan(&scene, &pose, &LidarModel::default(), 6));
    }
}
