//! Point clouds and sensor poses.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// One LIDAR return: x, y, z in metres plus reflectance.
pub type Point = [f32; 4];

/// A scan, optionally carrying one label per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, labels: None }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<u32>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        Self {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point, keeping reflectance and labels.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let m = pose.matrix();
        let points = self
            .points
            .iter()
            .map(|p| {
                let v = m * nalgebra::Vector4::new(p[0] as f64, p[1] as f64, p[2] as f64, 1.0);
                [v.x as f32, v.y as f32, v.z as f32, p[3]]
            })
            .collect();
        PointCloud {
            points,
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("rotation block is not orthonormal (deviation {0:.2e})")]
    NotRigid(f64),
    #[error("non-finite pose entry")]
    NonFinite,
}

/// Maximum deviation of `RᵀR` from identity accepted as a rigid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-3;

/// Sensor pose in the world frame as a 4x4 homogeneous transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Builds a pose from a 3x4 row-major matrix, checking that the rotation
    /// block is orthonormal with positive determinant.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self, PoseError> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let m = Matrix4::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], 0.0, 0.0, 0.0, 1.0,
        );
        let pose = Pose(m);
        let dev = pose.rigidity_error();
        if dev > ROTATION_TOLERANCE {
            return Err(PoseError::NotRigid(dev));
        }
        Ok(pose)
    }

    /// Planar pose: translation (x, y, z) and rotation `yaw` about z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose(Matrix4::new(
            c, -s, 0.0, x, s, c, 0.0, y, 0.0, 0.0, 1.0, z, 0.0, 0.0, 0.0, 1.0,
        ))
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, PoseError> {
        let mut v = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                v[r * 4 + c] = m[(r, c)];
            }
        }
        Self::from_row_major_3x4(&v)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Largest of `|RᵀR - I|` entries and `|det R - 1|`.
    pub fn rigidity_error(&self) -> f64 {
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        orth.max((r.determinant() - 1.0).abs())
    }

    /// Rigid inverse `[Rᵀ | -Rᵀt]`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    /// `self · other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    /// Heading angle of the x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                v[r * 4 + c] = self.0[(r, c)];
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let p = Pose::from_xyz_yaw(3.0, -2.0, 0.5, 0.7);
        let id = p.compose(&p.inverse());
        assert!((id.matrix() - Matrix4::identity()).abs().max() < 1e-12);
        assert!((p.yaw() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_scaled_rotation() {
        let v = [2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert!(matches!(Pose::from_row_major_3x4(&v), Err(PoseError::NotRigid(_))));
        let refl = [-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert!(Pose::from_row_major_3x4(&refl).is_err());
    }

    #[test]
    fn transform_moves_points() {
        let cloud = PointCloud::with_labels(vec![[1.0, 0.0, 0.0, 0.3]], vec![7]);
        let out = cloud.transformed(&Pose::from_xyz_yaw(1.0, 2.0, 3.0, std::f64::consts::FRAC_PI_2));
        let p = out.points[0];
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] - 3.0).abs() < 1e-6 && (p[2] - 3.0).abs() < 1e-6);
        assert_eq!(p[3], 0.3);
        assert_eq!(out.labels, Some(vec![7]));
    }
}
