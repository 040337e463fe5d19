//! Small SE(3) helpers shared by the head model, perception and control code.
//!
//! Lengths are millimetres throughout, angles radians.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Iso3 = Isometry3<f64>;

/// Rotation angle (radians) between two rotations.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.rotation_to(b).angle()
}

/// World-frame rotation vector taking `to` into `from`, i.e. log(from * to⁻¹).
pub fn rotation_error_vector(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>) -> Vector3<f64> {
    let rel = from * to.inverse();
    rel.scaled_axis()
}

/// Checks that a rotation matrix is orthonormal with determinant +1.
pub fn is_proper_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let orth = (m * m.transpose() - Matrix3::identity()).norm();
    orth <= tol * 10.0 && (m.determinant() - 1.0).abs() <= tol * 10.0
}

/// A serializable rigid transform (rotation row-major + translation).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn from_iso(iso: &Iso3) -> Self {
        let r = iso.rotation.to_rotation_matrix();
        let m = r.matrix();
        RigidTransform {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [iso.translation.x, iso.translation.y, iso.translation.z],
        }
    }

    pub fn to_iso(&self) -> Iso3 {
        let m = Matrix3::from_rows(&[
            self.rotation[0].into(),
            self.rotation[1].into(),
            self.rotation[2].into(),
        ]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Isometry3::from_parts(
            Translation3::new(self.translation[0], self.translation[1], self.translation[2]),
            rot,
        )
    }
}

/// Centroid of a point set. Panics on empty input.
pub fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let mut sum = Vector3::zeros();
    for p in points {
        sum += p.coords;
    }
    Point3::from(sum / points.len() as f64)
}
