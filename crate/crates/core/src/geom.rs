//! Rotations, poses, error-state composition, and the camera model.
//!
//! Conventions used throughout the crate:
//! - Quaternions are Hamilton, scalar-first. `^W_I q` maps body-frame
//!   vectors into the world frame (passive body-to-world).
//! - Error-state rotation perturbations are applied on the left in the
//!   parent frame: `boxplus(r, d) = exp(d) * r`.
//! - The camera distortion is the single-parameter FOV model acting on
//!   normalized image coordinates.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
}

/// Unit-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds from scalar-first components, normalizing the input.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(q)
    }

    /// Builds from a rotation matrix assumed orthonormal.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Rotation(UnitQuaternion::from_matrix(m))
    }

    /// Exponential map: axis-angle vector to rotation.
    pub fn exp(v: Vector3<f64>) -> Self {
        Rotation(UnitQuaternion::from_scaled_axis(v))
    }

    /// Logarithm map: rotation to axis-angle vector (angle in (-pi, pi]).
    pub fn log(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    /// Scalar-first components (w, x, y, z).
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    /// Left (parent-frame) perturbation: `exp(delta) * self`.
    pub fn boxplus(&self, delta: Vector3<f64>) -> Self {
        (Rotation::exp(delta) * *self).renormalized()
    }

    /// Inverse of [`Rotation::boxplus`]: `log(self * other^-1)`.
    pub fn boxminus(&self, other: &Rotation) -> Vector3<f64> {
        (*self * other.inverse()).log()
    }

    /// Angle of the relative rotation to `other`, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    fn renormalized(self) -> Self {
        Rotation(UnitQuaternion::new_normalize(self.0.into_inner()))
    }
}

impl std::ops::Mul<Rotation> for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0).renormalized()
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rigid transform: rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    pub fn matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul<Pose> for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Pinhole intrinsics with the single-parameter FOV distortion model.
///
/// `omega` is the field-of-view parameter in radians; `omega = 0` degrades
/// to a plain pinhole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub omega: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn k_inv_t(&self) -> Matrix3<f64> {
        self.k_inv().transpose()
    }

    /// FOV distortion of normalized image coordinates.
    ///
    /// The radius mapping is `r_d = atan(2 r_u tan(omega/2)) / omega`; the
    /// direction is preserved.
    pub fn distort_normalized(&self, p: Vector2<f64>) -> Vector2<f64> {
        if self.omega.abs() < 1e-12 {
            return p;
        }
        let ru = p.norm();
        if ru < 1e-12 {
            return p;
        }
        let rd = (2.0 * ru * (self.omega / 2.0).tan()).atan() / self.omega;
        p * (rd / ru)
    }

    /// Exact inverse of [`CameraModel::distort_normalized`].
    pub fn undistort_normalized(&self, p: Vector2<f64>) -> Vector2<f64> {
        if self.omega.abs() < 1e-12 {
            return p;
        }
        let rd = p.norm();
        if rd < 1e-12 {
            return p;
        }
        let ru = (rd * self.omega).tan() / (2.0 * (self.omega / 2.0).tan());
        p * (ru / rd)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(
        &self,
        p_cam: &Vector3<f64>,
        apply_distortion: bool,
    ) -> Result<Vector2<f64>, GeomError> {
        if p_cam.z <= 1e-6 {
            return Err(GeomError::BehindCamera(p_cam.z));
        }
        let mut n = Vector2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        if apply_distortion {
            n = self.distort_normalized(n);
        }
        Ok(Vector2::new(
            self.fx * n.x + self.cx,
            self.fy * n.y + self.cy,
        ))
    }

    /// Back-projects a pixel to a normalized ray `(x, y, 1)`.
    pub fn unproject(&self, px: Vector2<f64>, undistort: bool) -> Vector3<f64> {
        let mut n = Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy);
        if undistort {
            n = self.undistort_normalized(n);
        }
        Vector3::new(n.x, n.y, 1.0)
    }

    pub fn contains(&self, px: Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// One IMU reading. Timestamps are seconds and must be strictly increasing
/// within a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut StdRng) -> Rotation {
        Rotation::exp(Vector3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ))
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let r = Rotation::identity().boxplus(Vector3::zeros());
        assert_relative_eq!(r.angle_to(&Rotation::identity()), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn boxplus_quarter_turn_maps_x_to_y() {
        let r = Rotation::identity().boxplus(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let v = r * Vector3::x();
        assert_relative_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn boxplus_boxminus_roundtrip() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let d = Vector3::new(
                rng.gen_range(-0.57..0.57),
                rng.gen_range(-0.57..0.57),
                rng.gen_range(-0.57..0.57),
            );
            let back = r.boxplus(d).boxminus(&r);
            max_err = max_err.max((back - d).norm());
        }
        assert!(max_err < 1e-9, "max round-trip error {max_err}");
    }

    #[test]
    fn quaternion_norm_stays_unit_under_composition() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut r = Rotation::identity();
        for _ in 0..10_000 {
            r = r * random_rotation(&mut rng);
        }
        let [w, x, y, z] = r.wxyz();
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let m = r.matrix();
        assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-9);
    }

    #[test]
    fn pose_composition_matches_homogeneous_matrices() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let b = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let c = a * b;
            let m = a.matrix4() * b.matrix4();
            assert_relative_eq!(c.matrix4(), m, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let p = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let i = p.inverse() * p;
            assert!(i.translation.norm() < 1e-9);
            assert!(i.rotation.angle_to(&Rotation::identity()) < 1e-9);
        }
    }

    fn test_camera(omega: f64) -> CameraModel {
        CameraModel {
            fx: 458.0,
            fy: 457.0,
            cx: 367.0,
            cy: 248.0,
            omega,
            width: 752,
            height: 480,
        }
    }

    #[test]
    fn fov_zero_omega_is_identity() {
        let cam = test_camera(0.0);
        let p = Vector2::new(0.3, 0.4);
        assert_relative_eq!(cam.distort_normalized(p), p, epsilon = 1e-15);
        assert_relative_eq!(cam.undistort_normalized(p), p, epsilon = 1e-15);
    }

    #[test]
    fn fov_center_is_fixed_point() {
        for omega in [0.0, 0.3, 0.9, 1.5] {
            let cam = test_camera(omega);
            let p = Vector2::zeros();
            assert_eq!(cam.distort_normalized(p), p);
        }
    }

    #[test]
    fn fov_closed_form_and_roundtrip() {
        let cam = test_camera(0.9);
        let ru = 0.5;
        let p = Vector2::new(ru, 0.0);
        let d = cam.distort_normalized(p);
        let expected = (2.0 * ru * (0.45f64).tan()).atan() / 0.9;
        assert_relative_eq!(d.x, expected, epsilon = 1e-12);
        let back = cam.undistort_normalized(d);
        assert_relative_eq!(back.x, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn fov_roundtrip_over_image_grid() {
        let cam = test_camera(0.85);
        let mut worst = 0.0f64;
        for iy in 0..=12 {
            for ix in 0..=12 {
                let px = Vector2::new(
                    ix as f64 / 12.0 * (cam.width as f64 - 1.0),
                    iy as f64 / 12.0 * (cam.height as f64 - 1.0),
                );
                let n = Vector2::new((px.x - cam.cx) / cam.fx, (px.y - cam.cy) / cam.fy);
                let round = cam.undistort_normalized(cam.distort_normalized(n));
                let back = Vector2::new(round.x * cam.fx + cam.cx, round.y * cam.fy + cam.cy);
                worst = worst.max((back - px).norm());
            }
        }
        assert!(worst < 1e-6, "worst pixel round-trip error {worst}");
    }

    #[test]
    fn project_point_on_optical_axis() {
        let cam = CameraModel {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            omega: 0.0,
            width: 2,
            height: 2,
        };
        let px = cam.project(&Vector3::new(0.0, 0.0, 1.0), false).unwrap();
        assert_relative_eq!(px, Vector2::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn project_point_pinhole_arithmetic() {
        let cam = CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 320.0,
            cy: 240.0,
            omega: 0.0,
            width: 640,
            height: 480,
        };
        let px = cam.project(&Vector3::new(1.0, 0.0, 2.0), false).unwrap();
        assert_relative_eq!(px, Vector2::new(370.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn project_point_behind_camera_errors() {
        let cam = test_camera(0.0);
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0), false).is_err());
        assert!(cam.project(&Vector3::new(0.0, 0.0, 0.0), false).is_err());
    }
}
