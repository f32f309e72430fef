//! Atlanta-world registry and structural-line geometry.
//!
//! The scene is a superposition of local Manhattan worlds sharing the
//! gravity axis, each with a horizontal heading `phi` in `[0, pi/2)`. A
//! structural line is aligned with one axis of one local world and is
//! parameterized by the inverse-depth polar coordinates `(theta, rho)` of
//! its intersection point with the XY plane of a parameter space `{L}` in
//! which the line runs along Z. `{L}` is attached to a *starting frame*
//! `{S}`: oriented like the line's local world, with origin at the camera
//! position when the line was first detected.

use crate::estimator::LinePrior;
use crate::geom::{CameraModel, Pose, Rotation};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AtlantaError {
    #[error("projected intersection point is parallel to the vanishing direction")]
    DegenerateProjection,
    #[error("back-projected midpoint is parallel to the line axis")]
    DegenerateInitialization,
    #[error("line passes through the new anchor, inverse depth is unbounded")]
    ReanchorDegenerate,
    #[error("line at infinity (rho = 0) has no finite endpoints")]
    AtInfinity,
}

/// Direction a structural line is aligned with inside its local world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LineAxis {
    X,
    Y,
    Z,
}

/// The constant rotation `^S_L R` taking the line parameter space `{L}`
/// (line along Z) into the starting frame for each axis.
pub fn axis_rotation(axis: LineAxis) -> Matrix3<f64> {
    match axis {
        LineAxis::X => Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
        LineAxis::Y => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
        LineAxis::Z => Matrix3::identity(),
    }
}

/// `^W_S R(phi)`: rotation about the gravity direction aligning a starting
/// frame of heading `phi` with the world.
pub fn heading_rotation(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * std::f64::consts::PI);
    if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    x
}

/// Normalizes a heading into `[0, pi/2)`.
pub fn normalize_heading(phi: f64) -> f64 {
    phi.rem_euclid(std::f64::consts::FRAC_PI_2)
}

/// Circular distance between two headings in the `[0, pi/2)` quotient.
pub fn heading_distance(a: f64, b: f64) -> f64 {
    let d = (normalize_heading(a) - normalize_heading(b)).abs();
    d.min(std::f64::consts::FRAC_PI_2 - d)
}

pub const DUMMY_WORLD_ID: usize = 0;

/// One local Manhattan world. The dummy world (`id = 0`, `phi = 0`) always
/// exists, is never merged away, and owns every vertical line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManhattanWorld {
    pub id: usize,
    pub phi: f64,
    /// Whether the heading is an estimated state variable. False only for
    /// the dummy world.
    pub in_state: bool,
}

/// Set of active local worlds.
#[derive(Debug, Clone)]
pub struct WorldRegistry {
    worlds: Vec<ManhattanWorld>,
    next_id: usize,
}

impl Default for WorldRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl WorldRegistry {
    pub fn new() -> Self {
        WorldRegistry {
            worlds: vec![ManhattanWorld {
                id: DUMMY_WORLD_ID,
                phi: 0.0,
                in_state: false,
            }],
            next_id: 1,
        }
    }

    pub fn get(&self, id: usize) -> Option<&ManhattanWorld> {
        self.worlds.iter().find(|w| w.id == id)
    }

    pub fn phi(&self, id: usize) -> f64 {
        self.get(id).map(|w| w.phi).unwrap_or(0.0)
    }

    pub fn set_phi(&mut self, id: usize, phi: f64) {
        if let Some(w) = self.worlds.iter_mut().find(|w| w.id == id) {
            w.phi = phi;
        }
    }

    /// Detected (estimated) worlds in state order.
    pub fn detected(&self) -> impl Iterator<Item = &ManhattanWorld> {
        self.worlds.iter().filter(|w| w.in_state)
    }

    pub fn detected_count(&self) -> usize {
        self.worlds.iter().filter(|w| w.in_state).count()
    }

    /// Position of a detected world among the state heading variables.
    pub fn state_position(&self, id: usize) -> Option<usize> {
        self.worlds
            .iter()
            .filter(|w| w.in_state)
            .position(|w| w.id == id)
    }

    pub fn add(&mut self, phi: f64) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.worlds.push(ManhattanWorld {
            id,
            phi: normalize_heading(phi),
            in_state: true,
        });
        id
    }

    /// Adds a world whose heading is held fixed (never estimated). Used by
    /// the plain point+line mode, where each line keeps the orientation it
    /// was detected with instead of sharing a refined heading.
    pub fn add_frozen(&mut self, phi: f64) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.worlds.push(ManhattanWorld {
            id,
            phi: normalize_heading(phi),
            in_state: false,
        });
        id
    }

    /// Removes a detected world. The dummy world cannot be removed.
    pub fn remove(&mut self, id: usize) -> bool {
        if id == DUMMY_WORLD_ID {
            return false;
        }
        let before = self.worlds.len();
        self.worlds.retain(|w| w.id != id);
        self.worlds.len() != before
    }

    pub fn iter(&self) -> impl Iterator<Item = &ManhattanWorld> {
        self.worlds.iter()
    }
}

/// 2D line segment observation, undistorted pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment2D {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub frame_id: u64,
}

impl LineSegment2D {
    pub fn new(a: Vector2<f64>, b: Vector2<f64>, frame_id: u64) -> Self {
        LineSegment2D { a, b, frame_id }
    }

    pub fn a_h(&self) -> Vector3<f64> {
        Vector3::new(self.a.x, self.a.y, 1.0)
    }

    pub fn b_h(&self) -> Vector3<f64> {
        Vector3::new(self.b.x, self.b.y, 1.0)
    }

    pub fn midpoint(&self) -> Vector2<f64> {
        (self.a + self.b) * 0.5
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn direction(&self) -> Vector2<f64> {
        (self.b - self.a).normalize()
    }

    /// Homogeneous line through the endpoints, normalized so that
    /// `sqrt(l1^2 + l2^2) = 1`.
    pub fn line(&self) -> Vector3<f64> {
        let l = self.a_h().cross(&self.b_h());
        let n = l.fixed_rows::<2>(0).norm();
        l / n
    }

    /// Perpendicular distance of a point to the infinite segment line.
    pub fn distance_to_point(&self, p: Vector2<f64>) -> f64 {
        let l = self.line();
        (l.x * p.x + l.y * p.y + l.z).abs()
    }
}

/// A structural line: `(theta, rho)` inverse-depth parameters anchored to a
/// starting frame, plus the 3D range along the line and its prior belief.
#[derive(Debug, Clone)]
pub struct StructuralLine {
    pub world_id: usize,
    pub axis: LineAxis,
    /// Clone id of the pose the starting frame is anchored to.
    pub anchor_pose_id: u64,
    pub theta: f64,
    /// Inverse distance to the line, 1/m. `rho = 0` encodes a line at
    /// infinity.
    pub rho: f64,
    /// Extent of the observed part of the line along Z of `{L}`, meters.
    pub range: (f64, f64),
    pub prior: LinePrior,
}

/// Upper clamp for the inverse depth (0.2 m minimum line distance).
pub const RHO_MAX: f64 = 5.0;

impl StructuralLine {
    /// Intersection point with the XY plane of `{L}`: `(cos/rho, sin/rho)`.
    pub fn plane_point(&self) -> Result<Vector2<f64>, AtlantaError> {
        if self.rho <= 0.0 {
            return Err(AtlantaError::AtInfinity);
        }
        Ok(Vector2::new(
            self.theta.cos() / self.rho,
            self.theta.sin() / self.rho,
        ))
    }

    pub fn params(&self) -> Vector2<f64> {
        Vector2::new(self.theta, self.rho)
    }

    pub fn set_params(&mut self, l: Vector2<f64>) {
        let (theta, rho) = canonicalize_params(l.x, l.y);
        self.theta = theta;
        self.rho = rho;
    }
}

/// Wraps theta to `(-pi, pi]` and resolves the sign ambiguity of rho: a
/// negative rho flips theta by pi. Rho is clamped to `[0, RHO_MAX]`.
pub fn canonicalize_params(theta: f64, rho: f64) -> (f64, f64) {
    let (theta, rho) = if rho < 0.0 {
        (theta + std::f64::consts::PI, -rho)
    } else {
        (theta, rho)
    };
    (wrap_angle(theta), rho.min(RHO_MAX))
}

/// Rotation `^W_L R` from the line parameter space into the world.
pub fn world_from_param_rotation(axis: LineAxis, phi: f64) -> Matrix3<f64> {
    heading_rotation(phi) * axis_rotation(axis)
}

/// Result of projecting a structural line onto the image.
#[derive(Debug, Clone, Copy)]
pub struct LineProjection {
    /// Image line coefficients normalized so `sqrt(l1^2+l2^2) = 1`; signed
    /// point-line products are then pixel-valued.
    pub line: Vector3<f64>,
    /// Homogeneous pixel coordinates of the vanishing point of the line
    /// direction.
    pub vanishing_point: Vector3<f64>,
}

/// Projects a structural line onto the image plane.
///
/// `anchor_origin` is `^W p_S`, the starting-frame origin; `cam_pose` is
/// `^W_C tau`. Lines at infinity (`rho = 0`) project like pure directions.
pub fn project_line(
    theta: f64,
    rho: f64,
    axis: LineAxis,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    cam_pose: &Pose,
    cam: &CameraModel,
) -> Result<LineProjection, AtlantaError> {
    let r_cw = cam_pose.rotation.inverse().matrix();
    let p_cw = -(r_cw * cam_pose.translation);
    let m = r_cw * world_from_param_rotation(axis, phi);
    let r = Vector3::new(theta.cos(), theta.sin(), 0.0);
    let c_lp = m * r + (r_cw * anchor_origin + p_cw) * rho;
    let c_v = m.column(2).into_owned();
    let cross = c_lp.cross(&c_v);
    let line = cam.k_inv_t() * cross;
    let n = line.fixed_rows::<2>(0).norm();
    if n < 1e-12 {
        return Err(AtlantaError::DegenerateProjection);
    }
    Ok(LineProjection {
        line: line / n,
        vanishing_point: cam.k_matrix() * c_v,
    })
}

/// Signed distances of the segment endpoints to a normalized image line.
pub fn signed_distances(line: &Vector3<f64>, seg: &LineSegment2D) -> Vector2<f64> {
    Vector2::new(seg.a_h().dot(line), seg.b_h().dot(line))
}

/// Vanishing points of the Z, X and Y directions of the world with heading
/// `phi`, as homogeneous pixel coordinates.
///
/// `cam_orientation` is `^W_C R`.
pub fn vanishing_points(
    phi: f64,
    cam_orientation: &Rotation,
    cam: &CameraModel,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let r_cw = cam_orientation.inverse().matrix();
    let k = cam.k_matrix();
    let (s, c) = phi.sin_cos();
    let vz = k * (r_cw * Vector3::new(0.0, 0.0, 1.0));
    let vx = k * (r_cw * Vector3::new(c, -s, 0.0));
    let vy = k * (r_cw * Vector3::new(s, c, 0.0));
    (vz, vx, vy)
}

/// Vanishing line of the ground plane, `l_inf = K^-T ^C_W R (0,0,1)^T`.
pub fn horizon_line(cam_orientation: &Rotation, cam: &CameraModel) -> Vector3<f64> {
    cam.k_inv_t() * (cam_orientation.inverse().matrix() * Vector3::new(0.0, 0.0, 1.0))
}

/// Uncertainty inputs for line initialization.
#[derive(Debug, Clone, Copy)]
pub struct LineInitUncertainty {
    /// Segment detection error, pixels (the 2-4 px average detector error).
    pub sigma_px: f64,
    /// Marginal heading standard deviation of the line's world, radians.
    pub sigma_phi: f64,
    /// Marginal standard deviations of the camera orientation error, radians.
    pub sigma_cam_rot: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LineInit {
    pub theta: f64,
    pub prior: LinePrior,
}

/// Initializes `(theta_0, rho_0, Sigma_0)` from a classified segment.
///
/// `theta_0` is the heading of the back-projected segment midpoint in the
/// line parameter space; `rho` starts at the preset `rho0`. The angular
/// variance is propagated from the detection error, the world-heading
/// uncertainty and the camera-orientation uncertainty; `sigma_rho0` is a
/// preset covering near range to infinity.
pub fn init_line_from_segment(
    seg: &LineSegment2D,
    axis: LineAxis,
    phi: f64,
    cam_pose: &Pose,
    cam: &CameraModel,
    rho0: f64,
    sigma_rho0: f64,
    unc: &LineInitUncertainty,
) -> Result<LineInit, AtlantaError> {
    let theta0 = midpoint_theta(seg.midpoint(), axis, phi, &cam_pose.rotation, cam)?;

    // Detection error: shift the midpoint by sigma_px along the segment
    // normal and measure the induced angle change.
    let d = seg.direction();
    let normal = Vector2::new(-d.y, d.x);
    let shifted = seg.midpoint() + normal * unc.sigma_px;
    let dtheta_px = match midpoint_theta(shifted, axis, phi, &cam_pose.rotation, cam) {
        Ok(t) => wrap_angle(t - theta0),
        Err(_) => 0.0,
    };

    // Heading uncertainty.
    let dtheta_phi = if unc.sigma_phi > 0.0 {
        match midpoint_theta(
            seg.midpoint(),
            axis,
            phi + unc.sigma_phi,
            &cam_pose.rotation,
            cam,
        ) {
            Ok(t) => wrap_angle(t - theta0),
            Err(_) => 0.0,
        }
    } else {
        0.0
    };

    // Camera orientation uncertainty, one axis at a time.
    let mut var = dtheta_px * dtheta_px + dtheta_phi * dtheta_phi;
    for k in 0..3 {
        let s = unc.sigma_cam_rot[k];
        if s <= 0.0 {
            continue;
        }
        let mut delta = Vector3::zeros();
        delta[k] = s;
        let rot = cam_pose.rotation.boxplus(delta);
        if let Ok(t) = midpoint_theta(seg.midpoint(), axis, phi, &rot, cam) {
            let d = wrap_angle(t - theta0);
            var += d * d;
        }
    }
    var = var.max(1e-12);

    Ok(LineInit {
        theta: theta0,
        prior: LinePrior {
            mean: Vector2::new(theta0, rho0),
            cov: Matrix2::new(var, 0.0, 0.0, sigma_rho0 * sigma_rho0),
        },
    })
}

fn midpoint_theta(
    midpoint: Vector2<f64>,
    axis: LineAxis,
    phi: f64,
    cam_rotation: &Rotation,
    cam: &CameraModel,
) -> Result<f64, AtlantaError> {
    let ray = cam.unproject(midpoint, false);
    let m_l = world_from_param_rotation(axis, phi).transpose() * (cam_rotation.matrix() * ray);
    if m_l.fixed_rows::<2>(0).norm() < 1e-9 {
        return Err(AtlantaError::DegenerateInitialization);
    }
    Ok(m_l.y.atan2(m_l.x))
}

/// Parameter transform of a starting-frame origin change, with its
/// Jacobian evaluated at the given parameters.
fn shift_params(
    theta: f64,
    rho: f64,
    delta_xy: Vector2<f64>,
) -> Result<(f64, f64, Matrix2<f64>), AtlantaError> {
    if rho <= 1e-12 {
        // A line at infinity is unaffected by translation.
        return Ok((theta, rho, Matrix2::identity()));
    }
    let a = theta.cos() / rho;
    let b = theta.sin() / rho;
    let ap = a + delta_xy.x;
    let bp = b + delta_xy.y;
    let n2 = ap * ap + bp * bp;
    if n2 < 1e-18 {
        return Err(AtlantaError::ReanchorDegenerate);
    }
    let theta_p = bp.atan2(ap);
    let rho_p = 1.0 / n2.sqrt();

    // Chain rule through (a, b).
    let da_dtheta = -theta.sin() / rho;
    let da_drho = -theta.cos() / (rho * rho);
    let db_dtheta = theta.cos() / rho;
    let db_drho = -theta.sin() / (rho * rho);
    let dt_dap = -bp / n2;
    let dt_dbp = ap / n2;
    let dr_dap = -ap * rho_p * rho_p * rho_p;
    let dr_dbp = -bp * rho_p * rho_p * rho_p;
    let j = Matrix2::new(
        dt_dap * da_dtheta + dt_dbp * db_dtheta,
        dt_dap * da_drho + dt_dbp * db_drho,
        dr_dap * da_dtheta + dr_dbp * db_dtheta,
        dr_dap * da_drho + dr_dbp * db_drho,
    );
    Ok((theta_p, rho_p, j))
}

/// Moves a line's starting frame to a new origin.
///
/// Returns the re-anchored line (parameters, range and prior transformed)
/// together with the transformed current covariance. The world-frame point
/// set of the line is unchanged.
pub fn reanchor_line(
    line: &StructuralLine,
    cov: &Matrix2<f64>,
    phi: f64,
    old_anchor: &Vector3<f64>,
    new_anchor: &Vector3<f64>,
) -> Result<(StructuralLine, Matrix2<f64>), AtlantaError> {
    let l_rot = world_from_param_rotation(line.axis, phi);
    let delta = l_rot.transpose() * (old_anchor - new_anchor);
    let delta_xy = Vector2::new(delta.x, delta.y);

    let (theta_p, rho_p, j) = shift_params(line.theta, line.rho, delta_xy)?;
    if rho_p > RHO_MAX {
        return Err(AtlantaError::ReanchorDegenerate);
    }
    let (pt, pr, jp) = shift_params(line.prior.mean.x, line.prior.mean.y, delta_xy)?;

    let mut out = line.clone();
    out.theta = theta_p;
    out.rho = rho_p;
    out.range = (line.range.0 + delta.z, line.range.1 + delta.z);
    out.prior = LinePrior {
        mean: Vector2::new(pt, pr),
        cov: jp * line.prior.cov * jp.transpose(),
    };
    Ok((out, j * cov * j.transpose()))
}

/// Re-expresses a line under a new world heading (world merge).
///
/// The line direction snaps to the axis of the surviving world; the base
/// point (the intersection with the XY plane of `{L}`) is preserved. The
/// prior is transformed through the numerically evaluated Jacobian of the
/// re-expression map.
pub fn retag_world(
    line: &StructuralLine,
    old_phi: f64,
    new_phi: f64,
    new_world_id: usize,
    anchor: &Vector3<f64>,
) -> Result<StructuralLine, AtlantaError> {
    let remap = |theta: f64, rho: f64| -> Result<(f64, f64), AtlantaError> {
        if rho <= 1e-12 {
            // Direction-only line: rotate the azimuth by the heading change.
            let l_old = world_from_param_rotation(line.axis, old_phi);
            let l_new = world_from_param_rotation(line.axis, new_phi);
            let dir_w = l_old * Vector3::new(theta.cos(), theta.sin(), 0.0);
            let d = l_new.transpose() * dir_w;
            return Ok((d.y.atan2(d.x), 0.0));
        }
        let l_old = world_from_param_rotation(line.axis, old_phi);
        let l_new = world_from_param_rotation(line.axis, new_phi);
        let base_w = l_old * Vector3::new(theta.cos() / rho, theta.sin() / rho, 0.0) + anchor;
        let u = l_new.transpose() * (base_w - anchor);
        let n2 = u.x * u.x + u.y * u.y;
        if n2 < 1e-18 {
            return Err(AtlantaError::ReanchorDegenerate);
        }
        Ok((u.y.atan2(u.x), 1.0 / n2.sqrt()))
    };

    let (theta_p, rho_p) = remap(line.theta, line.rho)?;
    let (pm_t, pm_r) = remap(line.prior.mean.x, line.prior.mean.y)?;

    // Numeric Jacobian of the remap at the prior mean for the covariance.
    let eps = 1e-7;
    let mut j = Matrix2::zeros();
    for k in 0..2 {
        let mut plus = line.prior.mean;
        let mut minus = line.prior.mean;
        plus[k] += eps;
        minus[k] -= eps;
        let (tp, rp) = remap(plus.x, plus.y)?;
        let (tm, rm) = remap(minus.x, minus.y)?;
        j[(0, k)] = wrap_angle(tp - tm) / (2.0 * eps);
        j[(1, k)] = (rp - rm) / (2.0 * eps);
    }

    let mut out = line.clone();
    out.world_id = new_world_id;
    out.theta = theta_p;
    out.rho = rho_p;
    out.prior = LinePrior {
        mean: Vector2::new(pm_t, pm_r),
        cov: j * line.prior.cov * j.transpose(),
    };
    Ok(out)
}

/// World-frame point of the line at range parameter `r`.
pub fn line_point_at(
    line: &StructuralLine,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    r: f64,
) -> Result<Vector3<f64>, AtlantaError> {
    let p = line.plane_point()?;
    Ok(world_from_param_rotation(line.axis, phi) * Vector3::new(p.x, p.y, r) + anchor_origin)
}

/// World-frame endpoints of the observed line extent.
pub fn line_endpoints_3d(
    line: &StructuralLine,
    phi: f64,
    anchor_origin: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>), AtlantaError> {
    Ok((
        line_point_at(line, phi, anchor_origin, line.range.0)?,
        line_point_at(line, phi, anchor_origin, line.range.1)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_cam() -> CameraModel {
        CameraModel {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            omega: 0.0,
            width: 1000,
            height: 1000,
        }
    }

    fn test_line(theta: f64, rho: f64, axis: LineAxis, world_id: usize) -> StructuralLine {
        StructuralLine {
            world_id,
            axis,
            anchor_pose_id: 0,
            theta,
            rho,
            range: (0.0, 1.0),
            prior: LinePrior::diffuse(theta, rho),
        }
    }

    #[test]
    fn axis_rotations_match_constants() {
        assert_eq!(axis_rotation(LineAxis::Z), Matrix3::identity());
        let x = axis_rotation(LineAxis::X);
        assert_eq!(x.column(0).into_owned(), Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(x.column(1).into_owned(), Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(x.column(2).into_owned(), Vector3::new(1.0, 0.0, 0.0));
        for axis in [LineAxis::X, LineAxis::Y, LineAxis::Z] {
            let m = axis_rotation(axis);
            assert_relative_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-15);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-15);
        }
        // Third column is the axis direction itself.
        assert_eq!(
            axis_rotation(LineAxis::Y).column(2).into_owned(),
            Vector3::new(0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn heading_rotation_cases() {
        assert_relative_eq!(heading_rotation(0.0), Matrix3::identity(), epsilon = 1e-15);
        let r = heading_rotation(std::f64::consts::FRAC_PI_2);
        let expect = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expect, epsilon = 1e-12);
        let a = 0.3;
        let b = 0.9;
        assert_relative_eq!(
            heading_rotation(a) * heading_rotation(b),
            heading_rotation(a + b),
            epsilon = 1e-12
        );
    }

    #[test]
    fn project_vertical_line_at_unit_depth() {
        let line = test_line(0.0, 1.0, LineAxis::Z, DUMMY_WORLD_ID);
        let proj = project_line(
            line.theta,
            line.rho,
            line.axis,
            0.0,
            &Vector3::zeros(),
            &Pose::identity(),
            &unit_cam(),
        )
        .unwrap();
        // The 3D line is x=1, y=0; its image under the identity camera is
        // the line y = 0, i.e. coefficients proportional to (0, -1, 0).
        assert_relative_eq!(proj.line.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(proj.line.x.abs() + proj.line.y.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(proj.line.z, 0.0, epsilon = 1e-12);

        // Cross-check against two projected 3D points.
        let p1 = Vector3::new(1.0, 0.0, 0.5);
        let p2 = Vector3::new(1.0, 0.0, 2.0);
        for p in [p1, p2] {
            // Camera looks along +Z; express the world point in the camera
            // frame (identity) and dot with the homogeneous pixel.
            let px = unit_cam().project(&p, false).unwrap();
            let v = Vector3::new(px.x, px.y, 1.0);
            assert!(v.dot(&proj.line).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_along_line_direction_is_invariant() {
        let line = test_line(0.4, 0.7, LineAxis::Y, 1);
        let phi = 0.3;
        let anchor = Vector3::new(0.2, -0.4, 0.1);
        let dir = world_from_param_rotation(line.axis, phi) * Vector3::z();
        let cam = CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            omega: 0.0,
            width: 640,
            height: 480,
        };
        // Place the camera off-axis looking toward the line.
        let pose0 = Pose::new(
            Rotation::exp(Vector3::new(0.1, -0.7, 0.2)),
            Vector3::new(-2.0, 0.5, 0.3),
        );
        let pose1 = Pose::new(pose0.rotation, pose0.translation + dir * 0.8);
        let a = project_line(line.theta, line.rho, line.axis, phi, &anchor, &pose0, &cam).unwrap();
        let b = project_line(line.theta, line.rho, line.axis, phi, &anchor, &pose1, &cam).unwrap();
        assert_relative_eq!(a.line, b.line, epsilon = 1e-9);
    }

    #[test]
    fn vanishing_points_identity_case() {
        let (vz, vx, vy) = vanishing_points(0.0, &Rotation::identity(), &unit_cam());
        assert_relative_eq!(vz, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(vx, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(vy, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn vx_parallel_to_vy_of_rotated_world() {
        let rot = Rotation::exp(Vector3::new(0.2, -0.3, 0.5));
        let cam = unit_cam();
        let phi = 0.37;
        let (_, vx, _) = vanishing_points(phi, &rot, &cam);
        let (_, _, vy) = vanishing_points(phi + std::f64::consts::FRAC_PI_2, &rot, &cam);
        let cross = vx.cross(&vy).norm();
        assert!(cross < 1e-9, "vx and vy(phi+pi/2) not parallel: {cross}");
    }

    #[test]
    fn horizon_identity_and_pitched() {
        let cam = unit_cam();
        let l = horizon_line(&Rotation::identity(), &cam);
        assert_relative_eq!(l, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);

        // Pitch the camera down by 90 degrees: world Z maps to camera -Y
        // (rotation about camera X), so the horizon is the horizontal line
        // through the principal point.
        let pitched = Rotation::exp(Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        let l2 = horizon_line(&pitched, &cam);
        let n = l2 / l2.fixed_rows::<2>(0).norm();
        assert_relative_eq!(n.x.abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(n.y.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(n.z.abs(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn horizontal_vanishing_points_lie_on_horizon() {
        let mut rng = StdRng::seed_from_u64(5);
        let cam = unit_cam();
        for _ in 0..50 {
            let rot = Rotation::exp(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
            let l = horizon_line(&rot, &cam);
            let (_, vx, vy) = vanishing_points(phi, &rot, &cam);
            assert!(l.dot(&vx).abs() < 1e-9);
            assert!(l.dot(&vy).abs() < 1e-9);
        }
    }

    #[test]
    fn init_theta_from_midpoint() {
        let seg = LineSegment2D::new(Vector2::new(1.0, -0.1), Vector2::new(1.0, 0.1), 0);
        let unc = LineInitUncertainty {
            sigma_px: 0.0,
            sigma_phi: 0.0,
            sigma_cam_rot: Vector3::zeros(),
        };
        let init = init_line_from_segment(
            &seg,
            LineAxis::Z,
            0.0,
            &Pose::identity(),
            &unit_cam(),
            0.5,
            5.0,
            &unc,
        )
        .unwrap();
        assert_relative_eq!(init.theta, 0.0, epsilon = 1e-12);
        assert_relative_eq!(init.prior.cov[(1, 1)], 25.0, epsilon = 1e-12);
    }

    #[test]
    fn init_degenerate_midpoint_errors() {
        // Midpoint at the principal point back-projects along +Z, which for
        // a vertical line is the line axis itself.
        let seg = LineSegment2D::new(Vector2::new(-0.1, 0.0), Vector2::new(0.1, 0.0), 0);
        let unc = LineInitUncertainty {
            sigma_px: 0.0,
            sigma_phi: 0.0,
            sigma_cam_rot: Vector3::zeros(),
        };
        // With an identity camera rotation the optical axis is world +Z,
        // so the back-projected midpoint is parallel to the vertical axis.
        let res = init_line_from_segment(
            &seg,
            LineAxis::Z,
            0.0,
            &Pose::identity(),
            &unit_cam(),
            0.5,
            5.0,
            &unc,
        );
        assert!(res.is_err());
    }

    #[test]
    fn reanchor_identity_is_noop() {
        let line = test_line(0.7, 0.8, LineAxis::Z, DUMMY_WORLD_ID);
        let cov = Matrix2::new(0.01, 0.001, 0.001, 0.04);
        let anchor = Vector3::new(1.0, 2.0, 3.0);
        let (out, cov2) = reanchor_line(&line, &cov, 0.0, &anchor, &anchor).unwrap();
        assert_relative_eq!(out.theta, line.theta, epsilon = 1e-12);
        assert_relative_eq!(out.rho, line.rho, epsilon = 1e-12);
        assert_relative_eq!(cov2, cov, epsilon = 1e-12);
    }

    #[test]
    fn reanchor_vertical_line_closest_point() {
        let line = test_line(0.0, 1.0, LineAxis::Z, DUMMY_WORLD_ID);
        let cov = Matrix2::identity();
        let (out, _) = reanchor_line(
            &line,
            &cov,
            0.0,
            &Vector3::zeros(),
            &Vector3::new(0.5, 0.0, 0.0),
        )
        .unwrap();
        assert_relative_eq!(out.theta, 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.rho, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reanchor_preserves_world_geometry() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let axis = match rng.gen_range(0..3) {
                0 => LineAxis::X,
                1 => LineAxis::Y,
                _ => LineAxis::Z,
            };
            let phi = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
            let line = test_line(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.05..4.0),
                axis,
                1,
            );
            let old_anchor = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let new_anchor = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let res = reanchor_line(&line, &Matrix2::identity(), phi, &old_anchor, &new_anchor);
            let Ok((out, _)) = res else { continue };
            for i in 0..10 {
                let r = line.range.0 + (line.range.1 - line.range.0) * (i as f64) / 9.0;
                let p_old = line_point_at(&line, phi, &old_anchor, r).unwrap();
                // Same world point expressed through the new parameters: the
                // range shifted by the anchor displacement along the line.
                let shift = (world_from_param_rotation(axis, phi).transpose()
                    * (old_anchor - new_anchor))
                    .z;
                let p_new = line_point_at(&out, phi, &new_anchor, r + shift).unwrap();
                worst = worst.max((p_old - p_new).norm());
            }
        }
        assert!(worst < 1e-9, "worst world-frame displacement {worst}");
    }

    #[test]
    fn endpoints_vertical_unit_line() {
        let line = test_line(0.0, 1.0, LineAxis::Z, DUMMY_WORLD_ID);
        let (s, e) = line_endpoints_3d(&line, 0.0, &Vector3::zeros()).unwrap();
        assert_relative_eq!(s, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(e, Vector3::new(1.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn endpoints_separated_by_range_span() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..100 {
            let mut line = test_line(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.05..4.0),
                LineAxis::X,
                1,
            );
            let r0 = rng.gen_range(-4.0..4.0);
            let r1 = r0 + rng.gen_range(0.1..5.0);
            line.range = (r0, r1);
            let (s, e) = line_endpoints_3d(&line, 0.77, &Vector3::new(1.0, 2.0, 3.0)).unwrap();
            assert_relative_eq!((e - s).norm(), r1 - r0, epsilon = 1e-9);
        }
    }

    #[test]
    fn endpoints_at_infinity_error() {
        let line = test_line(0.0, 0.0, LineAxis::Z, DUMMY_WORLD_ID);
        assert!(matches!(
            line_endpoints_3d(&line, 0.0, &Vector3::zeros()),
            Err(AtlantaError::AtInfinity)
        ));
    }

    #[test]
    fn projection_consistency_with_two_point_fit() {
        let mut rng = StdRng::seed_from_u64(31);
        let cam = CameraModel {
            fx: 450.0,
            fy: 455.0,
            cx: 320.0,
            cy: 240.0,
            omega: 0.0,
            width: 640,
            height: 480,
        };
        let mut checked = 0;
        let mut worst = 0.0f64;
        while checked < 2000 {
            let axis = match rng.gen_range(0..3) {
                0 => LineAxis::X,
                1 => LineAxis::Y,
                _ => LineAxis::Z,
            };
            let phi = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
            let line = test_line(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..3.0),
                axis,
                1,
            );
            let anchor = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let pose = Pose::new(
                Rotation::exp(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
            );
            let Ok(proj) =
                project_line(line.theta, line.rho, line.axis, phi, &anchor, &pose, &cam)
            else {
                continue;
            };
            let p1 = line_point_at(&line, phi, &anchor, rng.gen_range(-2.0..-0.5)).unwrap();
            let p2 = line_point_at(&line, phi, &anchor, rng.gen_range(0.5..2.0)).unwrap();
            let inv = pose.inverse();
            let (Ok(px1), Ok(px2)) = (
                cam.project(&inv.transform_point(&p1), false),
                cam.project(&inv.transform_point(&p2), false),
            ) else {
                continue;
            };
            let fit = Vector3::new(px1.x, px1.y, 1.0).cross(&Vector3::new(px2.x, px2.y, 1.0));
            let fit = fit / fit.fixed_rows::<2>(0).norm();
            // Compare directions up to sign.
            let err = (fit - proj.line).norm().min((fit + proj.line).norm());
            worst = worst.max(err);
            checked += 1;
        }
        assert!(worst < 1e-9, "worst coefficient-direction error {worst}");
    }

    #[test]
    fn heading_equivariance() {
        let mut rng = StdRng::seed_from_u64(41);
        let cam = unit_cam();
        for _ in 0..200 {
            let axis = if rng.gen() { LineAxis::X } else { LineAxis::Y };
            let phi = rng.gen_range(0.0..1.0);
            let delta = rng.gen_range(-0.5..0.5);
            let line = test_line(rng.gen_range(-3.0..3.0), rng.gen_range(0.1..3.0), axis, 1);
            let anchor = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let pose = Pose::new(
                Rotation::exp(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            // Rotating the whole world (camera and anchor) by the heading
            // change converts phi + delta into phi.
            let w = Rotation::from_matrix(&heading_rotation(-delta));
            let pose2 = Pose::new(w * pose.rotation, w * pose.translation);
            let anchor2 = w * anchor;
            let a = project_line(line.theta, line.rho, axis, phi + delta, &anchor, &pose, &cam);
            let b = project_line(line.theta, line.rho, axis, phi, &anchor2, &pose2, &cam);
            let (Ok(a), Ok(b)) = (a, b) else { continue };
            let err = (a.line - b.line).norm().min((a.line + b.line).norm());
            assert!(err < 1e-9, "equivariance violated: {err}");
        }
    }

    #[test]
    fn vanishing_point_lies_on_projected_line() {
        let mut rng = StdRng::seed_from_u64(43);
        let cam = unit_cam();
        for _ in 0..200 {
            let line = test_line(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..3.0),
                LineAxis::X,
                1,
            );
            let phi = rng.gen_range(0.0..1.5);
            let anchor = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let pose = Pose::new(
                Rotation::exp(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let Ok(p) = project_line(line.theta, line.rho, line.axis, phi, &anchor, &pose, &cam)
            else {
                continue;
            };
            let v = p.vanishing_point;
            let vn = v.norm();
            if vn < 1e-12 {
                continue;
            }
            assert!((p.line.dot(&v) / vn).abs() < 1e-9);
        }
    }

    #[test]
    fn retag_identical_heading_preserves_geometry() {
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..100 {
            let line = test_line(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.1..3.0),
                LineAxis::Y,
                2,
            );
            let phi = rng.gen_range(0.0..1.5);
            let anchor = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let out = retag_world(&line, phi, phi, 1, &anchor).unwrap();
            for i in 0..5 {
                let r = -1.0 + i as f64;
                let a = line_point_at(&line, phi, &anchor, r).unwrap();
                let b = line_point_at(&out, phi, &anchor, r).unwrap();
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn heading_distance_is_circular() {
        let d = heading_distance(0.01, std::f64::consts::FRAC_PI_2 - 0.01);
        assert_relative_eq!(d, 0.02, epsilon = 1e-12);
        assert_relative_eq!(heading_distance(0.3, 0.3), 0.0, epsilon = 1e-15);
    }
}
