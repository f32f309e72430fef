//! Measurement construction for structural lines and points.
//!
//! Per-view residuals are stacked over all visible clones, differentiated
//! numerically (central differences) with respect to the feature parameters
//! and the error state, and projected onto the left null space of the
//! feature Jacobian so the feature itself drops out of the update.

use super::{FilterState, MeasurementBlock};
use crate::atlanta::{project_line, signed_distances, LineSegment2D, StructuralLine};
use crate::geom::{CameraModel, Pose};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("fewer than two observations in the window")]
    TooFewViews,
    #[error("feature Jacobian is rank deficient; measurement discarded")]
    RankDeficient,
    #[error("projection degenerate in every view")]
    Degenerate,
    #[error("state entry missing: {0}")]
    MissingState(String),
}

const FD_STEP: f64 = 1e-6;

/// Signed distances of a segment's endpoints to the line predicted from the
/// state, pixels.
pub fn line_residual(
    state: &FilterState,
    line: &StructuralLine,
    observation: &LineSegment2D,
    clone_id: u64,
    cam: &CameraModel,
) -> Result<Vector2<f64>, MeasurementError> {
    let cam_pose = state
        .camera_pose(clone_id)
        .ok_or_else(|| MeasurementError::MissingState(format!("clone {clone_id}")))?;
    let anchor = state
        .camera_position(line.anchor_pose_id)
        .ok_or_else(|| MeasurementError::MissingState(format!("anchor {}", line.anchor_pose_id)))?;
    let phi = state.worlds.phi(line.world_id);
    let proj = project_line(line.theta, line.rho, line.axis, phi, &anchor, &cam_pose, cam)
        .map_err(|_| MeasurementError::Degenerate)?;
    Ok(signed_distances(&proj.line, observation))
}

pub struct LineMeasurementInput<'a> {
    pub line: &'a StructuralLine,
    /// Observations as (clone id, segment), each clone still in the state.
    pub observations: &'a [(u64, LineSegment2D)],
    pub cam: &'a CameraModel,
    pub sigma: f64,
}

/// Perturbation targets for the finite-difference Jacobians.
#[derive(Clone, Copy)]
enum Target {
    None,
    Line(usize),
    Phi,
    Ext(usize),
    Clone(u64, usize),
    Point(usize),
}

fn perturb_pose(pose: &Pose, axis: usize, eps: f64) -> Pose {
    let mut out = *pose;
    if axis < 3 {
        let mut d = Vector3::zeros();
        d[axis] = eps;
        out.rotation = out.rotation.boxplus(d);
    } else {
        out.translation[axis - 3] += eps;
    }
    out
}

struct LineEval<'a> {
    input: &'a LineMeasurementInput<'a>,
    state: &'a FilterState,
    phi0: f64,
}

impl LineEval<'_> {
    /// Stacked residuals (2 per view) under one perturbation.
    fn residuals(&self, target: Target, eps: f64) -> Option<DVector<f64>> {
        let line = self.input.line;
        let mut theta = line.theta;
        let mut rho = line.rho;
        let mut phi = self.phi0;
        let mut ext = self.state.extrinsics;
        match target {
            Target::Line(0) => theta += eps,
            Target::Line(_) => rho += eps,
            Target::Phi => phi += eps,
            Target::Ext(k) => ext = perturb_pose(&ext, k, eps),
            _ => {}
        }
        let clone_pose = |id: u64| -> Option<Pose> {
            let c = self.state.clone_by_id(id)?;
            let mut pose = c.pose;
            if let Target::Clone(cid, k) = target {
                if cid == id {
                    pose = perturb_pose(&pose, k, eps);
                }
            }
            Some(pose)
        };
        let anchor_imu = clone_pose(line.anchor_pose_id)?;
        let anchor = (anchor_imu * ext).translation;
        let mut out = DVector::zeros(2 * self.input.observations.len());
        for (k, (cid, seg)) in self.input.observations.iter().enumerate() {
            let cam_pose = clone_pose(*cid)? * ext;
            let proj = project_line(theta, rho, line.axis, phi, &anchor, &cam_pose, self.input.cam)
                .ok()?;
            let r = signed_distances(&proj.line, seg);
            out[2 * k] = r.x;
            out[2 * k + 1] = r.y;
        }
        Some(out)
    }

    fn fd_column(&self, target: Target) -> Option<DVector<f64>> {
        let plus = self.residuals(target, FD_STEP)?;
        let minus = self.residuals(target, -FD_STEP)?;
        Some((plus - minus) / (2.0 * FD_STEP))
    }
}

/// Builds the null-space-projected measurement block for one line over its
/// in-window observations.
pub fn build_line_measurement(
    state: &FilterState,
    input: &LineMeasurementInput,
) -> Result<MeasurementBlock, MeasurementError> {
    if input.observations.len() < 2 {
        return Err(MeasurementError::TooFewViews);
    }
    let line = input.line;
    if state.clone_by_id(line.anchor_pose_id).is_none() {
        return Err(MeasurementError::MissingState(format!(
            "anchor {}",
            line.anchor_pose_id
        )));
    }
    for (cid, _) in input.observations {
        if state.clone_by_id(*cid).is_none() {
            return Err(MeasurementError::MissingState(format!("clone {cid}")));
        }
    }
    let eval = LineEval {
        input,
        state,
        phi0: state.worlds.phi(line.world_id),
    };
    let e0 = eval.residuals(Target::None, 0.0).ok_or(MeasurementError::Degenerate)?;
    let rows = e0.len();
    let n = state.error_dim();

    let mut h_l = DMatrix::zeros(rows, 2);
    for c in 0..2 {
        let col = eval.fd_column(Target::Line(c)).ok_or(MeasurementError::Degenerate)?;
        h_l.set_column(c, &col);
    }

    let mut h = DMatrix::zeros(rows, n);
    if let Some(col) = state.world_col(line.world_id) {
        let d = eval.fd_column(Target::Phi).ok_or(MeasurementError::Degenerate)?;
        h.set_column(col, &d);
    }
    for k in 0..6 {
        let d = eval.fd_column(Target::Ext(k)).ok_or(MeasurementError::Degenerate)?;
        h.set_column(state.ext_col() + k, &d);
    }
    let mut clone_ids: Vec<u64> = input.observations.iter().map(|(c, _)| *c).collect();
    if !clone_ids.contains(&line.anchor_pose_id) {
        clone_ids.push(line.anchor_pose_id);
    }
    for cid in clone_ids {
        let base = state
            .clone_col(cid)
            .ok_or_else(|| MeasurementError::MissingState(format!("clone {cid}")))?;
        for k in 0..6 {
            let d = eval
                .fd_column(Target::Clone(cid, k))
                .ok_or(MeasurementError::Degenerate)?;
            h.set_column(base + k, &d);
        }
    }

    project_left_nullspace(&e0, &h, &h_l, input.sigma)
}

pub struct PointMeasurementInput<'a> {
    /// Triangulated world point used as the linearization point.
    pub point_world: Vector3<f64>,
    pub observations: &'a [(u64, Vector2<f64>)],
    pub cam: &'a CameraModel,
    pub apply_distortion: bool,
    pub sigma: f64,
}

struct PointEval<'a> {
    input: &'a PointMeasurementInput<'a>,
    state: &'a FilterState,
}

impl PointEval<'_> {
    fn residuals(&self, target: Target, eps: f64) -> Option<DVector<f64>> {
        let mut p_w = self.input.point_world;
        let mut ext = self.state.extrinsics;
        match target {
            Target::Point(k) => p_w[k] += eps,
            Target::Ext(k) => ext = perturb_pose(&ext, k, eps),
            _ => {}
        }
        let mut out = DVector::zeros(2 * self.input.observations.len());
        for (k, (cid, px)) in self.input.observations.iter().enumerate() {
            let c = self.state.clone_by_id(*cid)?;
            let mut pose = c.pose;
            if let Target::Clone(tid, ax) = target {
                if tid == *cid {
                    pose = perturb_pose(&pose, ax, eps);
                }
            }
            let cam_pose = pose * ext;
            let p_c = cam_pose.inverse().transform_point(&p_w);
            let proj = self.input.cam.project(&p_c, self.input.apply_distortion).ok()?;
            out[2 * k] = px.x - proj.x;
            out[2 * k + 1] = px.y - proj.y;
        }
        Some(out)
    }

    fn fd_column(&self, target: Target) -> Option<DVector<f64>> {
        let plus = self.residuals(target, FD_STEP)?;
        let minus = self.residuals(target, -FD_STEP)?;
        Some((plus - minus) / (2.0 * FD_STEP))
    }
}

/// Builds the null-space-projected block for one point feature (standard
/// MSCKF form, three eliminated columns).
pub fn build_point_measurement(
    state: &FilterState,
    input: &PointMeasurementInput,
) -> Result<MeasurementBlock, MeasurementError> {
    if input.observations.len() < 2 {
        return Err(MeasurementError::TooFewViews);
    }
    let eval = PointEval { input, state };
    let e0 = eval.residuals(Target::None, 0.0).ok_or(MeasurementError::Degenerate)?;
    let rows = e0.len();
    let n = state.error_dim();

    let mut h_f = DMatrix::zeros(rows, 3);
    for c in 0..3 {
        let col = eval.fd_column(Target::Point(c)).ok_or(MeasurementError::Degenerate)?;
        h_f.set_column(c, &col);
    }
    let mut h = DMatrix::zeros(rows, n);
    for k in 0..6 {
        let d = eval.fd_column(Target::Ext(k)).ok_or(MeasurementError::Degenerate)?;
        h.set_column(state.ext_col() + k, &d);
    }
    for (cid, _) in input.observations {
        let base = state
            .clone_col(*cid)
            .ok_or_else(|| MeasurementError::MissingState(format!("clone {cid}")))?;
        for k in 0..6 {
            let d = eval
                .fd_column(Target::Clone(*cid, k))
                .ok_or(MeasurementError::Degenerate)?;
            h.set_column(base + k, &d);
        }
    }

    project_left_nullspace(&e0, &h, &h_f, input.sigma)
}

/// Projects the residual and state Jacobian onto the left null space of the
/// feature Jacobian. Returns `RankDeficient` if the feature Jacobian does
/// not have full column rank.
fn project_left_nullspace(
    e0: &DVector<f64>,
    h_state: &DMatrix<f64>,
    h_feat: &DMatrix<f64>,
    sigma: f64,
) -> Result<MeasurementBlock, MeasurementError> {
    let m = h_feat.nrows();
    let k = h_feat.ncols();
    if m <= k {
        return Err(MeasurementError::TooFewViews);
    }
    // Householder QR of [H_feat | I]: the first k columns of Q span
    // col(H_feat), the remaining m-k columns are its left null space.
    let mut a = DMatrix::zeros(m, k + m);
    a.view_mut((0, 0), (m, k)).copy_from(h_feat);
    for i in 0..m {
        a[(i, k + i)] = 1.0;
    }
    let (q, r) = a.qr().unpack();
    let scale = r[(0, 0)].abs().max(1e-12);
    for d in 0..k {
        if r[(d, d)].abs() < 1e-8 * scale {
            return Err(MeasurementError::RankDeficient);
        }
    }
    let null = q.columns(k, m - k);
    let residual = null.transpose() * (-e0);
    let jacobian = null.transpose() * h_state;
    Ok(MeasurementBlock {
        residual,
        jacobian,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlanta::{line_point_at, LineAxis, DUMMY_WORLD_ID};
    use crate::estimator::LinePrior;
    use crate::filter::ImuState;
    use crate::geom::Rotation;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn cam() -> CameraModel {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            omega: 0.0,
            width: 640,
            height: 480,
        }
    }

    /// Body x forward, y left, z up; camera z forward, x right, y down.
    fn body_cam_rotation() -> Rotation {
        Rotation::from_matrix(&Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        ))
    }

    /// A state with clones translated sideways looking along world +X at a
    /// vertical line two meters ahead.
    fn line_scene() -> (FilterState, StructuralLine, Vec<(u64, LineSegment2D)>) {
        let ext = Pose::new(body_cam_rotation(), Vector3::new(0.05, 0.0, 0.0));
        let mut state = FilterState::new(ImuState::at_rest(), ext);
        let n = state.cov.nrows();
        for i in 0..n {
            state.cov[(i, i)] = 1e-4;
        }
        let c = cam();
        let mut obs = Vec::new();
        let gt = StructuralLine {
            world_id: DUMMY_WORLD_ID,
            axis: LineAxis::Z,
            anchor_pose_id: 0,
            theta: 0.15,
            rho: 0.45,
            range: (-0.5, 1.2),
            prior: LinePrior::diffuse(0.15, 0.45),
        };
        for k in 0..3 {
            state.imu.pose = Pose::new(
                Rotation::identity(),
                Vector3::new(0.0, -0.5 + 0.5 * k as f64, 0.0),
            );
            let id = state.augment_pose(k as f64 * 0.1);
            let cam_pose = state.camera_pose(id).unwrap();
            let inv = cam_pose.inverse();
            // Anchor is the camera position of clone 0.
            let anchor = state.camera_position(0).unwrap();
            let p1 = line_point_at(&gt, 0.0, &anchor, gt.range.0).unwrap();
            let p2 = line_point_at(&gt, 0.0, &anchor, gt.range.1).unwrap();
            let a = c.project(&inv.transform_point(&p1), false).unwrap();
            let b = c.project(&inv.transform_point(&p2), false).unwrap();
            obs.push((id, LineSegment2D::new(a, b, id)));
        }
        (state, gt, obs)
    }

    #[test]
    fn line_block_has_2k_minus_2_rows() {
        let (state, line, obs) = line_scene();
        let c = cam();
        let block = build_line_measurement(
            &state,
            &LineMeasurementInput {
                line: &line,
                observations: &obs,
                cam: &c,
                sigma: 1.5,
            },
        )
        .unwrap();
        assert_eq!(block.residual.len(), 4);
        assert_eq!(block.jacobian.ncols(), state.error_dim());
    }

    #[test]
    fn projected_residual_is_orthogonal_to_feature_jacobian() {
        let (state, line, obs) = line_scene();
        let c = cam();
        let eval = LineEval {
            input: &LineMeasurementInput {
                line: &line,
                observations: &obs,
                cam: &c,
                sigma: 1.5,
            },
            state: &state,
            phi0: 0.0,
        };
        let mut h_l = DMatrix::zeros(2 * obs.len(), 2);
        for col in 0..2 {
            h_l.set_column(col, &eval.fd_column(Target::Line(col)).unwrap());
        }
        let e0 = eval.residuals(Target::None, 0.0).unwrap();
        let h = DMatrix::zeros(2 * obs.len(), state.error_dim());
        let block = project_left_nullspace(&e0, &h, &h_l, 1.5).unwrap();
        // Recover the null basis action: rows of the projected Jacobian are
        // N^T H = 0 here, but more importantly N^T H_l must vanish.
        let mut a = DMatrix::zeros(h_l.nrows(), 2 + h_l.nrows());
        a.view_mut((0, 0), (h_l.nrows(), 2)).copy_from(&h_l);
        for i in 0..h_l.nrows() {
            a[(i, 2 + i)] = 1.0;
        }
        let (q, _) = a.qr().unpack();
        let null = q.columns(2, h_l.nrows() - 2);
        let prod = null.transpose() * &h_l;
        assert!(prod.abs().max() < 1e-9, "null-space leakage {}", prod.abs().max());
        assert_eq!(block.residual.len(), h_l.nrows() - 2);
    }

    #[test]
    fn zero_noise_residual_vanishes_at_truth() {
        let (state, line, obs) = line_scene();
        let c = cam();
        let block = build_line_measurement(
            &state,
            &LineMeasurementInput {
                line: &line,
                observations: &obs,
                cam: &c,
                sigma: 1.5,
            },
        )
        .unwrap();
        assert!(
            block.residual.norm() < 1e-6,
            "residual at truth {}",
            block.residual.norm()
        );
    }

    #[test]
    fn residual_matches_perpendicular_displacement() {
        let (state, line, mut obs) = line_scene();
        let c = cam();
        // Displace one endpoint 2.5 px along the image-line normal.
        let base = line_residual(&state, &line, &obs[1].1, obs[1].0, &c).unwrap();
        assert!(base.norm() < 1e-9);
        let cam_pose = state.camera_pose(obs[1].0).unwrap();
        let anchor = state.camera_position(line.anchor_pose_id).unwrap();
        let proj = project_line(line.theta, line.rho, line.axis, 0.0, &anchor, &cam_pose, &c).unwrap();
        let normal = Vector2::new(proj.line.x, proj.line.y);
        obs[1].1.a += normal * 2.5;
        let r = line_residual(&state, &line, &obs[1].1, obs[1].0, &c).unwrap();
        assert_relative_eq!(r.x, 2.5, epsilon = 1e-9);
        assert_relative_eq!(r.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn point_block_has_2k_minus_3_rows() {
        let ext = Pose::new(body_cam_rotation(), Vector3::zeros());
        let mut state = FilterState::new(ImuState::at_rest(), ext);
        let c = cam();
        let p_w = Vector3::new(3.0, 0.4, 0.2);
        let mut obs = Vec::new();
        for k in 0..3 {
            state.imu.pose = Pose::new(
                Rotation::identity(),
                Vector3::new(0.0, -0.4 + 0.4 * k as f64, 0.0),
            );
            let id = state.augment_pose(k as f64 * 0.1);
            let cam_pose = state.camera_pose(id).unwrap();
            let px = c
                .project(&cam_pose.inverse().transform_point(&p_w), false)
                .unwrap();
            obs.push((id, px));
        }
        let block = build_point_measurement(
            &state,
            &PointMeasurementInput {
                point_world: p_w,
                observations: &obs,
                cam: &c,
                apply_distortion: false,
                sigma: 1.0,
            },
        )
        .unwrap();
        assert_eq!(block.residual.len(), 3);
        assert!(block.residual.norm() < 1e-6);
    }

    #[test]
    fn jacobian_first_order_consistency() {
        let (state, line, obs) = line_scene();
        let c = cam();
        let input = LineMeasurementInput {
            line: &line,
            observations: &obs,
            cam: &c,
            sigma: 1.5,
        };
        let eval = LineEval {
            input: &input,
            state: &state,
            phi0: 0.0,
        };
        // Taylor check on a clone rotation column: |r(x+d) - r(x) - J d|
        // must shrink quadratically with the step.
        let target = Target::Clone(obs[1].0, 1);
        let j = eval.fd_column(target).unwrap();
        let r0 = eval.residuals(Target::None, 0.0).unwrap();
        let mut prev_ratio = None;
        for step in [1e-3, 1e-4, 1e-5] {
            let r1 = eval.residuals(target, step).unwrap();
            let lin_err = (&r1 - &r0 - &j * step).norm();
            let ratio = lin_err / (step * step);
            if let Some(p) = prev_ratio {
                // The quadratic coefficient stays bounded across steps.
                assert!(ratio < p * 50.0 + 1e3);
            }
            prev_ratio = Some(ratio.max(1e-9));
        }
    }
}
