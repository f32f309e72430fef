//! Out-of-state feature estimation.
//!
//! Features (points and structural lines) are never part of the filter
//! state. Lines are triangulated after each state update by minimizing the
//! sum of squared signed-distance residuals over the in-state views plus a
//! Gaussian prior term. Measurements dropped from the sliding window are
//! folded into that prior (*information accumulation*) instead of being
//! discarded.

use crate::atlanta::{
    self, canonicalize_params, project_line, signed_distances, wrap_angle, LineSegment2D,
    StructuralLine,
};
use crate::geom::{CameraModel, Pose};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no observations and no usable prior")]
    NoInformation,
    #[error("normal-equation matrix is singular")]
    SingularNormalEquations,
    #[error("triangulation parallax below threshold ({0} deg)")]
    ParallaxTooLow(f64),
    #[error("ray nearly parallel to the line")]
    RayParallel,
}

/// Gaussian prior on the line parameters `(theta, rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePrior {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl LinePrior {
    /// A prior so weak it never influences a solve with real observations.
    pub fn diffuse(theta: f64, rho: f64) -> Self {
        LinePrior {
            mean: Vector2::new(theta, rho),
            cov: Matrix2::new(1e8, 0.0, 0.0, 1e8),
        }
    }

    pub fn information(&self) -> Option<Matrix2<f64>> {
        self.cov.try_inverse()
    }
}

/// Final normal equation `Lambda * dl = Y` of a Gauss-Newton solve.
#[derive(Debug, Clone, Copy)]
pub struct NormalEquationSnapshot {
    pub lambda: Matrix2<f64>,
    pub rhs: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct TriangulationReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub normal_equation: NormalEquationSnapshot,
}

/// One view of a line: the camera pose `^W_C tau` and the observed segment.
#[derive(Debug, Clone)]
pub struct LineView {
    pub cam_pose: Pose,
    pub seg: LineSegment2D,
}

struct LineProblem<'a> {
    line: &'a StructuralLine,
    phi: f64,
    anchor_origin: Vector3<f64>,
    views: &'a [LineView],
    cam: &'a CameraModel,
    inv_sigma2: f64,
    prior_mean: Vector2<f64>,
    prior_info: Matrix2<f64>,
}

impl LineProblem<'_> {
    fn residuals(&self, l: Vector2<f64>) -> Vec<Option<Vector2<f64>>> {
        self.views
            .iter()
            .map(|v| {
                project_line(
                    l.x,
                    l.y,
                    self.line.axis,
                    self.phi,
                    &self.anchor_origin,
                    &v.cam_pose,
                    self.cam,
                )
                .ok()
                .map(|p| signed_distances(&p.line, &v.seg))
            })
            .collect()
    }

    fn cost(&self, l: Vector2<f64>) -> f64 {
        let mut c = 0.0;
        for r in self.residuals(l).into_iter().flatten() {
            c += r.norm_squared() * self.inv_sigma2;
        }
        let d = Vector2::new(wrap_angle(l.x - self.prior_mean.x), l.y - self.prior_mean.y);
        c + (d.transpose() * self.prior_info * d)[0]
    }

    /// Accumulates the Gauss-Newton normal equation at `l`. Jacobians are
    /// evaluated by central differences.
    fn normal_equation(&self, l: Vector2<f64>) -> (Matrix2<f64>, Vector2<f64>) {
        const EPS: f64 = 1e-6;
        let mut lambda = self.prior_info;
        let d = Vector2::new(wrap_angle(l.x - self.prior_mean.x), l.y - self.prior_mean.y);
        let mut y = -(self.prior_info * d);
        let base = self.residuals(l);
        for (k, r0) in base.iter().enumerate() {
            let Some(r0) = r0 else { continue };
            let mut j = Matrix2::zeros();
            let mut ok = true;
            for c in 0..2 {
                let mut lp = l;
                let mut lm = l;
                lp[c] += EPS;
                lm[c] -= EPS;
                let (rp, rm) = (
                    self.view_residual(k, lp),
                    self.view_residual(k, lm),
                );
                match (rp, rm) {
                    (Some(rp), Some(rm)) => j.set_column(c, &((rp - rm) / (2.0 * EPS))),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            lambda += j.transpose() * j * self.inv_sigma2;
            y -= j.transpose() * r0 * self.inv_sigma2;
        }
        (lambda, y)
    }

    fn view_residual(&self, k: usize, l: Vector2<f64>) -> Option<Vector2<f64>> {
        let v = &self.views[k];
        project_line(
            l.x,
            l.y,
            self.line.axis,
            self.phi,
            &self.anchor_origin,
            &v.cam_pose,
            self.cam,
        )
        .ok()
        .map(|p| signed_distances(&p.line, &v.seg))
    }
}

fn gauss_newton(problem: &LineProblem, init: Vector2<f64>) -> (Vector2<f64>, TriangulationReport) {
    let mut l = init;
    let mut cost = problem.cost(l);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_ne = problem.normal_equation(l);
    for it in 0..10 {
        iterations = it + 1;
        let (lambda, y) = problem.normal_equation(l);
        last_ne = (lambda, y);
        let Some(chol) = lambda.cholesky() else { break };
        let delta = chol.solve(&y);
        // Step halving on cost increase keeps plain Gauss-Newton robust;
        // inactive on well-posed problems.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=5 {
            let cand = apply_step(l, delta * alpha);
            let c = problem.cost(cand);
            if c <= cost + 1e-15 {
                l = cand;
                cost = c;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        if (delta * alpha).norm() < 1e-8 {
            converged = true;
            // Refresh the normal equation at the accepted solution so the
            // snapshot reflects the final linearization point.
            last_ne = problem.normal_equation(l);
            break;
        }
    }
    if !converged {
        last_ne = problem.normal_equation(l);
    }
    (
        l,
        TriangulationReport {
            converged,
            iterations,
            final_cost: cost,
            normal_equation: NormalEquationSnapshot {
                lambda: last_ne.0,
                rhs: last_ne.1,
            },
        },
    )
}

fn apply_step(l: Vector2<f64>, delta: Vector2<f64>) -> Vector2<f64> {
    let (theta, rho) = canonicalize_params(l.x + delta.x, l.y + delta.y);
    Vector2::new(theta, rho)
}

/// Triangulates a structural line over the in-state views, regularized by
/// its prior. Returns the updated `(theta, rho)` and a convergence report;
/// with zero observations the optimum is exactly the prior mean.
pub fn triangulate_line(
    line: &StructuralLine,
    prior: &LinePrior,
    views: &[LineView],
    phi: f64,
    anchor_origin: Vector3<f64>,
    cam: &CameraModel,
    sigma_im: f64,
) -> Result<(Vector2<f64>, TriangulationReport), EstimatorError> {
    let prior_info = prior
        .information()
        .ok_or(EstimatorError::SingularNormalEquations)?;
    if views.is_empty() {
        let (theta, rho) = canonicalize_params(prior.mean.x, prior.mean.y);
        return Ok((
            Vector2::new(theta, rho),
            TriangulationReport {
                converged: true,
                iterations: 0,
                final_cost: 0.0,
                normal_equation: NormalEquationSnapshot {
                    lambda: prior_info,
                    rhs: Vector2::zeros(),
                },
            },
        ));
    }
    let problem = LineProblem {
        line,
        phi,
        anchor_origin,
        views,
        cam,
        inv_sigma2: 1.0 / (sigma_im * sigma_im),
        prior_mean: prior.mean,
        prior_info,
    };
    Ok(gauss_newton(&problem, line.params()))
}

#[derive(Debug, Clone)]
pub struct AccumulationOutcome {
    pub prior: LinePrior,
    /// False when the normal equation was singular and the old prior kept.
    pub updated: bool,
}

/// Folds measurements dropped from the sliding window into the line prior.
///
/// Minimizes the dropped-view cost plus the old prior; the new mean is the
/// minimizer and the new covariance is the inverse of the final
/// normal-equation matrix.
pub fn accumulate_information(
    line: &StructuralLine,
    old_prior: &LinePrior,
    dropped_views: &[LineView],
    phi: f64,
    anchor_origin: Vector3<f64>,
    cam: &CameraModel,
    sigma_im: f64,
) -> Result<AccumulationOutcome, EstimatorError> {
    if dropped_views.is_empty() {
        return Ok(AccumulationOutcome {
            prior: *old_prior,
            updated: false,
        });
    }
    let prior_info = old_prior
        .information()
        .ok_or(EstimatorError::SingularNormalEquations)?;
    let problem = LineProblem {
        line,
        phi,
        anchor_origin,
        views: dropped_views,
        cam,
        inv_sigma2: 1.0 / (sigma_im * sigma_im),
        prior_mean: old_prior.mean,
        prior_info,
    };
    let (mean, report) = gauss_newton(&problem, line.params());
    match report.normal_equation.lambda.try_inverse() {
        Some(cov) if cov[(0, 0)].is_finite() && cov[(1, 1)].is_finite() => {
            Ok(AccumulationOutcome {
                prior: LinePrior { mean, cov },
                updated: true,
            })
        }
        _ => Ok(AccumulationOutcome {
            prior: *old_prior,
            updated: false,
        }),
    }
}

/// Re-estimates the 3D range of a line by intersecting it with the
/// back-projection rays of the latest segment endpoints.
pub fn update_range(
    line: &StructuralLine,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    last_seg: &LineSegment2D,
    last_cam_pose: &Pose,
    cam: &CameraModel,
) -> Result<(f64, f64), EstimatorError> {
    if line.rho <= 0.0 {
        return Err(EstimatorError::RayParallel);
    }
    let p = line.plane_point().map_err(|_| EstimatorError::RayParallel)?;
    let l_rot = atlanta::world_from_param_rotation(line.axis, phi);
    let q = l_rot * Vector3::new(p.x, p.y, 0.0) + anchor_origin;
    let d = l_rot * Vector3::z();
    let c = last_cam_pose.translation;

    let mut rs = [0.0f64; 2];
    for (i, px) in [last_seg.a, last_seg.b].into_iter().enumerate() {
        let u = (last_cam_pose.rotation * cam.unproject(px, false)).normalize();
        let du = d.dot(&u);
        let denom = 1.0 - du * du;
        // Below ~0.5 degrees between ray and line the intersection is
        // numerically meaningless.
        if denom < 7.6e-5 {
            return Err(EstimatorError::RayParallel);
        }
        let w = q - c;
        rs[i] = (-d.dot(&w) + du * u.dot(&w)) / denom;
    }
    if rs[0] <= rs[1] {
        Ok((rs[0], rs[1]))
    } else {
        Ok((rs[1], rs[0]))
    }
}

/// Post-update gate: discard a line whose residual magnitude in any visible
/// view exceeds the threshold (strictly greater).
pub fn reprojection_outlier_check(
    line: &StructuralLine,
    views: &[LineView],
    phi: f64,
    anchor_origin: Vector3<f64>,
    cam: &CameraModel,
    threshold_px: f64,
) -> bool {
    for v in views {
        match project_line(
            line.theta,
            line.rho,
            line.axis,
            phi,
            &anchor_origin,
            &v.cam_pose,
            cam,
        ) {
            Ok(p) => {
                let r = signed_distances(&p.line, &v.seg);
                if r.x.abs() > threshold_px || r.y.abs() > threshold_px {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    true
}

/// One view of a point feature.
#[derive(Debug, Clone)]
pub struct PointView {
    pub cam_pose: Pose,
    pub pixel: Vector2<f64>,
}

/// Triangulates a point track by inverse-depth Gauss-Newton anchored at the
/// first observation. Returns the world-frame point.
pub fn triangulate_point(
    views: &[PointView],
    cam: &CameraModel,
    apply_distortion: bool,
    min_parallax_deg: f64,
) -> Result<Vector3<f64>, EstimatorError> {
    if views.len() < 2 {
        return Err(EstimatorError::NoInformation);
    }
    // Parallax check over world-frame observation rays.
    let mut max_angle = 0.0f64;
    let rays: Vec<Vector3<f64>> = views
        .iter()
        .map(|v| (v.cam_pose.rotation * cam.unproject(v.pixel, apply_distortion)).normalize())
        .collect();
    for i in 0..rays.len() {
        for j in (i + 1)..rays.len() {
            max_angle = max_angle.max(rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos());
        }
    }
    if max_angle < min_parallax_deg.to_radians() {
        return Err(EstimatorError::ParallaxTooLow(min_parallax_deg));
    }

    let anchor = views[0].cam_pose;
    let anchor_inv = anchor.inverse();
    // Parameters: (alpha, beta, rho) with the point at (alpha, beta, 1)/rho
    // in the anchor camera frame.
    let n0 = cam.unproject(views[0].pixel, apply_distortion);
    let mut x = Vector3::new(n0.x, n0.y, linear_init_inverse_depth(views, cam, apply_distortion));

    let residuals = |x: &Vector3<f64>| -> Option<nalgebra::DVector<f64>> {
        let mut r = nalgebra::DVector::zeros(2 * views.len());
        for (k, v) in views.iter().enumerate() {
            let p_anchor = Vector3::new(x.x, x.y, 1.0) / x.z.max(1e-6);
            let p_w = anchor.transform_point(&p_anchor);
            let p_c = v.cam_pose.inverse().transform_point(&p_w);
            let px = cam.project(&p_c, apply_distortion).ok()?;
            r[2 * k] = v.pixel.x - px.x;
            r[2 * k + 1] = v.pixel.y - px.y;
        }
        Some(r)
    };

    let mut cost = residuals(&x)
        .map(|r| r.norm_squared())
        .ok_or(EstimatorError::NoInformation)?;
    for _ in 0..10 {
        const EPS: f64 = 1e-7;
        let r0 = residuals(&x).ok_or(EstimatorError::NoInformation)?;
        let mut j = nalgebra::DMatrix::zeros(r0.len(), 3);
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += EPS;
            xm[c] -= EPS;
            let (rp, rm) = (
                residuals(&xp).ok_or(EstimatorError::NoInformation)?,
                residuals(&xm).ok_or(EstimatorError::NoInformation)?,
            );
            j.set_column(c, &((rp - rm) / (2.0 * EPS)));
        }
        let jt = j.transpose();
        let lambda: Matrix3<f64> = nalgebra::convert(&jt * &j);
        let y = &jt * &r0;
        let Some(chol) = lambda.cholesky() else {
            return Err(EstimatorError::SingularNormalEquations);
        };
        let delta = chol.solve(&Vector3::new(y[0], y[1], y[2]));
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=5 {
            let cand = x + delta * alpha;
            if cand.z > 1e-6 {
                if let Some(r) = residuals(&cand) {
                    let c = r.norm_squared();
                    if c <= cost + 1e-15 {
                        x = cand;
                        cost = c;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted || (delta * alpha).norm() < 1e-10 {
            break;
        }
    }
    let p_anchor = Vector3::new(x.x, x.y, 1.0) / x.z;
    let _ = anchor_inv;
    Ok(anchor.transform_point(&p_anchor))
}

/// Gaussian prior on a point's world position, the 3-parameter mirror of
/// [`LinePrior`] used by information accumulation for point tracks.
#[derive(Debug, Clone, Copy)]
pub struct PointPrior {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl PointPrior {
    pub fn information(&self) -> Option<Matrix3<f64>> {
        self.cov.try_inverse()
    }
}

/// Gauss-Newton refinement of a world point over the given views, with an
/// optional Gaussian prior. Returns the refined point and the final
/// normal-equation matrix.
pub fn refine_point(
    initial: Vector3<f64>,
    views: &[PointView],
    prior: Option<&PointPrior>,
    cam: &CameraModel,
    apply_distortion: bool,
    sigma_px: f64,
) -> Result<(Vector3<f64>, Matrix3<f64>), EstimatorError> {
    let inv_sigma2 = 1.0 / (sigma_px * sigma_px);
    let prior_info = match prior {
        Some(p) => p.information().ok_or(EstimatorError::SingularNormalEquations)?,
        None => Matrix3::zeros(),
    };
    if views.is_empty() && prior.is_none() {
        return Err(EstimatorError::NoInformation);
    }
    let residuals = |p: &Vector3<f64>| -> Vec<Option<Vector2<f64>>> {
        views
            .iter()
            .map(|v| {
                let p_c = v.cam_pose.inverse().transform_point(p);
                cam.project(&p_c, apply_distortion)
                    .ok()
                    .map(|proj| v.pixel - proj)
            })
            .collect()
    };
    let cost = |p: &Vector3<f64>| -> f64 {
        let mut c = 0.0;
        for r in residuals(p).into_iter().flatten() {
            c += r.norm_squared() * inv_sigma2;
        }
        if let Some(pr) = prior {
            let d = p - pr.mean;
            c += (d.transpose() * prior_info * d)[0];
        }
        c
    };

    let mut x = initial;
    let mut current = cost(&x);
    let mut lambda_out = prior_info;
    for _ in 0..10 {
        const EPS: f64 = 1e-6;
        let base = residuals(&x);
        let mut lambda = prior_info;
        let mut y = match prior {
            Some(pr) => -(prior_info * (x - pr.mean)),
            None => Vector3::zeros(),
        };
        for (k, r0) in base.iter().enumerate() {
            let Some(r0) = r0 else { continue };
            let mut j = nalgebra::Matrix2x3::zeros();
            let mut ok = true;
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += EPS;
                xm[c] -= EPS;
                let rp = residuals(&xp)[k];
                let rm = residuals(&xm)[k];
                match (rp, rm) {
                    (Some(rp), Some(rm)) => j.set_column(c, &((rp - rm) / (2.0 * EPS))),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            lambda += j.transpose() * j * inv_sigma2;
            y -= j.transpose() * r0 * inv_sigma2;
        }
        lambda_out = lambda;
        let Some(chol) = lambda.cholesky() else { break };
        let delta = chol.solve(&y);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=5 {
            let cand = x + delta * alpha;
            let c = cost(&cand);
            if c <= current + 1e-15 {
                x = cand;
                current = c;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || (delta * alpha).norm() < 1e-9 {
            break;
        }
    }
    Ok((x, lambda_out))
}

/// Point counterpart of [`accumulate_information`]: folds dropped point
/// observations into a world-frame Gaussian prior.
pub fn accumulate_point_information(
    estimate: Vector3<f64>,
    old_prior: Option<&PointPrior>,
    dropped_views: &[PointView],
    cam: &CameraModel,
    apply_distortion: bool,
    sigma_px: f64,
) -> Option<PointPrior> {
    if dropped_views.is_empty() {
        return old_prior.copied();
    }
    let (mean, lambda) = refine_point(
        estimate,
        dropped_views,
        old_prior,
        cam,
        apply_distortion,
        sigma_px,
    )
    .ok()?;
    let cov = lambda.try_inverse()?;
    if !(cov[(0, 0)].is_finite() && cov[(1, 1)].is_finite() && cov[(2, 2)].is_finite()) {
        return old_prior.copied();
    }
    Some(PointPrior { mean, cov })
}

/// Two-view midpoint initialization of the anchor-frame inverse depth.
fn linear_init_inverse_depth(views: &[PointView], cam: &CameraModel, distort: bool) -> f64 {
    let a = &views[0];
    let b = views.last().unwrap();
    let ra = (a.cam_pose.rotation * cam.unproject(a.pixel, distort)).normalize();
    let rb = (b.cam_pose.rotation * cam.unproject(b.pixel, distort)).normalize();
    let w = b.cam_pose.translation - a.cam_pose.translation;
    let d = ra.dot(&rb);
    let denom = 1.0 - d * d;
    if denom < 1e-9 {
        return 0.5;
    }
    let ta = (ra.dot(&w) - d * rb.dot(&w)) / denom;
    if ta > 0.05 {
        // Depth along the anchor ray; the anchor normalized point has unit z.
        let z = ta * (cam.unproject(a.pixel, distort).normalize().z);
        (1.0 / z.max(0.05)).min(20.0)
    } else {
        0.5
    }
}
