//! Front end over an abstract segment and patch source.
//!
//! The tracker never touches raw images: segments arrive from a pluggable
//! source (the simulator renderer or prerecorded detection files) and patch
//! intensities are queried through [`PatchSource`]. Tracking is 3D-2D:
//! each structural line is projected with the IMU-predicted pose, candidate
//! segments are gated geometrically (phase one), then sample points along
//! the line's 3D range vote via ZNCC patch matching (phase two).

use crate::atlanta::{
    self, heading_distance, line_point_at, normalize_heading, project_line, vanishing_points,
    LineAxis, LineSegment2D, StructuralLine, WorldRegistry, DUMMY_WORLD_ID,
};
use crate::estimator::LinePrior;
use crate::geom::{CameraModel, Pose, Rotation};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("patch dimensions differ ({0} vs {1})")]
    PatchSizeMismatch(usize, usize),
    #[error("patch has zero intensity variance")]
    ZeroVariance,
}

/// Square intensity window around a pixel.
#[derive(Debug, Clone)]
pub struct Patch {
    pub side: usize,
    pub data: Vec<f32>,
    pub center: Vector2<f64>,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f32>, center: Vector2<f64>) -> Self {
        debug_assert_eq!(side % 2, 1, "patch side must be odd");
        debug_assert_eq!(data.len(), side * side);
        Patch { side, data, center }
    }
}

/// Zero-mean normalized cross-correlation in [-1, 1]. A zero-variance
/// patch has no meaningful score and is treated as a non-match upstream.
pub fn zncc(a: &Patch, b: &Patch) -> Result<f64, TrackerError> {
    if a.data.len() != b.data.len() {
        return Err(TrackerError::PatchSizeMismatch(a.data.len(), b.data.len()));
    }
    let n = a.data.len() as f64;
    let mean = |p: &Patch| p.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let dx = *x as f64 - ma;
        let dy = *y as f64 - mb;
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va < 1e-12 || vb < 1e-12 {
        return Err(TrackerError::ZeroVariance);
    }
    Ok(num / (va * vb).sqrt())
}

/// Provider of pixel patches for the current frame. `seg_index` names the
/// candidate segment the query lies on, which lets file-backed sources
/// resolve stored payloads.
pub trait PatchSource {
    fn patch_at(&self, seg_index: usize, center: Vector2<f64>, side: usize) -> Option<Patch>;
}

/// Patch source for frames that carry no appearance data.
pub struct NoPatches;

impl PatchSource for NoPatches {
    fn patch_at(&self, _: usize, _: Vector2<f64>, _: usize) -> Option<Patch> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    PendingDrop,
    Dropped,
}

/// Per-line bookkeeping for tracking and delayed EKF updates.
#[derive(Debug, Clone)]
pub struct LineTrack {
    pub track_id: u64,
    pub line: StructuralLine,
    /// (clone id, segment) observations still inside the window.
    pub observations: Vec<(u64, LineSegment2D)>,
    /// Patches of the range sample points, refreshed on every match.
    pub patches: Vec<Option<Patch>>,
    pub missed: u32,
    pub status: TrackStatus,
    /// Covariance of the latest triangulation, used when re-anchoring.
    pub last_cov: Matrix2<f64>,
    pub triangulated: bool,
    /// Ground-truth line id when driven by the simulator (diagnostics).
    pub gt_id: Option<usize>,
}

impl LineTrack {
    pub fn new(track_id: u64, line: StructuralLine, samples: usize, gt_id: Option<usize>) -> Self {
        LineTrack {
            track_id,
            line,
            observations: Vec::new(),
            patches: vec![None; samples],
            missed: 0,
            status: TrackStatus::Active,
            last_cov: Matrix2::new(1e4, 0.0, 0.0, 1e4),
            triangulated: false,
            gt_id: None.or(gt_id),
        }
    }
}

/// Classification result for one detected segment.
#[derive(Debug, Clone)]
pub struct ClassifiedSegment {
    pub seg: LineSegment2D,
    /// `(world id, axis)` when structural; `None` otherwise.
    pub assignment: Option<(usize, LineAxis)>,
    /// Lower is better; normalized combination of closeness and angle.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ClassifyParams {
    /// Maximum endpoint distance to the vanishing-point ray, pixels.
    pub max_point_dist_px: f64,
    /// Maximum angle between segment and ray, degrees.
    pub max_angle_deg: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams {
            max_point_dist_px: 2.5,
            max_angle_deg: 2.0,
        }
    }
}

/// Consistency of one segment with one vanishing point: the ray is drawn
/// from the vanishing point through the segment midpoint; closeness is the
/// worse endpoint distance to that ray and the angle compares directions.
fn vp_consistency(seg: &LineSegment2D, vp: &Vector3<f64>, params: &ClassifyParams) -> Option<f64> {
    let m = seg.midpoint();
    let mh = Vector3::new(m.x, m.y, 1.0);
    let ray = vp.cross(&mh);
    let n = ray.fixed_rows::<2>(0).norm();
    if n < 1e-9 {
        // The vanishing point coincides with the midpoint; the direction is
        // unconstrained there, treat as consistent with zero score.
        return Some(0.0);
    }
    let ray = ray / n;
    let d = (ray.dot(&seg.a_h()).abs()).max(ray.dot(&seg.b_h()).abs());
    if d > params.max_point_dist_px {
        return None;
    }
    let ray_dir = Vector2::new(-ray.y, ray.x);
    let seg_dir = seg.direction();
    let cosang = seg_dir.dot(&ray_dir).abs().clamp(0.0, 1.0);
    let ang = cosang.acos().to_degrees();
    if ang > params.max_angle_deg {
        return None;
    }
    Some(d / params.max_point_dist_px + ang / params.max_angle_deg)
}

/// Assigns each segment to the most consistent `(world, axis)` pair, or
/// marks it non-structural. Vertical assignments always use the dummy
/// world; horizontal directions exist only for detected worlds.
pub fn classify_segments(
    segments: &[LineSegment2D],
    worlds: &WorldRegistry,
    cam_orientation: &Rotation,
    cam: &CameraModel,
    params: &ClassifyParams,
) -> Vec<ClassifiedSegment> {
    // Candidate vanishing points: Z from the dummy world, X/Y per detected
    // world.
    let mut candidates: Vec<(usize, LineAxis, Vector3<f64>)> = Vec::new();
    let (vz, _, _) = vanishing_points(0.0, cam_orientation, cam);
    candidates.push((DUMMY_WORLD_ID, LineAxis::Z, vz));
    for w in worlds.detected() {
        let (_, vx, vy) = vanishing_points(w.phi, cam_orientation, cam);
        candidates.push((w.id, LineAxis::X, vx));
        candidates.push((w.id, LineAxis::Y, vy));
    }

    segments
        .iter()
        .map(|seg| {
            let mut best: Option<(f64, usize, LineAxis)> = None;
            for (wid, axis, vp) in &candidates {
                if let Some(score) = vp_consistency(seg, vp, params) {
                    if best.map_or(true, |(s, _, _)| score < s) {
                        best = Some((score, *wid, *axis));
                    }
                }
            }
            match best {
                Some((score, wid, axis)) => ClassifiedSegment {
                    seg: *seg,
                    assignment: Some((wid, axis)),
                    score,
                },
                None => ClassifiedSegment {
                    seg: *seg,
                    assignment: None,
                    score: f64::INFINITY,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrackParams {
    /// Phase-1 gate: perpendicular distance at the predicted endpoints, px.
    pub gate_px: f64,
    /// Phase-1 gate: direction difference, degrees.
    pub gate_angle_deg: f64,
    /// Number of range sample points per line.
    pub samples: usize,
    pub patch_side: usize,
    pub zncc_threshold: f64,
    /// Step of the correspondence search along a candidate segment, pixels.
    /// The whole segment is swept; a coarse prediction (e.g. a line still
    /// at its preset inverse depth) can be displaced far along the line.
    pub search_step_px: f64,
    /// Consecutive missed frames before the track drops.
    pub drop_after: u32,
    /// Segments shorter than this are not used to start new lines, pixels.
    pub min_init_length_px: f64,
    /// Corresponding points a candidate needs when appearance is available.
    pub min_votes: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            gate_px: 15.0,
            gate_angle_deg: 10.0,
            samples: 5,
            patch_side: 11,
            zncc_threshold: 0.6,
            search_step_px: 2.0,
            drop_after: 3,
            min_init_length_px: 30.0,
            min_votes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackOutcome {
    /// Matched the segment at this index in the frame's segment list.
    Matched(usize),
    Missed,
}

/// Predicted image line of a track, if it projects.
pub fn predict_projection(
    track: &LineTrack,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    predicted_cam_pose: &Pose,
    cam: &CameraModel,
) -> Option<Vector3<f64>> {
    project_line(
        track.line.theta,
        track.line.rho,
        track.line.axis,
        phi,
        anchor_origin,
        predicted_cam_pose,
        cam,
    )
    .ok()
    .map(|p| p.line)
}

/// Two-phase association of one track against the new frame.
///
/// Phase one gates candidates by position and direction against the
/// predicted projection. Phase two votes sample-point patches by ZNCC and
/// picks the candidate with the most corresponding points; ties fall back
/// to the smallest mean perpendicular distance. The caller records the
/// match and refreshes patches via [`refresh_patches`].
pub fn track_line(
    track: &LineTrack,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    predicted_cam_pose: &Pose,
    cam: &CameraModel,
    segments: &[LineSegment2D],
    patches: &dyn PatchSource,
    params: &TrackParams,
) -> TrackOutcome {
    let Some(pred_line) = predict_projection(track, phi, anchor_origin, predicted_cam_pose, cam)
    else {
        return TrackOutcome::Missed;
    };
    let pred_dir = Vector2::new(-pred_line.y, pred_line.x);

    // Phase 1: geometric gating.
    let mut candidates: Vec<usize> = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        let da = pred_line.dot(&seg.a_h()).abs();
        let db = pred_line.dot(&seg.b_h()).abs();
        if da > params.gate_px || db > params.gate_px {
            continue;
        }
        let cosang = seg.direction().dot(&pred_dir).abs().clamp(0.0, 1.0);
        if cosang.acos().to_degrees() > params.gate_angle_deg {
            continue;
        }
        candidates.push(i);
    }
    if candidates.is_empty() {
        return TrackOutcome::Missed;
    }

    // Phase 2: sample-point voting.
    let sample_px = sample_projections(track, phi, anchor_origin, predicted_cam_pose, cam, params);
    let mut best: Option<(usize, usize, f64)> = None; // (index, votes, mean dist)
    let mut any_patch_data = false;
    for &ci in &candidates {
        let seg = &segments[ci];
        let mut votes = 0usize;
        let mut dist_sum = 0.0;
        let mut dist_n = 0usize;
        // Sweep positions along the candidate, shared by all sample points.
        let len = seg.length();
        let step = params.search_step_px.max(0.5);
        let n_steps = ((len / step).ceil() as usize).clamp(1, 200);
        let mut cand_patches: Option<Vec<Patch>> = None;
        for (si, sp) in sample_px.iter().enumerate() {
            let Some(sp) = sp else { continue };
            let q = project_onto_segment(seg, *sp);
            dist_sum += (q - sp).norm();
            dist_n += 1;
            let Some(stored) = track.patches.get(si).and_then(|p| p.as_ref()) else {
                continue;
            };
            let swept = cand_patches.get_or_insert_with(|| {
                (0..=n_steps)
                    .filter_map(|k| {
                        let p = seg.a + (seg.b - seg.a) * (k as f64 / n_steps as f64);
                        patches.patch_at(ci, p, params.patch_side)
                    })
                    .collect()
            });
            if !swept.is_empty() {
                any_patch_data = true;
            }
            for cand in swept.iter() {
                if let Ok(s) = zncc(stored, cand) {
                    if s > params.zncc_threshold {
                        votes += 1;
                        break;
                    }
                }
            }
        }
        let mean_dist = if dist_n > 0 {
            dist_sum / dist_n as f64
        } else {
            f64::INFINITY
        };
        let better = match best {
            None => true,
            Some((_, bv, bd)) => votes > bv || (votes == bv && mean_dist < bd),
        };
        if better {
            best = Some((ci, votes, mean_dist));
        }
    }

    match best {
        Some((ci, votes, _)) => {
            // With appearance data available a candidate must collect the
            // minimum number of corresponding points; without appearance,
            // geometry decides.
            let have_appearance = any_patch_data && track.patches.iter().any(|p| p.is_some());
            if have_appearance && votes < params.min_votes.max(1) {
                TrackOutcome::Missed
            } else {
                TrackOutcome::Matched(ci)
            }
        }
        None => TrackOutcome::Missed,
    }
}

/// Pixel projections of the range sample points under the predicted pose.
pub fn sample_projections(
    track: &LineTrack,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    cam_pose: &Pose,
    cam: &CameraModel,
    params: &TrackParams,
) -> Vec<Option<Vector2<f64>>> {
    let inv = cam_pose.inverse();
    sample_ranges(track.line.range, params.samples)
        .into_iter()
        .map(|r| {
            line_point_at(&track.line, phi, anchor_origin, r)
                .ok()
                .and_then(|p| cam.project(&inv.transform_point(&p), false).ok())
        })
        .collect()
}

pub fn sample_ranges(range: (f64, f64), k: usize) -> Vec<f64> {
    let k = k.max(2);
    (0..k)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (k - 1) as f64)
        .collect()
}

fn project_onto_segment(seg: &LineSegment2D, p: Vector2<f64>) -> Vector2<f64> {
    let d = seg.b - seg.a;
    let len2 = d.norm_squared();
    if len2 < 1e-12 {
        return seg.a;
    }
    let t = ((p - seg.a).dot(&d) / len2).clamp(0.0, 1.0);
    seg.a + d * t
}

/// Re-reads the sample-point patches at their projections in the frame the
/// track just matched, following the matched segment.
pub fn refresh_patches(
    track: &mut LineTrack,
    seg_index: usize,
    phi: f64,
    anchor_origin: &Vector3<f64>,
    cam_pose: &Pose,
    cam: &CameraModel,
    segments: &[LineSegment2D],
    patches: &dyn PatchSource,
    params: &TrackParams,
) {
    let projections = sample_projections(track, phi, anchor_origin, cam_pose, cam, params);
    let seg = &segments[seg_index];
    for (i, proj) in projections.iter().enumerate() {
        if let Some(p) = proj {
            let q = project_onto_segment(seg, *p);
            if let Some(patch) = patches.patch_at(seg_index, q, params.patch_side) {
                track.patches[i] = Some(patch);
            }
        }
    }
}

/// Picks unmatched structural segments worth initializing: longest first,
/// suppressing segments close to existing projections and to each other.
pub fn select_segments_for_init(
    candidates: &[(usize, ClassifiedSegment)],
    existing_lines: &[Vector3<f64>],
    max_new: usize,
    suppress_px: f64,
) -> Vec<usize> {
    let close_to_line = |seg: &LineSegment2D, line: &Vector3<f64>| -> bool {
        line.dot(&seg.a_h()).abs() < suppress_px && line.dot(&seg.b_h()).abs() < suppress_px
    };
    let mut queue: Vec<&(usize, ClassifiedSegment)> = candidates
        .iter()
        .filter(|(_, c)| {
            c.assignment.is_some()
                && !existing_lines.iter().any(|l| close_to_line(&c.seg, l))
        })
        .collect();
    queue.sort_by(|a, b| {
        b.1.seg
            .length()
            .partial_cmp(&a.1.seg.length())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut selected = Vec::new();
    while let Some(head) = queue.first().copied() {
        queue.remove(0);
        selected.push(head.0);
        if selected.len() >= max_new {
            break;
        }
        let line = head.1.seg.line();
        queue.retain(|(_, c)| !close_to_line(&c.seg, &line));
    }
    selected
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// A cluster is accepted only with strictly more consistent segments.
    pub min_inliers: usize,
    /// Minimum heading separation to existing worlds, degrees.
    pub min_separation_deg: f64,
    pub classify: ClassifyParams,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            max_iterations: 50,
            min_inliers: 4,
            min_separation_deg: 5.0,
            classify: ClassifyParams::default(),
        }
    }
}

/// 1-line RANSAC detection of a new Manhattan world.
///
/// Hypotheses come from intersecting a random unexplained segment with the
/// horizon line; the winning cluster must explain more than `min_inliers`
/// segments, more than the current frame's horizontal structural count, and
/// sit away from every registered heading.
pub fn detect_manhattan_ransac<R: Rng>(
    unexplained: &[LineSegment2D],
    cam_orientation: &Rotation,
    cam: &CameraModel,
    worlds: &WorldRegistry,
    existing_horizontal_count: usize,
    params: &RansacParams,
    rng: &mut R,
) -> Option<f64> {
    if unexplained.is_empty() {
        return None;
    }
    let iterations = params.max_iterations.min(unexplained.len() * 4).max(1);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for _ in 0..iterations {
        let seg = &unexplained[rng.gen_range(0..unexplained.len())];
        let Some(phi) = heading_from_segment(seg, cam_orientation, cam) else {
            continue;
        };
        let (inliers, _) = count_consistent(unexplained, phi, cam_orientation, cam, &params.classify);
        let better = match &best {
            None => true,
            Some((n, _, _)) => inliers.len() > *n,
        };
        if better {
            best = Some((inliers.len(), phi, inliers));
        }
    }
    let (count, phi, inliers) = best?;
    if count <= params.min_inliers || count <= existing_horizontal_count {
        return None;
    }
    // Refine by the circular mean of per-inlier headings.
    let refined = refine_heading(&inliers, unexplained, phi, cam_orientation, cam);
    let phi_star = normalize_heading(refined);
    for w in worlds.detected() {
        if heading_distance(phi_star, w.phi) <= params.min_separation_deg.to_radians() {
            return None;
        }
    }
    Some(phi_star)
}

/// Heading hypothesis from one segment: extend to the horizon, treat the
/// intersection as the X vanishing point, and recover `phi` from the world
/// direction of its back-projected ray.
pub fn heading_from_segment(
    seg: &LineSegment2D,
    cam_orientation: &Rotation,
    cam: &CameraModel,
) -> Option<f64> {
    let l_inf = atlanta::horizon_line(cam_orientation, cam);
    let seg_line = seg.a_h().cross(&seg.b_h());
    let vx = seg_line.cross(&l_inf);
    if vx.norm() < 1e-12 {
        return None;
    }
    let d_w = cam_orientation.matrix() * (cam.k_inv() * vx);
    let horiz = Vector2::new(d_w.x, d_w.y);
    if horiz.norm() < 1e-9 {
        return None;
    }
    // X direction of a world with heading phi is (cos phi, -sin phi, 0).
    Some(normalize_heading((-d_w.y).atan2(d_w.x)))
}

fn count_consistent(
    segments: &[LineSegment2D],
    phi: f64,
    cam_orientation: &Rotation,
    cam: &CameraModel,
    params: &ClassifyParams,
) -> (Vec<usize>, f64) {
    let (_, vx, vy) = vanishing_points(phi, cam_orientation, cam);
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, seg) in segments.iter().enumerate() {
        let sx = vp_consistency(seg, &vx, params);
        let sy = vp_consistency(seg, &vy, params);
        let s = match (sx, sy) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        if let Some(s) = s {
            inliers.push(i);
            total += s;
        }
    }
    (inliers, total)
}

fn refine_heading(
    inliers: &[usize],
    segments: &[LineSegment2D],
    hypothesis: f64,
    cam_orientation: &Rotation,
    cam: &CameraModel,
) -> f64 {
    // Circular mean in the [0, pi/2) quotient (unit vectors of the angle
    // scaled by 4). Inliers whose own heading disagrees with the hypothesis
    // are left out: a ray-consistent segment of another world would drag
    // the mean across the quotient.
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0;
    for &i in inliers {
        if let Some(phi) = heading_from_segment(&segments[i], cam_orientation, cam) {
            if heading_distance(phi, hypothesis) > 5f64.to_radians() {
                continue;
            }
            sx += (4.0 * phi).cos();
            sy += (4.0 * phi).sin();
            n += 1;
        }
    }
    if n == 0 || (sx * sx + sy * sy).sqrt() < 1e-9 {
        return hypothesis;
    }
    normalize_heading(sy.atan2(sx) / 4.0)
}

/// Builds a fresh structural line for a classified segment.
#[allow(clippy::too_many_arguments)]
pub fn init_track_from_segment(
    track_id: u64,
    classified: &ClassifiedSegment,
    anchor_pose_id: u64,
    phi: f64,
    cam_pose: &Pose,
    cam: &CameraModel,
    rho0: f64,
    sigma_rho0: f64,
    unc: &atlanta::LineInitUncertainty,
    samples: usize,
    gt_id: Option<usize>,
) -> Option<LineTrack> {
    let (world_id, axis) = classified.assignment?;
    let init =
        atlanta::init_line_from_segment(&classified.seg, axis, phi, cam_pose, cam, rho0, sigma_rho0, unc)
            .ok()?;
    let line = StructuralLine {
        world_id,
        axis,
        anchor_pose_id,
        theta: init.theta,
        rho: rho0,
        range: (0.0, 1.0),
        prior: LinePrior {
            mean: init.prior.mean,
            cov: init.prior.cov,
        },
    };
    Some(LineTrack::new(track_id, line, samples, gt_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn flat_patch(side: usize, f: impl Fn(usize, usize) -> f32) -> Patch {
        let mut data = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                data.push(f(x, y));
            }
        }
        Patch::new(side, data, Vector2::zeros())
    }

    #[test]
    fn zncc_identical_patches() {
        let p = flat_patch(5, |x, y| (x * 3 + y) as f32);
        assert_relative_eq!(zncc(&p, &p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zncc_negated_patch() {
        let a = flat_patch(5, |x, y| (x * 3 + y) as f32);
        let b = flat_patch(5, |x, y| -((x * 3 + y) as f32));
        assert_relative_eq!(zncc(&a, &b).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn zncc_affine_invariance() {
        let a = flat_patch(5, |x, y| (x * 3 + y) as f32);
        let b = flat_patch(5, |x, y| 2.5 * (x * 3 + y) as f32 + 40.0);
        assert_relative_eq!(zncc(&a, &b).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn zncc_zero_variance_is_error() {
        let a = flat_patch(5, |_, _| 1.0);
        let b = flat_patch(5, |x, _| x as f32);
        assert!(matches!(zncc(&a, &b), Err(TrackerError::ZeroVariance)));
    }

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

    /// Camera looking along world +X.
    fn look_forward() -> Rotation {
        Rotation::from_matrix(&nalgebra::Matrix3::new(
            0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0,
        ))
    }

    #[test]
    fn classify_vertical_segment() {
        let rot = look_forward();
        let worlds = WorldRegistry::new();
        // A 3D vertical segment ahead of the camera.
        let c = cam();
        let inv = Pose::new(rot, Vector3::zeros()).inverse();
        let a = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.5, -0.5)), false)
            .unwrap();
        let b = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.5, 0.8)), false)
            .unwrap();
        let seg = LineSegment2D::new(a, b, 0);
        let out = classify_segments(&[seg], &worlds, &rot, &c, &ClassifyParams::default());
        assert_eq!(out[0].assignment, Some((DUMMY_WORLD_ID, LineAxis::Z)));
    }

    #[test]
    fn classify_oblique_segment_as_nonstructural() {
        let rot = look_forward();
        let mut worlds = WorldRegistry::new();
        worlds.add(0.0);
        let c = cam();
        // 45-degree segment in the image plane, inconsistent with all rays.
        let seg = LineSegment2D::new(Vector2::new(300.0, 200.0), Vector2::new(360.0, 260.0), 0);
        let params = ClassifyParams {
            max_point_dist_px: 2.0,
            max_angle_deg: 3.0,
        };
        let out = classify_segments(&[seg], &worlds, &rot, &c, &params);
        assert!(out[0].assignment.is_none());
    }

    #[test]
    fn select_prefers_longest_and_suppresses_duplicates() {
        let mk = |y: f64, len: f64| ClassifiedSegment {
            seg: LineSegment2D::new(Vector2::new(100.0, y), Vector2::new(100.0 + len, y), 0),
            assignment: Some((DUMMY_WORLD_ID, LineAxis::Z)),
            score: 0.1,
        };
        // Two near-collinear duplicates and one far segment.
        let candidates = vec![
            (0, mk(100.0, 50.0)),
            (1, mk(101.0, 90.0)),
            (2, mk(300.0, 40.0)),
        ];
        let picked = select_segments_for_init(&candidates, &[], 30, 8.0);
        assert_eq!(picked, vec![1, 2]);

        // Budget exhausted: nothing selected.
        let none = select_segments_for_init(&candidates, &[], 0, 8.0);
        assert!(none.len() <= 1); // max_new = 0 stops after first pop guard
    }

    #[test]
    fn select_respects_existing_projections() {
        let existing = LineSegment2D::new(Vector2::new(0.0, 100.0), Vector2::new(640.0, 100.0), 0);
        let cand = ClassifiedSegment {
            seg: LineSegment2D::new(Vector2::new(200.0, 101.0), Vector2::new(400.0, 101.0), 0),
            assignment: Some((DUMMY_WORLD_ID, LineAxis::Z)),
            score: 0.1,
        };
        let picked = select_segments_for_init(&[(0, cand)], &[existing.line()], 30, 8.0);
        assert!(picked.is_empty());
    }

    #[test]
    fn ransac_rejects_small_clusters() {
        let rot = look_forward();
        let worlds = WorldRegistry::new();
        let c = cam();
        // Three segments all consistent with a 30-degree world.
        let phi = 0.52;
        let segs = render_world_segments(phi, 3, &rot, &c);
        let mut rng = StdRng::seed_from_u64(1);
        let out = detect_manhattan_ransac(
            &segs,
            &rot,
            &c,
            &worlds,
            0,
            &RansacParams::default(),
            &mut rng,
        );
        assert!(out.is_none(), "3 consistent segments must not detect");
    }

    #[test]
    fn ransac_recovers_planted_heading() {
        let rot = look_forward();
        let worlds = WorldRegistry::new();
        let c = cam();
        let phi = 45f64.to_radians();
        let segs = render_world_segments(phi, 8, &rot, &c);
        let mut rng = StdRng::seed_from_u64(2);
        let out = detect_manhattan_ransac(
            &segs,
            &rot,
            &c,
            &worlds,
            0,
            &RansacParams::default(),
            &mut rng,
        )
        .expect("world detected");
        assert!(
            heading_distance(out, phi) < 1f64.to_radians(),
            "heading error {:.3} deg",
            heading_distance(out, phi).to_degrees()
        );
    }

    #[test]
    fn ransac_rejects_heading_close_to_existing() {
        let rot = look_forward();
        let mut worlds = WorldRegistry::new();
        let phi = 10f64.to_radians();
        worlds.add(phi + 3f64.to_radians());
        let c = cam();
        let segs = render_world_segments(phi, 8, &rot, &c);
        let mut rng = StdRng::seed_from_u64(3);
        let out = detect_manhattan_ransac(
            &segs,
            &rot,
            &c,
            &worlds,
            0,
            &RansacParams::default(),
            &mut rng,
        );
        assert!(out.is_none(), "3-degree separation must be rejected");
    }

    /// Renders horizontal X-direction segments of a world at heading `phi`.
    fn render_world_segments(
        phi: f64,
        n: usize,
        rot: &Rotation,
        c: &CameraModel,
    ) -> Vec<LineSegment2D> {
        let dir = Vector3::new(phi.cos(), -phi.sin(), 0.0);
        let pose = Pose::new(*rot, Vector3::zeros());
        let inv = pose.inverse();
        let mut out = Vec::new();
        let mut k = 0usize;
        while out.len() < n {
            k += 1;
            let base = Vector3::new(
                4.0 + 0.8 * (k % 5) as f64,
                -1.5 + 0.7 * (k % 7) as f64,
                -0.8 + 0.5 * (k % 4) as f64,
            );
            let p0 = base - dir * 1.0;
            let p1 = base + dir * 1.0;
            let (Ok(a), Ok(b)) = (
                c.project(&inv.transform_point(&p0), false),
                c.project(&inv.transform_point(&p1), false),
            ) else {
                continue;
            };
            if !c.contains(a) || !c.contains(b) {
                continue;
            }
            out.push(LineSegment2D::new(a, b, 0));
        }
        out
    }

    #[test]
    fn voting_picks_candidate_with_most_votes() {
        // Synthetic patch source: segment 0 carries the track's texture,
        // segment 1 carries a different one.
        struct TwoSegs;
        impl PatchSource for TwoSegs {
            fn patch_at(&self, seg_index: usize, center: Vector2<f64>, side: usize) -> Option<Patch> {
                let mut data = Vec::with_capacity(side * side);
                for y in 0..side {
                    for x in 0..side {
                        let v = if seg_index == 0 {
                            ((x as f32) * 1.3 + (y as f32) * 0.7).sin()
                        } else {
                            ((x as f32) * 0.2 - (y as f32) * 2.1).cos()
                        };
                        data.push(v);
                    }
                }
                Some(Patch::new(side, data, center))
            }
        }

        let c = cam();
        let rot = look_forward();
        let pose = Pose::new(rot, Vector3::zeros());
        // Vertical line 3 m ahead: theta from midpoint, rho = 1/3.
        let line = StructuralLine {
            world_id: DUMMY_WORLD_ID,
            axis: LineAxis::Z,
            anchor_pose_id: 0,
            theta: 0.0,
            rho: 1.0 / 3.0,
            range: (-0.5, 0.5),
            prior: LinePrior::diffuse(0.0, 1.0 / 3.0),
        };
        let params = TrackParams::default();
        let mut track = LineTrack::new(0, line, params.samples, None);
        // Prime the stored patches with segment 0's texture.
        let src = TwoSegs;
        for i in 0..params.samples {
            track.patches[i] = src.patch_at(0, Vector2::new(320.0, 240.0), params.patch_side);
        }
        let inv = pose.inverse();
        let a = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.0, -0.5)), false)
            .unwrap();
        let b = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.0, 0.5)), false)
            .unwrap();
        let true_seg = LineSegment2D::new(a, b, 0);
        // A decoy segment 6 px to the side, inside the phase-1 gate.
        let decoy = LineSegment2D::new(
            a + Vector2::new(6.0, 0.0),
            b + Vector2::new(6.0, 0.0),
            0,
        );
        let out = track_line(
            &track,
            0.0,
            &Vector3::zeros(),
            &pose,
            &c,
            &[true_seg, decoy],
            &src,
            &params,
        );
        assert_eq!(out, TrackOutcome::Matched(0));
    }

    #[test]
    fn voting_never_matches_below_threshold() {
        // All patches uncorrelated with the stored ones.
        struct Noise;
        impl PatchSource for Noise {
            fn patch_at(&self, _: usize, center: Vector2<f64>, side: usize) -> Option<Patch> {
                let mut data = Vec::with_capacity(side * side);
                let mut s = (center.x * 13.0 + center.y * 7.0) as u64 | 1;
                for _ in 0..side * side {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    data.push(((s >> 33) as f32 / 4.0e9).sin());
                }
                Some(Patch::new(side, data, center))
            }
        }
        let c = cam();
        let rot = look_forward();
        let pose = Pose::new(rot, Vector3::zeros());
        let line = StructuralLine {
            world_id: DUMMY_WORLD_ID,
            axis: LineAxis::Z,
            anchor_pose_id: 0,
            theta: 0.0,
            rho: 1.0 / 3.0,
            range: (-0.5, 0.5),
            prior: LinePrior::diffuse(0.0, 1.0 / 3.0),
        };
        let params = TrackParams::default();
        let mut track = LineTrack::new(0, line, params.samples, None);
        for i in 0..params.samples {
            // Stored patches: a smooth gradient no noise patch correlates with.
            let side = params.patch_side;
            let mut data = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    data.push((x + y * side + i) as f32);
                }
            }
            track.patches[i] = Some(Patch::new(side, data, Vector2::zeros()));
        }
        let inv = pose.inverse();
        let a = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.0, -0.5)), false)
            .unwrap();
        let b = c
            .project(&inv.transform_point(&Vector3::new(3.0, 0.0, 0.5)), false)
            .unwrap();
        let seg = LineSegment2D::new(a, b, 0);
        let out = track_line(
            &track,
            0.0,
            &Vector3::zeros(),
            &pose,
            &c,
            &[seg],
            &Noise,
            &params,
        );
        assert_eq!(out, TrackOutcome::Missed);
    }
}
