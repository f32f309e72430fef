//! Per-frame orchestration of the full system.
//!
//! Each camera frame runs: IMU propagation, window flushing when the clone
//! budget is hit, pose cloning, segment classification and two-phase line
//! tracking, Manhattan-world detection and merging, prior-regularized
//! re-triangulation, the gated EKF update for finished tracks, two-phase
//! outlier rejection, and initialization of fresh features.

mod config;

pub use config::{
    EvalParams, FeatureBudgets, FilterParams, InitParams, RunConfig, StructuralMode,
    StructureParams, TrackingParams,
};

use crate::atlanta::{
    self, heading_distance, LineSegment2D, StructuralLine, DUMMY_WORLD_ID,
};
use crate::dataset::{Dataset, FilePatchSource, FrameData};
use crate::estimator::{
    self, accumulate_information, accumulate_point_information, refine_point, triangulate_line,
    triangulate_point, LineView, PointPrior, PointView,
};
use crate::eval::Trajectory;
use crate::filter::{
    build_line_measurement, build_point_measurement, gated_update, propagate,
    select_poses_for_removal, FilterState, ImuState, LineMeasurementInput, MeasurementBlock,
    PointMeasurementInput,
};
use crate::geom::{ImuSample, Pose, Rotation};
use crate::sim::{SimPatchSource, SimulatedRun};
use crate::tracker::{
    self, classify_segments, detect_manhattan_ransac, select_segments_for_init, track_line,
    ClassifiedSegment, LineTrack, NoPatches, PatchSource, TrackOutcome, TrackStatus,
};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("filter diverged at t = {t:.3}s (|p| = {norm:.3e})")]
    Diverged { t: f64, norm: f64 },
    #[error("frame at t = {0:.3}s carries an image path; an external detector is required")]
    NeedsDetector(f64),
    #[error("IMU stream too short to initialize the filter")]
    InitFailed,
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One camera frame handed to the pipeline, front end already applied.
pub struct FrameInput {
    pub t: f64,
    pub t_ns: u64,
    pub segments: Vec<LineSegment2D>,
    /// Ground-truth line ids parallel to `segments` (diagnostics only).
    pub seg_gt_ids: Vec<Option<usize>>,
    /// Point observations with stable front-end track ids.
    pub points: Vec<(u64, Vector2<f64>)>,
    pub patches: Box<dyn PatchSource>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameDiagnostics {
    pub t: f64,
    pub active_lines: usize,
    pub active_points: usize,
    pub headings: Vec<(usize, f64)>,
    pub blocks_built: usize,
    pub blocks_rejected: usize,
    pub state_dim: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<FrameDiagnostics>,
    /// Detected world headings at the end of the run, radians.
    pub final_headings: Vec<f64>,
    pub updates_applied: usize,
}

struct PointTrack {
    observations: Vec<(u64, Vector2<f64>)>,
    seen_this_frame: bool,
    prior: Option<PointPrior>,
}

/// Sentinel world id for point+line-mode segments that will get their own
/// frozen heading at initialization time.
const PENDING_WORLD: usize = usize::MAX;

pub struct Vio {
    pub config: RunConfig,
    pub state: FilterState,
    line_tracks: Vec<LineTrack>,
    point_tracks: BTreeMap<u64, PointTrack>,
    next_line_id: u64,
    rng: ChaCha12Rng,
    initialized: bool,
    last_prop_t: f64,
    trajectory: Vec<(f64, Pose)>,
    diagnostics: Vec<FrameDiagnostics>,
    updates_applied: usize,
}

impl Vio {
    pub fn new(config: RunConfig, seed: u64) -> Self {
        let ext = config.extrinsics_pose();
        Vio {
            state: FilterState::new(ImuState::at_rest(), ext),
            config,
            line_tracks: Vec::new(),
            point_tracks: BTreeMap::new(),
            next_line_id: 0,
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0xa71a_27a5),
            initialized: false,
            last_prop_t: 0.0,
            trajectory: Vec::new(),
            diagnostics: Vec::new(),
            updates_applied: 0,
        }
    }

    /// Initializes roll/pitch from the mean specific force over the first
    /// window; position, yaw and velocity define the world gauge.
    fn initialize(&mut self, imu: &[ImuSample]) -> bool {
        let t0 = match imu.first() {
            Some(s) => s.t,
            None => return false,
        };
        let window: Vec<&ImuSample> = imu
            .iter()
            .take_while(|s| s.t <= t0 + self.config.init.accel_window_s)
            .collect();
        if window.len() < 2 {
            return false;
        }
        let mean: Vector3<f64> = window.iter().map(|s| s.accel).sum::<Vector3<f64>>()
            / window.len() as f64;
        let rot = nalgebra::UnitQuaternion::rotation_between(&mean, &Vector3::z())
            .unwrap_or_else(|| {
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::x() * std::f64::consts::PI)
            });
        self.state.imu.pose = Pose::new(Rotation::from_unit_quaternion(rot), Vector3::zeros());
        self.state.imu.velocity = Vector3::zeros();

        let init = &self.config.init;
        let p = &mut self.state.cov;
        let rp = init.sigma_roll_pitch_deg.to_radians().powi(2);
        p[(0, 0)] = rp;
        p[(1, 1)] = rp;
        p[(2, 2)] = 0.0; // yaw is the gauge
        for i in 6..9 {
            p[(i, i)] = init.sigma_velocity.powi(2);
        }
        for i in 9..12 {
            p[(i, i)] = init.sigma_gyro_bias.powi(2);
        }
        for i in 12..15 {
            p[(i, i)] = init.sigma_accel_bias.powi(2);
        }
        let er = init.sigma_extrinsics_rot_deg.to_radians().powi(2);
        for i in 15..18 {
            p[(i, i)] = er;
        }
        for i in 18..21 {
            p[(i, i)] = init.sigma_extrinsics_trans.powi(2);
        }
        self.last_prop_t = window.last().unwrap().t;
        self.initialized = true;
        true
    }

    /// Interpolated IMU span covering `(last_prop_t, t]`.
    fn imu_span(&self, imu: &[ImuSample], t: f64) -> Vec<ImuSample> {
        let from = self.last_prop_t;
        if t <= from {
            return Vec::new();
        }
        let mut span = Vec::new();
        let lerp = |a: &ImuSample, b: &ImuSample, tt: f64| -> ImuSample {
            let w = (tt - a.t) / (b.t - a.t);
            ImuSample {
                t: tt,
                gyro: a.gyro * (1.0 - w) + b.gyro * w,
                accel: a.accel * (1.0 - w) + b.accel * w,
            }
        };
        for (i, s) in imu.iter().enumerate() {
            if s.t <= from {
                continue;
            }
            if span.is_empty() {
                if i > 0 && imu[i - 1].t < s.t {
                    span.push(lerp(&imu[i - 1], s, from));
                } else {
                    span.push(ImuSample { t: from, ..*s });
                }
            }
            if s.t >= t {
                let prev = *span.last().unwrap();
                if s.t > t && prev.t < t {
                    span.push(lerp(&prev, s, t));
                } else if (s.t - t).abs() < 1e-12 {
                    span.push(*s);
                }
                break;
            }
            span.push(*s);
        }
        span
    }

    fn camera_rotation(&self) -> Rotation {
        self.state.current_camera_pose().rotation
    }

    fn anchor_origin(&self, track: &LineTrack) -> Option<Vector3<f64>> {
        self.state.camera_position(track.line.anchor_pose_id)
    }

    fn line_views(&self, track: &LineTrack) -> Vec<LineView> {
        track
            .observations
            .iter()
            .filter_map(|(cid, seg)| {
                self.state
                    .camera_pose(*cid)
                    .map(|cam_pose| LineView { cam_pose, seg: *seg })
            })
            .collect()
    }

    fn point_views(&self, obs: &[(u64, Vector2<f64>)]) -> Vec<PointView> {
        obs.iter()
            .filter_map(|(cid, px)| {
                self.state
                    .camera_pose(*cid)
                    .map(|cam_pose| PointView {
                        cam_pose,
                        pixel: *px,
                    })
            })
            .collect()
    }

    fn point_estimate(&self, track: &PointTrack) -> Option<Vector3<f64>> {
        let views = self.point_views(&track.observations);
        let cam = &self.config.camera;
        let distort = cam.omega != 0.0;
        let tri = if views.len() >= 2 {
            triangulate_point(&views, cam, distort, self.config.features.min_parallax_deg).ok()
        } else {
            None
        };
        match (tri, &track.prior) {
            (Some(p), Some(prior)) => refine_point(
                p,
                &views,
                Some(prior),
                cam,
                distort,
                self.config.filter.sigma_im_point,
            )
            .ok()
            .map(|(x, _)| x),
            (Some(p), None) => Some(p),
            (None, Some(prior)) if views.len() >= 2 => refine_point(
                prior.mean,
                &views,
                Some(prior),
                cam,
                distort,
                self.config.filter.sigma_im_point,
            )
            .ok()
            .map(|(x, _)| x),
            _ => None,
        }
    }

    /// Re-triangulates every line track against its in-window views.
    fn retriangulate_lines(&mut self) {
        let cam = self.config.camera;
        let sigma = self.config.filter.sigma_im_line;
        let mut updates: Vec<(usize, Vector2<f64>, Option<Matrix2<f64>>, bool)> = Vec::new();
        for (i, track) in self.line_tracks.iter().enumerate() {
            let Some(anchor) = self.anchor_origin(track) else {
                continue;
            };
            let phi = self.state.worlds.phi(track.line.world_id);
            let views = self.line_views(track);
            let Ok((l, report)) = triangulate_line(
                &track.line,
                &track.line.prior,
                &views,
                phi,
                anchor,
                &cam,
                sigma,
            ) else {
                continue;
            };
            let cov = report.normal_equation.lambda.try_inverse();
            updates.push((i, l, cov, !views.is_empty()));
        }
        for (i, l, cov, has_views) in updates {
            let track = &mut self.line_tracks[i];
            track.line.set_params(l);
            if let Some(c) = cov {
                track.last_cov = c;
            }
            if has_views {
                track.triangulated = true;
            }
        }
        // Range maintenance from the most recent observation.
        let mut ranges: Vec<(usize, (f64, f64))> = Vec::new();
        for (i, track) in self.line_tracks.iter().enumerate() {
            let Some((cid, seg)) = track.observations.last() else {
                continue;
            };
            let (Some(anchor), Some(pose)) =
                (self.anchor_origin(track), self.state.camera_pose(*cid))
            else {
                continue;
            };
            let phi = self.state.worlds.phi(track.line.world_id);
            if let Ok(r) =
                estimator::update_range(&track.line, phi, &anchor, seg, &pose, &cam)
            {
                if r.1 - r.0 > 1e-6 {
                    ranges.push((i, r));
                }
            }
        }
        for (i, r) in ranges {
            self.line_tracks[i].line.range = r;
        }
    }

    /// Discards lines whose post-update reprojection error exceeds the gate.
    fn reprojection_reject(&mut self) {
        let cam = self.config.camera;
        let thresh = self.config.structure.reprojection_threshold_px;
        let mut keep = vec![true; self.line_tracks.len()];
        for (i, track) in self.line_tracks.iter().enumerate() {
            if !track.triangulated || track.observations.len() < 2 {
                continue;
            }
            let Some(anchor) = self.anchor_origin(track) else {
                keep[i] = false;
                continue;
            };
            let phi = self.state.worlds.phi(track.line.world_id);
            let views = self.line_views(track);
            keep[i] = estimator::reprojection_outlier_check(
                &track.line,
                &views,
                phi,
                anchor,
                &cam,
                thresh,
            );
        }
        let mut it = keep.iter();
        self.line_tracks.retain(|_| *it.next().unwrap());
        self.cleanup_frozen_worlds();
    }

    fn cleanup_frozen_worlds(&mut self) {
        let used: HashSet<usize> = self.line_tracks.iter().map(|t| t.line.world_id).collect();
        let frozen: Vec<usize> = self
            .state
            .worlds
            .iter()
            .filter(|w| !w.in_state && w.id != DUMMY_WORLD_ID && !used.contains(&w.id))
            .map(|w| w.id)
            .collect();
        for id in frozen {
            self.state.worlds.remove(id);
        }
    }

    fn build_line_block(
        &self,
        track: &LineTrack,
        obs: &[(u64, LineSegment2D)],
    ) -> Option<MeasurementBlock> {
        if obs.len() < 2 || !track.triangulated {
            return None;
        }
        // A track whose triangulation cannot explain its own observations
        // (mixed associations, wrong axis) must not update the state.
        let views: Vec<LineView> = obs
            .iter()
            .filter_map(|(cid, seg)| {
                self.state
                    .camera_pose(*cid)
                    .map(|cam_pose| LineView { cam_pose, seg: *seg })
            })
            .collect();
        let anchor = self.anchor_origin(track)?;
        let phi = self.state.worlds.phi(track.line.world_id);
        if !estimator::reprojection_outlier_check(
            &track.line,
            &views,
            phi,
            anchor,
            &self.config.camera,
            self.config.structure.reprojection_threshold_px,
        ) {
            return None;
        }
        build_line_measurement(
            &self.state,
            &LineMeasurementInput {
                line: &track.line,
                observations: obs,
                cam: &self.config.camera,
                sigma: self.config.filter.sigma_im_line,
            },
        )
        .ok()
    }

    fn build_point_block(
        &self,
        track: &PointTrack,
        obs: &[(u64, Vector2<f64>)],
    ) -> Option<MeasurementBlock> {
        if obs.len() < 2 {
            return None;
        }
        let point_world = self.point_estimate(track)?;
        // Same sanity gate as for lines: the triangulated point must
        // explain the observations it is about to consume.
        let distort = self.config.camera.omega != 0.0;
        for (cid, px) in obs {
            let Some(pose) = self.state.camera_pose(*cid) else {
                return None;
            };
            let p_c = pose.inverse().transform_point(&point_world);
            let Ok(proj) = self.config.camera.project(&p_c, distort) else {
                return None;
            };
            if (proj - px).norm() > self.config.structure.reprojection_threshold_px {
                return None;
            }
        }
        build_point_measurement(
            &self.state,
            &PointMeasurementInput {
                point_world,
                observations: obs,
                cam: &self.config.camera,
                apply_distortion: self.config.camera.omega != 0.0,
                sigma: self.config.filter.sigma_im_point,
            },
        )
        .ok()
    }

    /// Window-full trigger: flush features through measurement blocks built
    /// from the poses about to be removed, fold the dropped observations
    /// into feature priors, re-anchor lines and excise the poses.
    fn flush_window(&mut self, diag: &mut FrameDiagnostics) {
        let remove_ids = select_poses_for_removal(&self.state);
        let remove_set: HashSet<u64> = remove_ids.iter().copied().collect();

        let mut blocks = Vec::new();
        for track in &self.line_tracks {
            if track.status == TrackStatus::Dropped {
                continue;
            }
            let rm_obs: Vec<(u64, LineSegment2D)> = track
                .observations
                .iter()
                .filter(|(cid, _)| remove_set.contains(cid))
                .cloned()
                .collect();
            if let Some(b) = self.build_line_block(track, &rm_obs) {
                blocks.push(b);
            }
        }
        for track in self.point_tracks.values() {
            let rm_obs: Vec<(u64, Vector2<f64>)> = track
                .observations
                .iter()
                .filter(|(cid, _)| remove_set.contains(cid))
                .cloned()
                .collect();
            if let Some(b) = self.build_point_block(track, &rm_obs) {
                blocks.push(b);
            }
        }
        self.apply_update(blocks, diag);

        // Fold dropped measurements into priors while the poses still hold
        // their freshly updated estimates.
        let cam = self.config.camera;
        if self.config.structure.enable_accumulation {
            let sigma_l = self.config.filter.sigma_im_line;
            let mut prior_updates: Vec<(usize, crate::estimator::LinePrior)> = Vec::new();
            for (i, track) in self.line_tracks.iter().enumerate() {
                if !track.triangulated {
                    continue;
                }
                let dropped: Vec<LineView> = track
                    .observations
                    .iter()
                    .filter(|(cid, _)| remove_set.contains(cid))
                    .filter_map(|(cid, seg)| {
                        self.state
                            .camera_pose(*cid)
                            .map(|cam_pose| LineView { cam_pose, seg: *seg })
                    })
                    .collect();
                if dropped.is_empty() {
                    continue;
                }
                let Some(anchor) = self.anchor_origin(track) else {
                    continue;
                };
                let phi = self.state.worlds.phi(track.line.world_id);
                if let Ok(out) = accumulate_information(
                    &track.line,
                    &track.line.prior,
                    &dropped,
                    phi,
                    anchor,
                    &cam,
                    sigma_l,
                ) {
                    if out.updated {
                        prior_updates.push((i, out.prior));
                    }
                }
            }
            for (i, prior) in prior_updates {
                self.line_tracks[i].line.prior = prior;
            }

            let sigma_p = self.config.filter.sigma_im_point;
            let distort = cam.omega != 0.0;
            let keys: Vec<u64> = self.point_tracks.keys().copied().collect();
            for key in keys {
                let track = &self.point_tracks[&key];
                let dropped: Vec<PointView> = track
                    .observations
                    .iter()
                    .filter(|(cid, _)| remove_set.contains(cid))
                    .filter_map(|(cid, px)| {
                        self.state.camera_pose(*cid).map(|cam_pose| PointView {
                            cam_pose,
                            pixel: *px,
                        })
                    })
                    .collect();
                if dropped.is_empty() {
                    continue;
                }
                let Some(est) = self.point_estimate(track) else {
                    continue;
                };
                let new_prior = accumulate_point_information(
                    est,
                    track.prior.as_ref(),
                    &dropped,
                    &cam,
                    distort,
                    sigma_p,
                );
                if let Some(p) = new_prior {
                    self.point_tracks.get_mut(&key).unwrap().prior = Some(p);
                }
            }
        }

        // Strip the consumed observations.
        for track in &mut self.line_tracks {
            track.observations.retain(|(cid, _)| !remove_set.contains(cid));
        }
        for track in self.point_tracks.values_mut() {
            track.observations.retain(|(cid, _)| !remove_set.contains(cid));
        }

        // Re-anchor lines whose starting frame is about to disappear.
        enum Reanchor {
            Keep(StructuralLine, Matrix2<f64>),
            Drop,
        }
        let mut plans: Vec<(usize, Reanchor)> = Vec::new();
        for (i, track) in self.line_tracks.iter().enumerate() {
            if !remove_set.contains(&track.line.anchor_pose_id) {
                continue;
            }
            let new_anchor_id = track
                .observations
                .iter()
                .map(|(cid, _)| *cid)
                .find(|cid| !remove_set.contains(cid))
                .or_else(|| {
                    self.state
                        .clones
                        .iter()
                        .map(|c| c.id)
                        .find(|cid| !remove_set.contains(cid))
                });
            let plan = new_anchor_id
                .and_then(|new_id| {
                    let old_anchor = self.state.camera_position(track.line.anchor_pose_id)?;
                    let new_anchor = self.state.camera_position(new_id)?;
                    let phi = self.state.worlds.phi(track.line.world_id);
                    atlanta::reanchor_line(&track.line, &track.last_cov, phi, &old_anchor, &new_anchor)
                        .ok()
                        .map(|(mut line, cov)| {
                            line.anchor_pose_id = new_id;
                            Reanchor::Keep(line, cov)
                        })
                })
                .unwrap_or(Reanchor::Drop);
            plans.push((i, plan));
        }
        let mut dead: Vec<usize> = Vec::new();
        for (i, plan) in plans {
            match plan {
                Reanchor::Keep(line, cov) => {
                    self.line_tracks[i].line = line;
                    self.line_tracks[i].last_cov = cov;
                }
                Reanchor::Drop => dead.push(i),
            }
        }
        for i in dead.into_iter().rev() {
            self.line_tracks.remove(i);
        }

        self.state.remove_clones(&remove_ids);
        self.cleanup_frozen_worlds();
    }

    fn apply_update(&mut self, blocks: Vec<MeasurementBlock>, diag: &mut FrameDiagnostics) {
        if blocks.is_empty() {
            return;
        }
        diag.blocks_built += blocks.len();
        let before = self.state.imu.pose.translation;
        let out = gated_update(&mut self.state, &blocks, self.config.filter.chi2_confidence);
        if std::env::var("VIO_TRACE").is_ok() {
            let moved = (self.state.imu.pose.translation - before).norm();
            if moved > 5e-4 {
                for (b, acc) in blocks.iter().zip(&out.accepted) {
                    if !acc {
                        continue;
                    }
                    // Apply each block alone to a copy to see its pull.
                    let mut s = self.state.clone();
                    let p0 = s.imu.pose.translation;
                    gated_update(&mut s, std::slice::from_ref(b), 0.9999);
                    eprintln!(
                        "  block rows={:2} |z|={:.4} -> alone moves {:.6}",
                        b.residual.len(),
                        b.residual.norm(),
                        (s.imu.pose.translation - p0).norm()
                    );
                }
                eprintln!("  -> state moved {moved:.5} m at t={:.2}", diag.t);
            }
        }
        diag.blocks_rejected += out.accepted.iter().filter(|a| !**a).count();
        if out.applied_rows > 0 {
            self.updates_applied += 1;
        }
    }

    /// Classifies this frame's segments according to the structural mode.
    fn classify(&self, segments: &[LineSegment2D]) -> Vec<ClassifiedSegment> {
        match self.config.structure.mode {
            StructuralMode::PointOnly => Vec::new(),
            StructuralMode::StructVio => {
                let mut out = classify_segments(
                    segments,
                    &self.state.worlds,
                    &self.camera_rotation(),
                    &self.config.camera,
                    &self.config.tracking.classify,
                );
                // Horizontal assignments must also agree in heading space
                // with their world; segments of a yet-undetected world can
                // pass the image-space ray tests in unlucky geometries.
                // Downgrading them here keeps them in the RANSAC pool.
                let bound = self.config.structure.max_init_heading_dev_deg.to_radians();
                for c in &mut out {
                    if let Some((wid, axis)) = c.assignment {
                        if axis != atlanta::LineAxis::Z {
                            let dev = tracker::heading_from_segment(
                                &c.seg,
                                &self.camera_rotation(),
                                &self.config.camera,
                            )
                            .map(|h| heading_distance(h, self.state.worlds.phi(wid)));
                            if dev.map_or(true, |d| d > bound) {
                                c.assignment = None;
                                c.score = f64::INFINITY;
                            }
                        }
                    }
                }
                out
            }
            StructuralMode::PointLine => {
                // Vertical lines classify as usual; everything else becomes
                // a candidate with its own fixed heading, assigned lazily.
                let vertical_only = crate::atlanta::WorldRegistry::new();
                let mut out = classify_segments(
                    segments,
                    &vertical_only,
                    &self.camera_rotation(),
                    &self.config.camera,
                    &self.config.tracking.classify,
                );
                for c in &mut out {
                    if c.assignment.is_none()
                        && tracker::heading_from_segment(
                            &c.seg,
                            &self.camera_rotation(),
                            &self.config.camera,
                        )
                        .is_some()
                    {
                        c.assignment = Some((PENDING_WORLD, atlanta::LineAxis::X));
                        c.score = 1.0;
                    }
                }
                out
            }
        }
    }

    /// Read access to the live line tracks (integration tests and tools).
    pub fn line_tracks(&self) -> &[LineTrack] {
        &self.line_tracks
    }

    pub fn process_frame(&mut self, frame: &FrameInput, imu: &[ImuSample]) -> Result<(), RunError> {
        if !self.initialized {
            if frame.t <= imu.first().map(|s| s.t).unwrap_or(0.0) + self.config.init.accel_window_s
            {
                return Ok(());
            }
            if !self.initialize(imu) {
                return Err(RunError::InitFailed);
            }
        }
        let mut diag = FrameDiagnostics {
            t: frame.t,
            ..Default::default()
        };

        // Propagation.
        let span = self.imu_span(imu, frame.t);
        if span.len() >= 2 {
            propagate(&mut self.state, &span, &self.config.imu)?;
        }
        self.last_prop_t = frame.t.max(self.last_prop_t);

        // Window management happens before cloning so the budget holds.
        if self.state.clones.len() >= self.config.filter.m_max {
            self.flush_window(&mut diag);
        }
        let clone_id = self.state.augment_pose(frame.t);

        // Classification and tracking.
        let classified = self.classify(&frame.segments);
        let mut matched: HashSet<usize> = HashSet::new();
        let predicted_cam = self.state.current_camera_pose();
        let track_params = self.config.tracking.track;
        let cam = self.config.camera;
        let mut drops: Vec<u64> = Vec::new();
        for ti in 0..self.line_tracks.len() {
            let track = &self.line_tracks[ti];
            if track.status == TrackStatus::Dropped {
                continue;
            }
            let phi = self.state.worlds.phi(track.line.world_id);
            let Some(anchor) = self.anchor_origin(track) else {
                continue;
            };
            let outcome = track_line(
                track,
                phi,
                &anchor,
                &predicted_cam,
                &cam,
                &frame.segments,
                frame.patches.as_ref(),
                &track_params,
            );
            let track = &mut self.line_tracks[ti];
            match outcome {
                TrackOutcome::Matched(ci) => {
                    matched.insert(ci);
                    let mut seg = frame.segments[ci];
                    seg.frame_id = clone_id;
                    track.observations.push((clone_id, seg));
                    track.missed = 0;
                    track.status = TrackStatus::Active;
                    if track.gt_id.is_none() {
                        track.gt_id = frame.seg_gt_ids.get(ci).copied().flatten();
                    }
                    tracker::refresh_patches(
                        &mut self.line_tracks[ti],
                        ci,
                        phi,
                        &anchor,
                        &predicted_cam,
                        &cam,
                        &frame.segments,
                        frame.patches.as_ref(),
                        &track_params,
                    );
                }
                TrackOutcome::Missed => {
                    track.missed += 1;
                    if track.missed > track_params.drop_after {
                        track.status = TrackStatus::Dropped;
                        drops.push(track.track_id);
                    } else {
                        track.status = TrackStatus::PendingDrop;
                    }
                }
            }
        }

        // Point bookkeeping by front-end id.
        for t in self.point_tracks.values_mut() {
            t.seen_this_frame = false;
        }
        for (front_id, px) in &frame.points {
            if let Some(t) = self.point_tracks.get_mut(front_id) {
                t.observations.push((clone_id, *px));
                t.seen_this_frame = true;
            } else if self.point_tracks.len() < self.config.features.max_points {
                self.point_tracks.insert(
                    *front_id,
                    PointTrack {
                        observations: vec![(clone_id, *px)],
                        seen_this_frame: true,
                        prior: None,
                    },
                );
            }
        }
        let ended_points: Vec<u64> = self
            .point_tracks
            .iter()
            .filter(|(_, t)| !t.seen_this_frame)
            .map(|(k, _)| *k)
            .collect();

        // Manhattan world detection and merging.
        if self.config.structure.mode == StructuralMode::StructVio {
            self.detect_and_merge_worlds(&classified, &matched);
        }

        // Triangulate with the latest state before building updates.
        self.retriangulate_lines();

        // Finished-track trigger: lines first, then points.
        let mut blocks = Vec::new();
        for track in &self.line_tracks {
            if track.status == TrackStatus::Dropped {
                if let Some(b) = self.build_line_block(track, &track.observations) {
                    blocks.push(b);
                }
            }
        }
        for key in &ended_points {
            let track = &self.point_tracks[key];
            if let Some(b) = self.build_point_block(track, &track.observations) {
                blocks.push(b);
            }
        }
        self.apply_update(blocks, &mut diag);

        // Consume finished tracks.
        self.line_tracks.retain(|t| t.status != TrackStatus::Dropped);
        for key in ended_points {
            self.point_tracks.remove(&key);
        }

        // Two-phase outlier rejection: re-triangulate at the updated state
        // and discard lines with large reprojection errors.
        self.retriangulate_lines();
        self.reprojection_reject();

        // Fresh features.
        self.init_new_lines(&classified, &matched, clone_id, frame);

        // Bookkeeping.
        self.trajectory.push((frame.t, self.state.imu.pose));
        diag.active_lines = self.line_tracks.len();
        diag.active_points = self.point_tracks.len();
        diag.headings = self
            .state
            .worlds
            .detected()
            .map(|w| (w.id, w.phi))
            .collect();
        diag.state_dim = self.state.error_dim();
        self.diagnostics.push(diag);
        let _ = drops;

        let norm = self.state.imu.pose.translation.norm();
        if !norm.is_finite() || norm > 1e6 {
            return Err(RunError::Diverged { t: frame.t, norm });
        }
        Ok(())
    }

    fn detect_and_merge_worlds(
        &mut self,
        classified: &[ClassifiedSegment],
        matched: &HashSet<usize>,
    ) {
        let vertical_seen = classified
            .iter()
            .any(|c| matches!(c.assignment, Some((_, atlanta::LineAxis::Z))));
        let multi_ok = self.config.structure.enable_multi_world
            || self.state.worlds.detected_count() == 0;
        if vertical_seen && multi_ok {
            let unexplained: Vec<LineSegment2D> = classified
                .iter()
                .enumerate()
                .filter(|(i, c)| c.assignment.is_none() && !matched.contains(i))
                .map(|(_, c)| c.seg)
                .collect();
            let horizontal_count = classified
                .iter()
                .filter(|c| {
                    matches!(
                        c.assignment,
                        Some((_, atlanta::LineAxis::X)) | Some((_, atlanta::LineAxis::Y))
                    )
                })
                .count();
            let mut params = self.config.tracking.ransac;
            params.min_separation_deg = self.config.structure.delta_phi_deg;
            if let Some(phi) = detect_manhattan_ransac(
                &unexplained,
                &self.camera_rotation(),
                &self.config.camera,
                &self.state.worlds,
                horizontal_count,
                &params,
                &mut self.rng,
            ) {
                self.state
                    .add_manhattan_world(phi, self.config.structure.sigma_phi_deg.to_radians());
            }
        }

        // Merge worlds that drifted within the separation threshold: the
        // newer one is dropped and its lines move to the survivor.
        loop {
            let detected: Vec<(usize, f64)> = self
                .state
                .worlds
                .detected()
                .map(|w| (w.id, w.phi))
                .collect();
            let mut merge: Option<(usize, usize, f64, f64)> = None;
            'outer: for i in 0..detected.len() {
                for j in (i + 1)..detected.len() {
                    if heading_distance(detected[i].1, detected[j].1)
                        <= self.config.structure.delta_phi_deg.to_radians()
                    {
                        // Ids increase monotonically; the larger id is newer.
                        let (keep, drop) = if detected[i].0 < detected[j].0 {
                            (detected[i], detected[j])
                        } else {
                            (detected[j], detected[i])
                        };
                        merge = Some((keep.0, drop.0, keep.1, drop.1));
                        break 'outer;
                    }
                }
            }
            let Some((keep_id, drop_id, keep_phi, drop_phi)) = merge else {
                break;
            };
            let mut dead: Vec<u64> = Vec::new();
            for track in &mut self.line_tracks {
                if track.line.world_id != drop_id {
                    continue;
                }
                let anchor = self
                    .state
                    .camera_position(track.line.anchor_pose_id)
                    .unwrap_or_else(Vector3::zeros);
                match atlanta::retag_world(&track.line, drop_phi, keep_phi, keep_id, &anchor) {
                    Ok(line) => track.line = line,
                    Err(_) => dead.push(track.track_id),
                }
            }
            self.line_tracks.retain(|t| !dead.contains(&t.track_id));
            if self.state.merge_manhattan_worlds(keep_id, drop_id).is_err() {
                break;
            }
        }
    }

    fn init_new_lines(
        &mut self,
        classified: &[ClassifiedSegment],
        matched: &HashSet<usize>,
        clone_id: u64,
        frame: &FrameInput,
    ) {
        if self.config.structure.mode == StructuralMode::PointOnly {
            return;
        }
        let budget = self
            .config
            .features
            .max_lines
            .saturating_sub(self.line_tracks.len());
        if budget == 0 {
            return;
        }
        let candidates: Vec<(usize, ClassifiedSegment)> = classified
            .iter()
            .enumerate()
            .filter(|(i, c)| {
                c.assignment.is_some()
                    && !matched.contains(i)
                    && c.seg.length() >= self.config.tracking.track.min_init_length_px
            })
            .map(|(i, c)| (i, c.clone()))
            .collect();
        let cam = self.config.camera;
        let cam_pose = self.state.current_camera_pose();
        let existing: Vec<Vector3<f64>> = self
            .line_tracks
            .iter()
            .filter_map(|t| {
                let anchor = self.anchor_origin(t)?;
                let phi = self.state.worlds.phi(t.line.world_id);
                tracker::predict_projection(t, phi, &anchor, &cam_pose, &cam)
            })
            .collect();
        let picked = select_segments_for_init(
            &candidates,
            &existing,
            budget,
            self.config.tracking.suppress_px,
        );

        for idx in picked {
            let c = classified[idx].clone();
            let Some((mut world_id, _)) = c.assignment else {
                continue;
            };
            if world_id == PENDING_WORLD {
                let Some(phi) = tracker::heading_from_segment(
                    &c.seg,
                    &self.camera_rotation(),
                    &cam,
                ) else {
                    continue;
                };
                world_id = self.state.worlds.add_frozen(phi);
            }
            let phi = self.state.worlds.phi(world_id);
            // Uncertainty inputs from the current state.
            let sigma_phi = match self.state.world_col(world_id) {
                Some(col) => self.state.cov[(col, col)].max(0.0).sqrt(),
                None => {
                    if world_id == DUMMY_WORLD_ID {
                        0.0
                    } else {
                        self.config.structure.sigma_phi_deg.to_radians()
                    }
                }
            };
            let rot_col = self.state.clone_col(clone_id).unwrap_or(0);
            let sigma_cam_rot = Vector3::new(
                self.state.cov[(rot_col, rot_col)].max(0.0).sqrt(),
                self.state.cov[(rot_col + 1, rot_col + 1)].max(0.0).sqrt(),
                self.state.cov[(rot_col + 2, rot_col + 2)].max(0.0).sqrt(),
            );
            let unc = atlanta::LineInitUncertainty {
                sigma_px: self.config.structure.detection_sigma_px,
                sigma_phi,
                sigma_cam_rot,
            };
            let Some(mut track) = tracker::init_track_from_segment(
                self.next_line_id,
                &c,
                clone_id,
                phi,
                &cam_pose,
                &cam,
                self.config.structure.rho0,
                self.config.structure.sigma_rho0,
                &unc,
                self.config.tracking.track.samples,
                frame.seg_gt_ids.get(idx).copied().flatten(),
            ) else {
                continue;
            };
            self.next_line_id += 1;
            let mut seg = c.seg;
            seg.frame_id = clone_id;
            track.observations.push((clone_id, seg));
            // Initial range from the detection itself.
            let anchor = cam_pose.translation;
            match estimator::update_range(&track.line, phi, &anchor, &seg, &cam_pose, &cam) {
                Ok(r) if r.1 - r.0 > 1e-6 => track.line.range = r,
                _ => {
                    let depth = 1.0 / self.config.structure.rho0;
                    track.line.range = (-depth * 0.5, depth * 0.5);
                }
            }
            tracker::refresh_patches(
                &mut track,
                idx,
                phi,
                &anchor,
                &cam_pose,
                &cam,
                &frame.segments,
                frame.patches.as_ref(),
                &self.config.tracking.track,
            );
            self.line_tracks.push(track);
        }
    }

    pub fn finish(self) -> Result<RunOutput, RunError> {
        if self.updates_applied == 0 {
            log::warn!("run finished without a single EKF update; trajectory is propagation-only");
        }
        let headings = self
            .state
            .worlds
            .detected()
            .map(|w| w.phi)
            .collect();
        Ok(RunOutput {
            trajectory: Trajectory::new(self.trajectory).map_err(|_| RunError::InitFailed)?,
            diagnostics: self.diagnostics,
            final_headings: headings,
            updates_applied: self.updates_applied,
        })
    }
}

/// Runs the full pipeline over pre-assembled streams.
pub fn run_vio(
    config: &RunConfig,
    imu: &[ImuSample],
    frames: impl IntoIterator<Item = FrameInput>,
    seed: u64,
) -> Result<RunOutput, RunError> {
    let mut vio = Vio::new(config.clone(), seed);
    for frame in frames {
        vio.process_frame(&frame, imu)?;
    }
    vio.finish()
}

/// Frame inputs for a simulated run, with simulator-backed patch sources.
pub fn frames_from_sim(run: &SimulatedRun) -> Vec<FrameInput> {
    run.frames
        .iter()
        .map(|f| {
            let segments: Vec<LineSegment2D> = f.render.segments.iter().map(|s| s.seg).collect();
            let seg_gt_ids = f.render.segments.iter().map(|s| Some(s.line_id)).collect();
            let points = f.render.points.iter().map(|p| (p.id as u64, p.px)).collect();
            FrameInput {
                t: f.t,
                t_ns: f.t_ns,
                segments,
                seg_gt_ids,
                points,
                patches: Box::new(SimPatchSource {
                    textures: run.textures.clone(),
                    segments: f.render.segments.clone(),
                }),
            }
        })
        .collect()
}

/// Frame inputs from a loaded dataset with prerecorded detections.
pub fn frames_from_dataset(ds: &Dataset) -> Result<Vec<FrameInput>, RunError> {
    ds.frames
        .iter()
        .map(|f| match &f.data {
            FrameData::Detections(d) => Ok(FrameInput {
                t: f.t,
                t_ns: f.t_ns,
                segments: d.segments.clone(),
                seg_gt_ids: vec![None; d.segments.len()],
                points: d.points.clone(),
                patches: if d.patches.iter().any(|p| !p.is_empty()) {
                    Box::new(FilePatchSource {
                        patches: d.patches.clone(),
                    }) as Box<dyn PatchSource>
                } else {
                    Box::new(NoPatches)
                },
            }),
            FrameData::ImagePath(_) => Err(RunError::NeedsDetector(f.t)),
        })
        .collect()
}

/// Writes the run artifacts: TUM trajectory, metrics, per-frame diagnostics
/// and world headings, plus per-frame errors when ground truth is known.
pub fn emit_outputs(
    out_dir: &Path,
    output: &RunOutput,
    metrics: Option<&crate::eval::ErrorMetrics>,
    ground_truth: Option<&Trajectory>,
    match_tol_s: f64,
) -> Result<(), RunError> {
    use std::io::Write;
    std::fs::create_dir_all(out_dir)?;
    output
        .trajectory
        .save_tum(&out_dir.join("trajectory.tum"))?;

    let mut diag = std::io::BufWriter::new(std::fs::File::create(out_dir.join("diagnostics.csv"))?);
    writeln!(
        diag,
        "t,active_lines,active_points,n_worlds,blocks_built,blocks_rejected,state_dim"
    )?;
    for d in &output.diagnostics {
        writeln!(
            diag,
            "{},{},{},{},{},{},{}",
            d.t,
            d.active_lines,
            d.active_points,
            d.headings.len(),
            d.blocks_built,
            d.blocks_rejected,
            d.state_dim
        )?;
    }

    let mut heads = std::io::BufWriter::new(std::fs::File::create(out_dir.join("headings.csv"))?);
    writeln!(heads, "t,world_id,phi_deg")?;
    for d in &output.diagnostics {
        for (id, phi) in &d.headings {
            writeln!(heads, "{},{},{}", d.t, id, phi.to_degrees())?;
        }
    }

    if let Some(m) = metrics {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.txt"))?);
        writeln!(f, "rmse_m {}", m.rmse_m)?;
        writeln!(f, "max_m {}", m.max_m)?;
        writeln!(f, "drift_percent {}", m.drift_percent)?;
        for (len, err) in &m.relative_errors {
            writeln!(f, "rel_err_{}m {}", len, err)?;
        }
    }

    if let Some(gt) = ground_truth {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("errors.csv"))?);
        writeln!(f, "t,err_m")?;
        for (t, pose) in &output.trajectory.samples {
            if let Some((_, g)) = gt.nearest(*t, match_tol_s) {
                writeln!(f, "{},{}", t, (pose.translation - g.translation).norm())?;
            }
        }
    }
    Ok(())
}
