//! Error-state EKF core.
//!
//! The state vector is `[x_imu, ^I_C tau, phi_1..phi_N, clone_1..clone_M]`
//! with the error state laid out as
//! `[dtheta(3), dp(3), dv(3), dbg(3), dba(3), dtheta_IC(3), dp_IC(3),
//!   dphi x N, (dtheta, dp) x M]`.
//! Features are never part of the state; their measurements constrain the
//! poses through null-space-projected blocks.

mod measurement;
mod propagate;

pub use measurement::{
    build_line_measurement, build_point_measurement, line_residual, LineMeasurementInput,
    MeasurementError, PointMeasurementInput,
};
pub use propagate::propagate;

use crate::atlanta::WorldRegistry;
use crate::geom::Pose;
use nalgebra::{DMatrix, DVector, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("IMU timestamps are not strictly increasing ({0} after {1})")]
    NonMonotonicTime(f64, f64),
    #[error("cannot drop the dummy Manhattan world")]
    DummyWorldRemoval,
    #[error("unknown state entry: {0}")]
    UnknownEntry(String),
}

/// IMU portion of the state: pose `^W_I tau`, velocity, and biases.
#[derive(Debug, Clone)]
pub struct ImuState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl ImuState {
    pub fn at_rest() -> Self {
        ImuState {
            pose: Pose::identity(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

/// Continuous-time IMU noise densities plus the gravity magnitude.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ImuNoiseParams {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_walk: f64,
    /// m/s^2
    pub gravity: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        ImuNoiseParams {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2e-3,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            gravity: 9.81,
        }
    }
}

/// A historical IMU pose cloned into the state at an image time.
#[derive(Debug, Clone)]
pub struct PoseClone {
    pub id: u64,
    pub pose: Pose,
    pub timestamp: f64,
}

pub const IMU_ERR: usize = 15;
pub const EXT_ERR: usize = 6;
pub const CLONE_ERR: usize = 6;

/// Full estimator state with its joint error-state covariance.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub imu: ImuState,
    /// `^I_C tau`, the camera pose in the IMU frame.
    pub extrinsics: Pose,
    pub worlds: WorldRegistry,
    pub clones: Vec<PoseClone>,
    pub cov: DMatrix<f64>,
    next_clone_id: u64,
}

impl FilterState {
    pub fn new(imu: ImuState, extrinsics: Pose) -> Self {
        FilterState {
            imu,
            extrinsics,
            worlds: WorldRegistry::new(),
            clones: Vec::new(),
            cov: DMatrix::zeros(IMU_ERR + EXT_ERR, IMU_ERR + EXT_ERR),
            next_clone_id: 0,
        }
    }

    pub fn error_dim(&self) -> usize {
        IMU_ERR + EXT_ERR + self.worlds.detected_count() + CLONE_ERR * self.clones.len()
    }

    pub fn ext_col(&self) -> usize {
        IMU_ERR
    }

    pub fn world_col(&self, world_id: usize) -> Option<usize> {
        self.worlds
            .state_position(world_id)
            .map(|i| IMU_ERR + EXT_ERR + i)
    }

    pub fn clone_col(&self, clone_id: u64) -> Option<usize> {
        self.clones
            .iter()
            .position(|c| c.id == clone_id)
            .map(|i| IMU_ERR + EXT_ERR + self.worlds.detected_count() + CLONE_ERR * i)
    }

    pub fn clone_by_id(&self, clone_id: u64) -> Option<&PoseClone> {
        self.clones.iter().find(|c| c.id == clone_id)
    }

    /// Camera pose `^W_C tau` of a cloned IMU pose.
    pub fn camera_pose(&self, clone_id: u64) -> Option<Pose> {
        self.clone_by_id(clone_id).map(|c| c.pose * self.extrinsics)
    }

    pub fn camera_position(&self, clone_id: u64) -> Option<Vector3<f64>> {
        self.camera_pose(clone_id).map(|p| p.translation)
    }

    /// Current camera pose from the IMU state.
    pub fn current_camera_pose(&self) -> Pose {
        self.imu.pose * self.extrinsics
    }

    /// Appends a clone of the current IMU pose. The new block's covariance
    /// is an exact copy of the IMU pose block.
    pub fn augment_pose(&mut self, timestamp: f64) -> u64 {
        let id = self.next_clone_id;
        self.next_clone_id += 1;
        let n = self.cov.nrows();
        let mut cov = DMatrix::zeros(n + CLONE_ERR, n + CLONE_ERR);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        // Rows of the IMU pose error (theta at 0, p at 3).
        let pose_rows = self.cov.rows(0, 6).clone_owned();
        cov.view_mut((n, 0), (CLONE_ERR, n)).copy_from(&pose_rows);
        cov.view_mut((0, n), (n, CLONE_ERR))
            .copy_from(&pose_rows.transpose());
        let corner = self.cov.view((0, 0), (6, 6)).clone_owned();
        cov.view_mut((n, n), (CLONE_ERR, CLONE_ERR)).copy_from(&corner);
        self.cov = cov;
        self.clones.push(PoseClone {
            id,
            pose: self.imu.pose,
            timestamp,
        });
        self.symmetrize();
        id
    }

    /// Appends a newly detected Manhattan world with preset heading
    /// variance and zero cross-covariance.
    pub fn add_manhattan_world(&mut self, phi: f64, sigma_phi: f64) -> usize {
        let id = self.worlds.add(phi);
        let pos = self.worlds.state_position(id).unwrap();
        let col = IMU_ERR + EXT_ERR + pos;
        let n = self.cov.nrows();
        let mut cov = DMatrix::zeros(n + 1, n + 1);
        // The new heading column sits before the clone block; splice it in.
        let keep: Vec<usize> = (0..n).collect();
        for (bi, &i) in keep.iter().enumerate() {
            let ii = if bi < col { bi } else { bi + 1 };
            for (bj, &j) in keep.iter().enumerate() {
                let jj = if bj < col { bj } else { bj + 1 };
                cov[(ii, jj)] = self.cov[(i, j)];
            }
        }
        cov[(col, col)] = sigma_phi * sigma_phi;
        self.cov = cov;
        id
    }

    /// Removes the newer of two nearly parallel worlds from the state.
    /// Lines anchored to the dropped world must be re-tagged by the caller.
    pub fn merge_manhattan_worlds(&mut self, keep_id: usize, drop_id: usize) -> Result<(), FilterError> {
        if drop_id == crate::atlanta::DUMMY_WORLD_ID {
            return Err(FilterError::DummyWorldRemoval);
        }
        let col = self
            .world_col(drop_id)
            .ok_or_else(|| FilterError::UnknownEntry(format!("world {drop_id}")))?;
        if self.worlds.get(keep_id).is_none() {
            return Err(FilterError::UnknownEntry(format!("world {keep_id}")));
        }
        self.cov = remove_indices(&self.cov, &[col]);
        self.worlds.remove(drop_id);
        Ok(())
    }

    /// Excises clones and their covariance rows/columns.
    pub fn remove_clones(&mut self, ids: &[u64]) {
        let mut cols: Vec<usize> = Vec::new();
        for id in ids {
            if let Some(c) = self.clone_col(*id) {
                cols.extend(c..c + CLONE_ERR);
            }
        }
        cols.sort_unstable();
        self.cov = remove_indices(&self.cov, &cols);
        self.clones.retain(|c| !ids.contains(&c.id));
    }

    /// Injects an error-state correction into the nominal state.
    pub fn apply_error(&mut self, dx: &DVector<f64>) {
        debug_assert_eq!(dx.len(), self.error_dim());
        self.imu.pose.rotation = self.imu.pose.rotation.boxplus(dx.rows(0, 3).to_vec3());
        self.imu.pose.translation += dx.rows(3, 3).to_vec3();
        self.imu.velocity += dx.rows(6, 3).to_vec3();
        self.imu.gyro_bias += dx.rows(9, 3).to_vec3();
        self.imu.accel_bias += dx.rows(12, 3).to_vec3();
        self.extrinsics.rotation = self.extrinsics.rotation.boxplus(dx.rows(15, 3).to_vec3());
        self.extrinsics.translation += dx.rows(18, 3).to_vec3();
        let world_ids: Vec<usize> = self.worlds.detected().map(|w| w.id).collect();
        for (i, id) in world_ids.iter().enumerate() {
            let phi = self.worlds.phi(*id) + dx[IMU_ERR + EXT_ERR + i];
            self.worlds.set_phi(*id, phi);
        }
        let base = IMU_ERR + EXT_ERR + world_ids.len();
        for (i, clone) in self.clones.iter_mut().enumerate() {
            let o = base + CLONE_ERR * i;
            clone.pose.rotation = clone.pose.rotation.boxplus(dx.rows(o, 3).to_vec3());
            clone.pose.translation += dx.rows(o + 3, 3).to_vec3();
        }
    }

    pub fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov = (&self.cov + t) * 0.5;
    }
}

/// Copies a matrix dropping the given sorted row/column indices.
pub(crate) fn remove_indices(m: &DMatrix<f64>, drop: &[usize]) -> DMatrix<f64> {
    let n = m.nrows();
    let keep: Vec<usize> = (0..n).filter(|i| !drop.contains(i)).collect();
    let mut out = DMatrix::zeros(keep.len(), keep.len());
    for (bi, &i) in keep.iter().enumerate() {
        for (bj, &j) in keep.iter().enumerate() {
            out[(bi, bj)] = m[(i, j)];
        }
    }
    out
}

/// One null-space-projected measurement: residual, Jacobian over the full
/// error state, and the pixel noise scale.
#[derive(Debug, Clone)]
pub struct MeasurementBlock {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub sigma: f64,
}

/// 95%-tail chi-squared quantile for the gating test.
pub fn chi2_quantile(confidence: f64, dof: usize) -> f64 {
    ChiSquared::new(dof.max(1) as f64)
        .expect("valid dof")
        .inverse_cdf(confidence)
}

#[derive(Debug, Clone, Default)]
pub struct UpdateOutcome {
    pub accepted: Vec<bool>,
    pub applied_rows: usize,
}

/// Chi-squared-gated joint EKF update in Joseph form.
///
/// Each block is tested with `z^T (H P H^T + sigma^2 I)^-1 z` against the
/// chi-squared quantile of its row count; accepted blocks are stacked into
/// a single update.
pub fn gated_update(
    state: &mut FilterState,
    blocks: &[MeasurementBlock],
    confidence: f64,
) -> UpdateOutcome {
    let n = state.error_dim();
    let mut accepted = vec![false; blocks.len()];
    let mut total_rows = 0;
    for (bi, b) in blocks.iter().enumerate() {
        let rows = b.residual.len();
        if rows == 0 || b.jacobian.ncols() != n {
            continue;
        }
        let mut s = &b.jacobian * &state.cov * b.jacobian.transpose();
        for i in 0..rows {
            s[(i, i)] += b.sigma * b.sigma;
        }
        let Some(chol) = s.clone().cholesky() else {
            continue;
        };
        // Cheap conditioning estimate from the Cholesky diagonal.
        let l = chol.l();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0f64;
        for i in 0..rows {
            dmin = dmin.min(l[(i, i)]);
            dmax = dmax.max(l[(i, i)]);
        }
        if dmin <= 0.0 || (dmax / dmin).powi(2) > 1e12 {
            continue;
        }
        let alpha = chol.solve(&b.residual);
        let mahal = b.residual.dot(&alpha);
        if mahal < chi2_quantile(confidence, rows) {
            accepted[bi] = true;
            total_rows += rows;
        }
    }
    if total_rows == 0 {
        return UpdateOutcome {
            accepted,
            applied_rows: 0,
        };
    }

    let mut h = DMatrix::zeros(total_rows, n);
    let mut z = DVector::zeros(total_rows);
    let mut r = DMatrix::zeros(total_rows, total_rows);
    let mut row = 0;
    for (bi, b) in blocks.iter().enumerate() {
        if !accepted[bi] {
            continue;
        }
        let k = b.residual.len();
        h.view_mut((row, 0), (k, n)).copy_from(&b.jacobian);
        z.rows_mut(row, k).copy_from(&b.residual);
        for i in 0..k {
            r[(row + i, row + i)] = b.sigma * b.sigma;
        }
        row += k;
    }

    let s = &h * &state.cov * h.transpose() + &r;
    let Some(chol) = s.cholesky() else {
        return UpdateOutcome {
            accepted: vec![false; blocks.len()],
            applied_rows: 0,
        };
    };
    // K = P H^T S^-1, computed as solving S K^T = H P.
    let hp = &h * &state.cov;
    let kt = chol.solve(&hp);
    let k = kt.transpose();
    let dx = &k * &z;

    // Joseph form.
    let ikh = DMatrix::identity(n, n) - &k * &h;
    state.cov = &ikh * &state.cov * ikh.transpose() + &k * &r * k.transpose();
    state.symmetrize();
    state.apply_error(&dx);

    UpdateOutcome {
        accepted,
        applied_rows: total_rows,
    }
}

/// Clone ids slated for removal when the window is full: every third pose
/// starting from the second oldest. The oldest pose is never selected.
pub fn select_poses_for_removal(state: &FilterState) -> Vec<u64> {
    let m = state.clones.len();
    (1..m).step_by(3).map(|i| state.clones[i].id).collect()
}

pub(crate) trait ToVec3 {
    fn to_vec3(&self) -> Vector3<f64>;
}

impl ToVec3 for nalgebra::DVectorView<'_, f64> {
    fn to_vec3(&self) -> Vector3<f64> {
        Vector3::new(self[0], self[1], self[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn seeded_state(clones: usize) -> FilterState {
        let mut s = FilterState::new(ImuState::at_rest(), Pose::identity());
        // Give every block some spread so the tests exercise real numbers.
        let n = s.cov.nrows();
        for i in 0..n {
            s.cov[(i, i)] = 0.01 + 0.001 * i as f64;
        }
        for _ in 0..clones {
            s.augment_pose(0.0);
        }
        s
    }

    #[test]
    fn augment_copies_pose_block() {
        let mut s = seeded_state(0);
        s.cov[(0, 3)] = 0.002;
        s.cov[(3, 0)] = 0.002;
        let before = s.cov.view((0, 0), (6, 6)).clone_owned();
        s.augment_pose(1.0);
        let n = s.cov.nrows();
        let cross = s.cov.view((n - 6, 0), (6, 6)).clone_owned();
        let corner = s.cov.view((n - 6, n - 6), (6, 6)).clone_owned();
        assert_relative_eq!(cross, before, epsilon = 1e-12);
        assert_relative_eq!(corner, before, epsilon = 1e-12);
        assert_eq!(s.error_dim(), IMU_ERR + EXT_ERR + 6);
        let eig = SymmetricEigen::new(s.cov.clone());
        assert!(eig.eigenvalues.min() > -1e-12);
    }

    #[test]
    fn add_world_sets_preset_variance() {
        let mut s = seeded_state(2);
        let sigma = 5.0f64.to_radians();
        let id = s.add_manhattan_world(0.3, sigma);
        let col = s.world_col(id).unwrap();
        assert_relative_eq!(s.cov[(col, col)], sigma * sigma, epsilon = 1e-15);
        // Cross covariance is zero by construction.
        for i in 0..s.cov.nrows() {
            if i != col {
                assert_eq!(s.cov[(i, col)], 0.0);
                assert_eq!(s.cov[(col, i)], 0.0);
            }
        }
        assert_relative_eq!(
            s.cov[(col, col)],
            (5.0f64 * std::f64::consts::PI / 180.0).powi(2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn merge_shrinks_state_by_one() {
        let mut s = seeded_state(1);
        let a = s.add_manhattan_world(0.2, 0.1);
        let b = s.add_manhattan_world(0.25, 0.1);
        let dim = s.error_dim();
        s.merge_manhattan_worlds(a, b).unwrap();
        assert_eq!(s.error_dim(), dim - 1);
        assert_eq!(s.cov.nrows(), dim - 1);
        assert!(s
            .merge_manhattan_worlds(a, crate::atlanta::DUMMY_WORLD_ID)
            .is_err());
    }

    #[test]
    fn select_poses_every_third_from_second_oldest() {
        let mut s = seeded_state(0);
        for _ in 0..30 {
            s.augment_pose(0.0);
        }
        let ids = select_poses_for_removal(&s);
        assert_eq!(ids.len(), 10);
        let positions: Vec<usize> = ids
            .iter()
            .map(|id| s.clones.iter().position(|c| c.id == *id).unwrap())
            .collect();
        assert_eq!(positions, vec![1, 4, 7, 10, 13, 16, 19, 22, 25, 28]);
        assert!(!positions.contains(&0));
        let dim = s.error_dim();
        s.remove_clones(&ids);
        assert_eq!(s.error_dim(), dim - 6 * ids.len());
    }

    #[test]
    fn zero_innovation_leaves_state_fixed() {
        let mut s = seeded_state(3);
        let n = s.error_dim();
        let pose_before = s.imu.pose;
        let trace_before = s.cov.trace();
        let mut jac = DMatrix::zeros(2, n);
        jac[(0, 3)] = 1.0;
        jac[(1, 4)] = 1.0;
        let block = MeasurementBlock {
            residual: DVector::zeros(2),
            jacobian: jac,
            sigma: 1.0,
        };
        let out = gated_update(&mut s, &[block], 0.95);
        assert_eq!(out.accepted, vec![true]);
        assert_relative_eq!(
            s.imu.pose.translation,
            pose_before.translation,
            epsilon = 1e-12
        );
        assert!(s.cov.trace() <= trace_before + 1e-12);
    }

    #[test]
    fn chi2_quantiles_match_reference() {
        assert_relative_eq!(chi2_quantile(0.95, 1), 3.8415, epsilon = 1e-3);
        assert_relative_eq!(chi2_quantile(0.95, 4), 9.4877, epsilon = 1e-3);
    }

    #[test]
    fn gate_rejects_20_sigma_outliers() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut rejected = 0;
        let trials = 500;
        for _ in 0..trials {
            let mut s = seeded_state(2);
            let n = s.error_dim();
            let mut jac = DMatrix::zeros(2, n);
            jac[(0, 3)] = 1.0;
            jac[(1, 4)] = 1.0;
            let sigma = 1.0;
            // Marginal innovation std is sqrt(H P H^T + sigma^2).
            let s00 = (s.cov[(3, 3)] + sigma * sigma).sqrt();
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = DVector::from_vec(vec![20.0 * s00 * dir.cos(), 20.0 * s00 * dir.sin()]);
            let block = MeasurementBlock {
                residual: z,
                jacobian: jac,
                sigma,
            };
            let out = gated_update(&mut s, &[block], 0.95);
            if !out.accepted[0] {
                rejected += 1;
            }
        }
        assert!(
            rejected as f64 >= 0.95 * trials as f64,
            "rejected only {rejected}/{trials}"
        );
    }

    #[test]
    fn joseph_update_stays_psd_under_stress() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut s = seeded_state(2);
        let n = s.error_dim();
        for _ in 0..2000 {
            let rows = rng.gen_range(1..4);
            let mut jac = DMatrix::zeros(rows, n);
            for r in 0..rows {
                for _ in 0..3 {
                    let c = rng.gen_range(0..n);
                    jac[(r, c)] = rng.gen_range(-1.0..1.0);
                }
            }
            let z = DVector::from_fn(rows, |_, _| rng.gen_range(-0.1..0.1));
            let block = MeasurementBlock {
                residual: z,
                jacobian: jac,
                sigma: 0.5,
            };
            gated_update(&mut s, &[block], 0.999);
        }
        let eig = SymmetricEigen::new(s.cov.clone());
        assert!(
            eig.eigenvalues.min() >= -1e-9,
            "min eigenvalue {}",
            eig.eigenvalues.min()
        );
        let asym = (&s.cov - s.cov.transpose()).abs().max();
        assert!(asym < 1e-9);
    }
}
