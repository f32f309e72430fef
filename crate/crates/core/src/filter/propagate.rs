//! IMU state prediction and covariance propagation.
//!
//! The nominal state is integrated by fourth-order Runge-Kutta; angular
//! velocity and acceleration are interpolated linearly between consecutive
//! samples. The error-state transition uses the standard left-perturbation
//! form; heading and clone blocks of F are identity so only the IMU blocks
//! of P are touched.

use super::{FilterState, FilterError, ImuNoiseParams, IMU_ERR};
use crate::geom::{skew, ImuSample, Rotation};
use nalgebra::{DMatrix, Matrix3, Quaternion, Vector3};

/// Propagates the state and covariance through a time-ordered IMU span.
///
/// Intervals longer than 0.5 s are integrated anyway but logged as gaps.
pub fn propagate(
    state: &mut FilterState,
    samples: &[ImuSample],
    noise: &ImuNoiseParams,
) -> Result<(), FilterError> {
    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        if s1.t <= s0.t {
            return Err(FilterError::NonMonotonicTime(s1.t, s0.t));
        }
        let dt = s1.t - s0.t;
        if dt > 0.5 {
            log::warn!("IMU gap of {dt:.3} s; propagating across it");
        }
        integrate_interval(state, s0, s1, noise);
    }
    Ok(())
}

fn integrate_interval(state: &mut FilterState, s0: &ImuSample, s1: &ImuSample, noise: &ImuNoiseParams) {
    let dt = s1.t - s0.t;
    let gravity = Vector3::new(0.0, 0.0, -noise.gravity);
    let bg = state.imu.gyro_bias;
    let ba = state.imu.accel_bias;

    let omega_at = |tau: f64| -> Vector3<f64> {
        let w = tau / dt;
        s0.gyro * (1.0 - w) + s1.gyro * w - bg
    };
    let accel_at = |tau: f64| -> Vector3<f64> {
        let w = tau / dt;
        s0.accel * (1.0 - w) + s1.accel * w - ba
    };

    // RK4 on (q, p, v) with the quaternion integrated in raw coordinates
    // and renormalized at the end of the step.
    #[derive(Clone, Copy)]
    struct Deriv {
        dq: Quaternion<f64>,
        dp: Vector3<f64>,
        dv: Vector3<f64>,
    }
    let f = |q: &Quaternion<f64>, v: &Vector3<f64>, tau: f64| -> Deriv {
        let w = omega_at(tau);
        let a = accel_at(tau);
        let qn = q.normalize();
        let rot = Rotation::from_quaternion(qn.w, qn.i, qn.j, qn.k);
        Deriv {
            dq: q * Quaternion::from_parts(0.0, w) * 0.5,
            dp: *v,
            dv: rot * a + gravity,
        }
    };

    let q0 = state.imu.pose.rotation.unit_quaternion().into_inner();
    let p0 = state.imu.pose.translation;
    let v0 = state.imu.velocity;

    let k1 = f(&q0, &v0, 0.0);
    let k2 = f(&(q0 + k1.dq * (dt / 2.0)), &(v0 + k1.dv * (dt / 2.0)), dt / 2.0);
    let k3 = f(&(q0 + k2.dq * (dt / 2.0)), &(v0 + k2.dv * (dt / 2.0)), dt / 2.0);
    let k4 = f(&(q0 + k3.dq * dt), &(v0 + k3.dv * dt), dt);

    let q1 = q0 + (k1.dq + k2.dq * 2.0 + k3.dq * 2.0 + k4.dq) * (dt / 6.0);
    let p1 = p0 + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * (dt / 6.0);
    let v1 = v0 + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * (dt / 6.0);

    // Error-state transition linearized at the interval start with the
    // mid-interval specific force.
    let r0 = state.imu.pose.rotation.matrix();
    let a_mid = (s0.accel + s1.accel) * 0.5 - ba;
    let f_imu = imu_transition(&r0, &a_mid, dt);
    let qd = process_noise(dt, noise);
    propagate_cov(&mut state.cov, &f_imu, &qd);

    state.imu.pose.rotation = Rotation::from_quaternion(q1.w, q1.i, q1.j, q1.k);
    state.imu.pose.translation = p1;
    state.imu.velocity = v1;
}

/// Discrete IMU error-state transition, error order
/// `[dtheta, dp, dv, dbg, dba]`.
fn imu_transition(r_wi: &Matrix3<f64>, a_body: &Vector3<f64>, dt: f64) -> DMatrix<f64> {
    let mut f = DMatrix::identity(IMU_ERR, IMU_ERR);
    let rdt = r_wi * dt;
    // dtheta_k+1 = dtheta - R dt dbg
    f.view_mut((0, 9), (3, 3)).copy_from(&(-rdt));
    // dp_k+1 = dp + dv dt
    f.view_mut((3, 6), (3, 3))
        .copy_from(&(Matrix3::identity() * dt));
    // dv_k+1 = -[R a]x dt dtheta + dv - R dt dba
    f.view_mut((6, 0), (3, 3))
        .copy_from(&(-skew(&(r_wi * a_body)) * dt));
    f.view_mut((6, 12), (3, 3)).copy_from(&(-rdt));
    f
}

fn process_noise(dt: f64, noise: &ImuNoiseParams) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(IMU_ERR, IMU_ERR);
    let g2 = noise.gyro_noise_density.powi(2) * dt;
    let a2 = noise.accel_noise_density.powi(2) * dt;
    let wg2 = noise.gyro_bias_walk.powi(2) * dt;
    let wa2 = noise.accel_bias_walk.powi(2) * dt;
    for i in 0..3 {
        q[(i, i)] = g2;
        q[(6 + i, 6 + i)] = a2;
        q[(9 + i, 9 + i)] = wg2;
        q[(12 + i, 12 + i)] = wa2;
    }
    q
}

fn propagate_cov(p: &mut DMatrix<f64>, f_imu: &DMatrix<f64>, qd: &DMatrix<f64>) {
    let n = p.nrows();
    let p_ii = p.view((0, 0), (IMU_ERR, IMU_ERR)).clone_owned();
    let new_ii = f_imu * p_ii * f_imu.transpose() + qd;
    p.view_mut((0, 0), (IMU_ERR, IMU_ERR))
        .copy_from(&((&new_ii + new_ii.transpose()) * 0.5));
    if n > IMU_ERR {
        let p_ix = p.view((0, IMU_ERR), (IMU_ERR, n - IMU_ERR)).clone_owned();
        let new_ix = f_imu * p_ix;
        p.view_mut((0, IMU_ERR), (IMU_ERR, n - IMU_ERR))
            .copy_from(&new_ix);
        p.view_mut((IMU_ERR, 0), (n - IMU_ERR, IMU_ERR))
            .copy_from(&new_ix.transpose());
    }
}
