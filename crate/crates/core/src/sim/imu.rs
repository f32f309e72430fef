//! IMU stream synthesis from a continuous trajectory.

use super::trajectory::{time_grid, GroundTruth};
use super::NoiseSpec;
use crate::geom::ImuSample;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Samples gyro and accelerometer readings on an integer-nanosecond grid.
///
/// `gyro = omega_body + b_g + n_g`, `accel = R^T (a_world - g) + b_a + n_a`
/// with white noise scaled by `1/sqrt(dt)` and biases random-walking at the
/// configured densities. A zeroed [`NoiseSpec`] reproduces the trajectory
/// exactly under RK4 re-integration.
pub fn synthesize_imu(
    gt: &GroundTruth,
    noise: &NoiseSpec,
    imu_hz: f64,
    duration_s: f64,
    gravity: f64,
    seed: u64,
) -> Vec<ImuSample> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1a2b_3c4d);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let dt = 1.0 / imu_hz;
    let sqrt_dt = dt.sqrt();
    let g_world = Vector3::new(0.0, 0.0, -gravity);

    let mut bg = Vector3::new(
        noise.init_gyro_bias[0],
        noise.init_gyro_bias[1],
        noise.init_gyro_bias[2],
    );
    let mut ba = Vector3::new(
        noise.init_accel_bias[0],
        noise.init_accel_bias[1],
        noise.init_accel_bias[2],
    );

    let draw3 = |rng: &mut ChaCha12Rng| {
        Vector3::new(unit.sample(rng), unit.sample(rng), unit.sample(rng))
    };

    let mut out = Vec::new();
    for t_ns in time_grid(duration_s, imu_hz) {
        let t = t_ns as f64 * 1e-9;
        let s = gt.sample(t);
        let r_t = s.pose.rotation.inverse();
        let gyro = s.omega_body + bg + draw3(&mut rng) * (noise.gyro_noise_density / sqrt_dt);
        let accel =
            r_t * (s.accel_world - g_world) + ba + draw3(&mut rng) * (noise.accel_noise_density / sqrt_dt);
        out.push(ImuSample { t, gyro, accel });
        bg += draw3(&mut rng) * (noise.gyro_bias_walk * sqrt_dt);
        ba += draw3(&mut rng) * (noise.accel_bias_walk * sqrt_dt);
    }
    out
}
