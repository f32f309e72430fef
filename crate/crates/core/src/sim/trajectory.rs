//! Continuous ground-truth trajectories.
//!
//! Waypoint paths are interpolated per coordinate by a clamped cubic
//! spline over uniform knots (C2 in the interior, so acceleration is
//! piecewise linear and continuous between knots, which RK4 with linear
//! IMU interpolation integrates almost exactly). A separate analytic
//! circle variant provides closed-form kinematics for oracle tests.
//!
//! Orientation is yaw-only: the body frame is the world frame rotated
//! about Z, so the body angular rate is `(0, 0, yaw_rate)`.

use crate::geom::{Pose, Rotation};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("at least two waypoints are required")]
    TooFewWaypoints,
    #[error("duration must be positive")]
    BadDuration,
    #[error("camera rate must not exceed the IMU rate")]
    BadRates,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EndCondition {
    /// Zero velocity at both ends (clamped spline).
    Rest,
    /// Zero acceleration at both ends (natural spline).
    Natural,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathSpec {
    Waypoints {
        /// `[x, y, z, yaw_deg]` rows.
        points: Vec<[f64; 4]>,
        #[serde(default = "default_end")]
        end: EndCondition,
    },
    Circle {
        radius: f64,
        /// rad/s, sign sets the direction.
        angular_rate: f64,
        #[serde(default)]
        height: f64,
    },
}

fn default_end() -> EndCondition {
    EndCondition::Rest
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub path: PathSpec,
    pub duration_s: f64,
    /// Stationary lead-in before motion starts (filter initialization).
    #[serde(default)]
    pub settle_s: f64,
}

/// Kinematic ground truth at one instant.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    /// `^W_I tau`
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub omega_body: Vector3<f64>,
}

#[derive(Debug, Clone)]
enum Curve {
    Spline {
        /// Per-channel cubic coefficients: [x, y, z, yaw].
        channels: [Spline1D; 4],
        t0: f64,
        t1: f64,
        /// Rest-to-rest paths are time-warped by a quintic smoothstep so
        /// velocity and acceleration both vanish at the ends; otherwise the
        /// acceleration jump at the stationary lead-in spoils integration.
        warp: bool,
    },
    Circle {
        radius: f64,
        rate: f64,
        height: f64,
        t0: f64,
    },
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    curve: Curve,
    pub total_duration: f64,
}

impl GroundTruth {
    pub fn new(spec: &TrajectorySpec) -> Result<Self, TrajectoryError> {
        if spec.duration_s <= 0.0 {
            return Err(TrajectoryError::BadDuration);
        }
        let t0 = spec.settle_s;
        let t1 = spec.settle_s + spec.duration_s;
        let curve = match &spec.path {
            PathSpec::Waypoints { points, end } => {
                if points.len() < 2 {
                    return Err(TrajectoryError::TooFewWaypoints);
                }
                let n = points.len();
                let mut chans: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 4];
                let mut prev_yaw = points[0][3].to_radians();
                for (i, p) in points.iter().enumerate() {
                    chans[0].push(p[0]);
                    chans[1].push(p[1]);
                    chans[2].push(p[2]);
                    // Unwrap yaw so the spline never spins the long way.
                    let mut yaw = p[3].to_radians();
                    if i > 0 {
                        while yaw - prev_yaw > std::f64::consts::PI {
                            yaw -= 2.0 * std::f64::consts::PI;
                        }
                        while yaw - prev_yaw < -std::f64::consts::PI {
                            yaw += 2.0 * std::f64::consts::PI;
                        }
                    }
                    prev_yaw = yaw;
                    chans[3].push(yaw);
                }
                let h = spec.duration_s / (n - 1) as f64;
                Curve::Spline {
                    channels: [
                        Spline1D::fit(&chans[0], h, *end),
                        Spline1D::fit(&chans[1], h, *end),
                        Spline1D::fit(&chans[2], h, *end),
                        Spline1D::fit(&chans[3], h, *end),
                    ],
                    t0,
                    t1,
                    warp: *end == EndCondition::Rest,
                }
            }
            PathSpec::Circle {
                radius,
                angular_rate,
                height,
            } => Curve::Circle {
                radius: *radius,
                rate: *angular_rate,
                height: *height,
                t0,
            },
        };
        Ok(GroundTruth {
            curve,
            total_duration: t1,
        })
    }

    pub fn sample(&self, t: f64) -> TrajectorySample {
        match &self.curve {
            Curve::Spline {
                channels,
                t0,
                t1,
                warp,
            } => {
                let duration = t1 - t0;
                let frozen = t < *t0 || t > *t1;
                let u = ((t - t0) / duration).clamp(0.0, 1.0);
                // Quintic smoothstep warp with zero first and second
                // derivatives at both ends.
                let (tau, dtau, ddtau) = if *warp {
                    let s = 6.0 * u.powi(5) - 15.0 * u.powi(4) + 10.0 * u.powi(3);
                    let ds = 30.0 * u.powi(4) - 60.0 * u.powi(3) + 30.0 * u * u;
                    let dds = (120.0 * u.powi(3) - 180.0 * u * u + 60.0 * u) / duration;
                    (duration * s, ds, dds)
                } else {
                    (duration * u, 1.0, 0.0)
                };
                let mut p = Vector3::zeros();
                let mut v = Vector3::zeros();
                let mut a = Vector3::zeros();
                for k in 0..3 {
                    let (x, dx, ddx) = channels[k].eval(tau);
                    p[k] = x;
                    v[k] = dx * dtau;
                    a[k] = ddx * dtau * dtau + dx * ddtau;
                }
                let (yaw, dyaw, _) = channels[3].eval(tau);
                if frozen {
                    v = Vector3::zeros();
                    a = Vector3::zeros();
                }
                TrajectorySample {
                    pose: Pose::new(Rotation::exp(Vector3::new(0.0, 0.0, yaw)), p),
                    velocity: v,
                    accel_world: a,
                    omega_body: Vector3::new(0.0, 0.0, if frozen { 0.0 } else { dyaw * dtau }),
                }
            }
            Curve::Circle {
                radius,
                rate,
                height,
                t0,
            } => {
                let tau = (t - t0).max(0.0);
                let frozen = t < *t0;
                let alpha = rate * tau;
                let p = Vector3::new(radius * alpha.cos(), radius * alpha.sin(), *height);
                let (v, a, w) = if frozen {
                    (Vector3::zeros(), Vector3::zeros(), 0.0)
                } else {
                    (
                        Vector3::new(-radius * rate * alpha.sin(), radius * rate * alpha.cos(), 0.0),
                        Vector3::new(
                            -radius * rate * rate * alpha.cos(),
                            -radius * rate * rate * alpha.sin(),
                            0.0,
                        ),
                        *rate,
                    )
                };
                // Yaw follows the tangent direction.
                let yaw = alpha + std::f64::consts::FRAC_PI_2 * rate.signum();
                TrajectorySample {
                    pose: Pose::new(Rotation::exp(Vector3::new(0.0, 0.0, yaw)), p),
                    velocity: v,
                    accel_world: a,
                    omega_body: Vector3::new(0.0, 0.0, w),
                }
            }
        }
    }
}

/// Cubic spline over uniform knots with clamped or natural ends.
#[derive(Debug, Clone)]
struct Spline1D {
    values: Vec<f64>,
    /// Second derivatives at the knots.
    moments: Vec<f64>,
    h: f64,
}

impl Spline1D {
    fn fit(values: &[f64], h: f64, end: EndCondition) -> Self {
        let n = values.len();
        let mut a = vec![0.0; n]; // sub-diagonal
        let mut b = vec![0.0; n]; // diagonal
        let mut c = vec![0.0; n]; // super-diagonal
        let mut d = vec![0.0; n]; // rhs
        match end {
            EndCondition::Rest => {
                // Clamped with zero end slopes.
                b[0] = 2.0;
                c[0] = 1.0;
                d[0] = 6.0 / h * ((values[1] - values[0]) / h);
                a[n - 1] = 1.0;
                b[n - 1] = 2.0;
                d[n - 1] = 6.0 / h * (-(values[n - 1] - values[n - 2]) / h);
            }
            EndCondition::Natural => {
                b[0] = 1.0;
                d[0] = 0.0;
                b[n - 1] = 1.0;
                d[n - 1] = 0.0;
            }
        }
        for i in 1..n - 1 {
            a[i] = 1.0;
            b[i] = 4.0;
            c[i] = 1.0;
            d[i] = 6.0 / (h * h) * (values[i + 1] - 2.0 * values[i] + values[i - 1]);
        }
        // Thomas algorithm.
        for i in 1..n {
            let m = a[i] / b[i - 1];
            b[i] -= m * c[i - 1];
            d[i] -= m * d[i - 1];
        }
        let mut moments = vec![0.0; n];
        moments[n - 1] = d[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            moments[i] = (d[i] - c[i] * moments[i + 1]) / b[i];
        }
        Spline1D {
            values: values.to_vec(),
            moments,
            h,
        }
    }

    /// Value, first and second derivative at spline time `tau`.
    fn eval(&self, tau: f64) -> (f64, f64, f64) {
        let n = self.values.len();
        let total = self.h * (n - 1) as f64;
        let tau = tau.clamp(0.0, total);
        let mut i = (tau / self.h) as usize;
        if i >= n - 1 {
            i = n - 2;
        }
        let t = tau - i as f64 * self.h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.moments[i], self.moments[i + 1]);
        let h = self.h;
        let c = m0 / 2.0;
        let dcoef = (m1 - m0) / (6.0 * h);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        let x = y0 + b * t + c * t * t + dcoef * t * t * t;
        let dx = b + 2.0 * c * t + 3.0 * dcoef * t * t;
        let ddx = 2.0 * c + 6.0 * dcoef * t;
        (x, dx, ddx)
    }
}

/// Integer-nanosecond sample grid so exported datasets reload bit-exactly.
pub fn time_grid(duration_s: f64, hz: f64) -> Vec<u64> {
    let n = (duration_s * hz).floor() as u64;
    (0..=n)
        .map(|i| (i as f64 * 1e9 / hz).round() as u64)
        .collect()
}
