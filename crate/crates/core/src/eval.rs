//! Trajectory output, alignment and error metrics.
//!
//! Estimates are aligned to the reference over a start window by a
//! closed-form rigid fit (with a yaw-only fallback for degenerate windows,
//! since roll and pitch are gravity-observable anyway); RMSE and maximum
//! error are then evaluated over an end window.

use crate::geom::{Pose, Rotation};
use nalgebra::{Matrix3, Vector3};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fewer than {0} matched pose pairs in the window")]
    TooFewMatches(usize),
    #[error("no matched samples in the evaluation window")]
    EmptyWindow,
    #[error("timestamps are not strictly increasing at sample {0}")]
    NonMonotonic(usize),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time-ordered pose sequence.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(EvalError::NonMonotonic(i + 1));
            }
        }
        Ok(Trajectory { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.0)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    /// Nearest sample within `tol` seconds of `t`.
    pub fn nearest(&self, t: f64, tol: f64) -> Option<&(f64, Pose)> {
        let idx = self
            .samples
            .binary_search_by(|s| s.0.partial_cmp(&t).unwrap())
            .unwrap_or_else(|i| i);
        let mut best: Option<&(f64, Pose)> = None;
        for j in idx.saturating_sub(1)..=(idx + 1).min(self.samples.len().saturating_sub(1)) {
            if let Some(s) = self.samples.get(j) {
                if (s.0 - t).abs() <= tol && best.map_or(true, |b| (s.0 - t).abs() < (b.0 - t).abs())
                {
                    best = Some(s);
                }
            }
        }
        best
    }

    /// Path length in meters.
    pub fn length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }

    /// Writes TUM format: `timestamp tx ty tz qx qy qz qw`.
    pub fn write_tum<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (t, pose) in &self.samples {
            let p = pose.translation;
            let [w, x, y, z] = pose.rotation.wxyz();
            writeln!(out, "{:.9} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, x, y, z, w)?;
        }
        Ok(())
    }

    pub fn save_tum(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_tum(std::io::BufWriter::new(f))
    }

    pub fn load_tum(path: &Path) -> Result<Self, EvalError> {
        let f = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(f);
        let mut samples = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let s = line.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = s.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(EvalError::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: format!("expected 8 fields, found {}", fields.len()),
                });
            }
            let mut v = [0.0f64; 8];
            for (i, f) in fields.iter().enumerate() {
                v[i] = f.parse().map_err(|e| EvalError::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: format!("bad number {f:?}: {e}"),
                })?;
            }
            samples.push((
                v[0],
                Pose::new(
                    Rotation::from_quaternion(v[7], v[4], v[5], v[6]),
                    Vector3::new(v[1], v[2], v[3]),
                ),
            ));
        }
        Trajectory::new(samples)
    }
}

/// Rigid transform fitted by trajectory alignment.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    /// True when the full 6-DoF fit degenerated to yaw-only.
    pub yaw_only: bool,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
            yaw_only: false,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }
}

/// Matched (estimate, reference) positions by nearest timestamp.
fn match_positions(
    estimate: &Trajectory,
    reference: &Trajectory,
    window: (f64, f64),
    tol: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut pairs = Vec::new();
    for (t, pose) in &estimate.samples {
        if *t < window.0 || *t > window.1 {
            continue;
        }
        if let Some((_, r)) = reference.nearest(*t, tol) {
            pairs.push((pose.translation, r.translation));
        }
    }
    pairs
}

/// Closed-form rigid alignment of the estimate onto the reference over the
/// start window. Falls back to a 4-DoF yaw-only fit when the point set is
/// degenerate (or when `force_yaw_only` is set).
pub fn align_trajectories(
    estimate: &Trajectory,
    reference: &Trajectory,
    window_s: f64,
    match_tol_s: f64,
    force_yaw_only: bool,
) -> Result<Alignment, EvalError> {
    let t0 = estimate.start_time().ok_or(EvalError::TooFewMatches(3))?;
    let pairs = match_positions(estimate, reference, (t0, t0 + window_s), match_tol_s);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewMatches(3));
    }
    let n = pairs.len() as f64;
    let mu_e: Vector3<f64> = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let mu_r: Vector3<f64> = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;

    if !force_yaw_only {
        let mut cov = Matrix3::zeros();
        for (e, r) in &pairs {
            cov += (r - mu_r) * (e - mu_e).transpose();
        }
        let svd = cov.svd(true, true);
        let sv = svd.singular_values;
        // Rank check: collinear windows cannot fix all three axes.
        if sv[1] > 1e-9 * sv[0].max(1e-300) {
            let u = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let mut s = Matrix3::identity();
            if (u * vt).determinant() < 0.0 {
                s[(2, 2)] = -1.0;
            }
            let r = u * s * vt;
            let rot = Rotation::from_matrix(&r);
            return Ok(Alignment {
                rotation: rot,
                translation: mu_r - rot * mu_e,
                yaw_only: false,
            });
        }
        log::warn!("alignment window is rank deficient; falling back to yaw-only");
    }

    // Yaw-only: maximize sum of horizontal dot products.
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, r) in &pairs {
        let de = e - mu_e;
        let dr = r - mu_r;
        num += de.x * dr.y - de.y * dr.x;
        den += de.x * dr.x + de.y * dr.y;
    }
    let yaw = if num.abs() < 1e-15 && den.abs() < 1e-15 {
        0.0
    } else {
        num.atan2(den)
    };
    let rot = Rotation::exp(Vector3::new(0.0, 0.0, yaw));
    Ok(Alignment {
        rotation: rot,
        translation: mu_r - rot * mu_e,
        yaw_only: true,
    })
}

#[derive(Debug, Clone)]
pub struct ErrorMetrics {
    pub rmse_m: f64,
    pub max_m: f64,
    /// RMSE / trajectory length, percent.
    pub drift_percent: f64,
    /// (sub-trajectory length m, mean relative position error m).
    pub relative_errors: Vec<(f64, f64)>,
}

/// RMSE and maximum position error over the end window after alignment,
/// plus relative position errors over fixed sub-trajectory lengths.
pub fn compute_errors(
    estimate: &Trajectory,
    alignment: &Alignment,
    reference_end: &Trajectory,
    end_window_s: f64,
    match_tol_s: f64,
) -> Result<ErrorMetrics, EvalError> {
    let t_end = estimate.end_time().ok_or(EvalError::EmptyWindow)?;
    let pairs = match_positions(
        estimate,
        reference_end,
        (t_end - end_window_s, t_end),
        match_tol_s,
    );
    if pairs.is_empty() {
        return Err(EvalError::EmptyWindow);
    }
    let mut sum2 = 0.0;
    let mut max = 0.0f64;
    for (e, r) in &pairs {
        let d = (alignment.apply(e) - r).norm();
        sum2 += d * d;
        max = max.max(d);
    }
    let rmse = (sum2 / pairs.len() as f64).sqrt();
    let length = estimate.length().max(1e-9);

    let relative_errors = relative_position_errors(estimate, alignment, reference_end, match_tol_s);

    Ok(ErrorMetrics {
        rmse_m: rmse,
        max_m: max,
        drift_percent: 100.0 * rmse / length,
        relative_errors,
    })
}

/// Mean relative position error over sub-trajectories of fixed lengths.
fn relative_position_errors(
    estimate: &Trajectory,
    alignment: &Alignment,
    reference: &Trajectory,
    tol: f64,
) -> Vec<(f64, f64)> {
    let lengths = [8.0, 16.0, 24.0, 32.0];
    // Cumulative distance along the aligned estimate.
    let mut cum = Vec::with_capacity(estimate.len());
    let mut acc = 0.0;
    for (i, (_, p)) in estimate.samples.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - estimate.samples[i - 1].1.translation).norm();
        }
        cum.push(acc);
    }
    let mut out = Vec::new();
    for target in lengths {
        let mut errs = Vec::new();
        let mut j = 0usize;
        for i in 0..estimate.len() {
            while j < estimate.len() && cum[j] - cum[i] < target {
                j += 1;
            }
            if j >= estimate.len() {
                break;
            }
            let (ti, pi) = &estimate.samples[i];
            let (tj, pj) = &estimate.samples[j];
            let (Some((_, ri)), Some((_, rj))) =
                (reference.nearest(*ti, tol), reference.nearest(*tj, tol))
            else {
                continue;
            };
            let de = alignment.apply(&pj.translation) - alignment.apply(&pi.translation);
            let dr = rj.translation - ri.translation;
            errs.push((de - dr).norm());
        }
        if !errs.is_empty() {
            out.push((target, errs.iter().sum::<f64>() / errs.len() as f64));
        }
    }
    out
}

/// Yaw angle of the relative rotation estimate-to-reference at the final
/// matched sample, radians.
pub fn final_heading_error(
    estimate: &Trajectory,
    reference: &Trajectory,
    match_tol_s: f64,
) -> Option<f64> {
    let (t, est) = estimate.samples.last()?;
    let (_, gt) = reference.nearest(*t, match_tol_s)?;
    let r_err = est.rotation.matrix() * gt.rotation.matrix().transpose();
    Some(
        (r_err[(1, 0)] - r_err[(0, 1)])
            .atan2(r_err[(0, 0)] + r_err[(1, 1)])
            .abs(),
    )
}
