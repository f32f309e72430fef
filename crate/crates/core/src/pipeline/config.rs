//! Run configuration, loadable from a TOML file.
//!
//! Every constant the estimator depends on is surfaced here with its
//! default: heading uncertainty sigma_phi = 5 deg, world merge separation
//! delta_phi = 5 deg, ZNCC threshold 0.6, chi-squared confidence 0.95,
//! reprojection gate 4 px, feature budgets 125 points / 30 lines.

use crate::filter::ImuNoiseParams;
use crate::geom::{CameraModel, Pose};
use crate::sim::ExtrinsicsConfig;
use crate::tracker::{ClassifyParams, RansacParams, TrackParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructuralMode {
    /// Points only; all line machinery disabled.
    PointOnly,
    /// Points plus lines without the shared structural prior: each line
    /// keeps the fixed heading it was detected with.
    PointLine,
    /// Full Atlanta-world estimation with refined headings.
    StructVio,
}

impl std::fmt::Display for StructuralMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StructuralMode::PointOnly => write!(f, "point-only"),
            StructuralMode::PointLine => write!(f, "point-line"),
            StructuralMode::StructVio => write!(f, "structvio"),
        }
    }
}

impl std::str::FromStr for StructuralMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-only" => Ok(StructuralMode::PointOnly),
            "point-line" => Ok(StructuralMode::PointLine),
            "structvio" => Ok(StructuralMode::StructVio),
            other => Err(format!(
                "unknown mode {other:?} (expected point-only, point-line or structvio)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Maximum number of cloned poses in the window.
    pub m_max: usize,
    /// Line measurement noise, pixels.
    pub sigma_im_line: f64,
    /// Point measurement noise, pixels.
    pub sigma_im_point: f64,
    pub chi2_confidence: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            m_max: 30,
            sigma_im_line: 1.5,
            sigma_im_point: 1.0,
            chi2_confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureBudgets {
    pub max_points: usize,
    pub max_lines: usize,
    /// Minimum point triangulation parallax, degrees.
    pub min_parallax_deg: f64,
}

impl Default for FeatureBudgets {
    fn default() -> Self {
        FeatureBudgets {
            max_points: 125,
            max_lines: 30,
            min_parallax_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureParams {
    pub mode: StructuralMode,
    /// Preset heading standard deviation of a new world, degrees.
    pub sigma_phi_deg: f64,
    /// Worlds closer than this merge, degrees.
    pub delta_phi_deg: f64,
    /// Preset inverse depth of a fresh line, 1/m.
    pub rho0: f64,
    /// Preset inverse-depth standard deviation (covers 0.2 m to infinity).
    pub sigma_rho0: f64,
    /// Segment detector error used for theta_0 uncertainty, pixels.
    pub detection_sigma_px: f64,
    /// Post-update reprojection gate, pixels.
    pub reprojection_threshold_px: f64,
    pub enable_accumulation: bool,
    /// When false only the first detected world is kept (Manhattan mode).
    pub enable_multi_world: bool,
    /// A horizontal segment is only initialized into a world whose heading
    /// agrees with the segment's own horizon-intersection heading within
    /// this bound, degrees. Segments of a yet-undetected world otherwise
    /// look consistent with a registered one in unlucky view geometries.
    pub max_init_heading_dev_deg: f64,
}

impl Default for StructureParams {
    fn default() -> Self {
        StructureParams {
            mode: StructuralMode::StructVio,
            sigma_phi_deg: 5.0,
            delta_phi_deg: 5.0,
            rho0: 0.5,
            sigma_rho0: 5.0,
            detection_sigma_px: 3.0,
            reprojection_threshold_px: 4.0,
            enable_accumulation: true,
            enable_multi_world: true,
            max_init_heading_dev_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingParams {
    pub track: TrackParams,
    pub classify: ClassifyParams,
    pub ransac: RansacParams,
    /// New segments closer than this to an existing projection are not
    /// initialized, pixels.
    pub suppress_px: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        TrackingParams {
            track: TrackParams::default(),
            classify: ClassifyParams::default(),
            ransac: RansacParams::default(),
            suppress_px: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct InitParams {
    /// Accelerometer averaging window for the initial roll/pitch, seconds.
    pub accel_window_s: f64,
    pub sigma_roll_pitch_deg: f64,
    pub sigma_velocity: f64,
    pub sigma_gyro_bias: f64,
    pub sigma_accel_bias: f64,
    pub sigma_extrinsics_rot_deg: f64,
    pub sigma_extrinsics_trans: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        InitParams {
            accel_window_s: 0.5,
            sigma_roll_pitch_deg: 0.5,
            sigma_velocity: 0.05,
            sigma_gyro_bias: 0.01,
            sigma_accel_bias: 0.05,
            sigma_extrinsics_rot_deg: 0.0,
            sigma_extrinsics_trans: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Alignment window at the start of the trajectory, seconds.
    pub align_window_s: f64,
    /// Error window at the end, seconds.
    pub end_window_s: f64,
    /// Nearest-timestamp matching tolerance, seconds.
    pub match_tol_s: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            align_window_s: 5.0,
            end_window_s: 5.0,
            match_tol_s: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub camera: CameraModel,
    #[serde(default)]
    pub extrinsics: ExtrinsicsConfig,
    #[serde(default)]
    pub imu: ImuNoiseParams,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub features: FeatureBudgets,
    #[serde(default)]
    pub structure: StructureParams,
    #[serde(default)]
    pub tracking: TrackingParams,
    #[serde(default)]
    pub init: InitParams,
    #[serde(default)]
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn with_camera(camera: CameraModel) -> Self {
        RunConfig {
            camera,
            extrinsics: ExtrinsicsConfig::default(),
            imu: ImuNoiseParams::default(),
            filter: FilterParams::default(),
            features: FeatureBudgets::default(),
            structure: StructureParams::default(),
            tracking: TrackingParams::default(),
            init: InitParams::default(),
            eval: EvalParams::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn extrinsics_pose(&self) -> Pose {
        self.extrinsics.pose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_surface_paper_constants() {
        let c = RunConfig::with_camera(CameraModel {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            omega: 0.0,
            width: 1,
            height: 1,
        });
        assert_eq!(c.structure.sigma_phi_deg, 5.0);
        assert_eq!(c.structure.delta_phi_deg, 5.0);
        assert_eq!(c.structure.sigma_rho0, 5.0);
        assert_eq!(c.structure.reprojection_threshold_px, 4.0);
        assert_eq!(c.tracking.track.zncc_threshold, 0.6);
        assert_eq!(c.filter.chi2_confidence, 0.95);
        assert_eq!(c.features.max_points, 125);
        assert_eq!(c.features.max_lines, 30);
        assert_eq!(c.filter.m_max, 30);
        assert_eq!(c.tracking.ransac.min_inliers, 4);
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::with_camera(CameraModel {
            fx: 458.0,
            fy: 457.0,
            cx: 367.0,
            cy: 248.0,
            omega: 0.9,
            width: 752,
            height: 480,
        });
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.camera, c.camera);
        assert_eq!(back.structure.mode, StructuralMode::StructVio);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let text = r#"
[camera]
fx = 400.0
fy = 400.0
cx = 320.0
cy = 240.0
width = 640
height = 480

[structure]
mode = "point-only"
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.structure.mode, StructuralMode::PointOnly);
        assert_eq!(c.filter.m_max, 30);
        assert_eq!(c.structure.sigma_phi_deg, 5.0);
    }
}
