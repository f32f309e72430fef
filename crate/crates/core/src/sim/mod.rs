//! Synthetic Atlanta-world generator and measurement synthesizer.
//!
//! Every output is a pure function of (scenario config, seed): scenes,
//! trajectories, IMU streams, rendered observations and patch textures are
//! all reproducible bit-for-bit for a fixed seed.

mod imu;
mod render;
pub mod trajectory;

pub use imu::synthesize_imu;
pub use render::{
    render_observations, FrameRender, RenderParams, RenderedPoint, RenderedSegment, SceneTextures,
    SimPatchSource,
};
pub use trajectory::{
    time_grid, EndCondition, GroundTruth, PathSpec, TrajectorySample, TrajectorySpec,
};

use crate::atlanta::{axis_rotation, heading_rotation, LineAxis};
use crate::estimator::{triangulate_line, LinePrior, LineView, TriangulationReport};
use crate::geom::{CameraModel, ImuSample, Pose, Rotation};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene requests zero lines and zero points")]
    EmptyScene,
    #[error("scene needs at least one world heading")]
    NoWorlds,
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
}

/// One ground-truth structural line: a base point plus an extent along the
/// axis direction of its world.
#[derive(Debug, Clone)]
pub struct SceneLine {
    pub id: usize,
    /// Index into [`SyntheticScene::worlds`].
    pub world_index: usize,
    pub axis: LineAxis,
    pub base: Vector3<f64>,
    /// Extent along the direction, meters, `extent.0 < extent.1`.
    pub extent: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ScenePoint {
    pub id: usize,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// True world headings, radians in [0, pi/2).
    pub worlds: Vec<f64>,
    pub lines: Vec<SceneLine>,
    pub points: Vec<ScenePoint>,
    /// Per-line texture seeds for patch synthesis.
    pub texture_seeds: Vec<u64>,
    pub background_seed: u64,
}

impl SyntheticScene {
    pub fn line_direction(&self, line: &SceneLine) -> Vector3<f64> {
        line_direction(self.worlds[line.world_index], line.axis)
    }

    pub fn line_endpoints(&self, line: &SceneLine) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.line_direction(line);
        (line.base + d * line.extent.0, line.base + d * line.extent.1)
    }
}

pub fn line_direction(phi: f64, axis: LineAxis) -> Vector3<f64> {
    heading_rotation(phi) * axis_rotation(axis) * Vector3::z()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub world_headings_deg: Vec<f64>,
    pub n_lines: usize,
    pub n_points: usize,
    /// Distance from the origin to the feature ring.
    #[serde(default = "default_wall_radius")]
    pub wall_radius: f64,
    #[serde(default = "default_wall_z")]
    pub wall_z: [f64; 2],
}

fn default_wall_radius() -> f64 {
    14.0
}

fn default_wall_z() -> [f64; 2] {
    [-0.5, 3.0]
}

/// Deterministic scene generation: lines cycle through (world, axis)
/// combinations (vertical lines first so they are always present) and are
/// scattered on a ring of walls around the trajectory region.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene, SimError> {
    if config.world_headings_deg.is_empty() {
        return Err(SimError::NoWorlds);
    }
    if config.n_lines == 0 && config.n_points == 0 {
        return Err(SimError::EmptyScene);
    }
    let worlds: Vec<f64> = config
        .world_headings_deg
        .iter()
        .map(|d| crate::atlanta::normalize_heading(d.to_radians()))
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5ce9e_5eed);

    let mut combos: Vec<(usize, LineAxis)> = Vec::new();
    for (wi, _) in worlds.iter().enumerate() {
        combos.push((wi, LineAxis::Z));
    }
    for (wi, _) in worlds.iter().enumerate() {
        combos.push((wi, LineAxis::X));
        combos.push((wi, LineAxis::Y));
    }

    let mut lines: Vec<SceneLine> = Vec::with_capacity(config.n_lines);
    let mut texture_seeds = Vec::with_capacity(config.n_lines);
    for id in 0..config.n_lines {
        let (world_index, axis) = combos[id % combos.len()];
        let dir = line_direction(worlds[world_index], axis);
        let mut placed = None;
        for _ in 0..64 {
            let beta = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = config.wall_radius + rng.gen_range(-1.0..1.5);
            let ring = Vector3::new(radius * beta.cos(), radius * beta.sin(), 0.0);
            let (base, extent) = match axis {
                LineAxis::Z => {
                    let z0 = rng.gen_range(config.wall_z[0]..config.wall_z[1] * 0.5);
                    let len: f64 = rng.gen_range(1.5..3.0);
                    (
                        Vector3::new(ring.x, ring.y, z0),
                        (0.0, len.min(config.wall_z[1] - z0)),
                    )
                }
                _ => {
                    let z = rng.gen_range(config.wall_z[0]..config.wall_z[1]);
                    let half = rng.gen_range(1.0..2.5);
                    (Vector3::new(ring.x, ring.y, z), (-half, half))
                }
            };
            // Keep parallel lines visually separable: reject placements
            // closer than a meter to an existing line of the same direction.
            let too_close = lines.iter().any(|l| {
                let d2 = line_direction(worlds[l.world_index], l.axis);
                if dir.cross(&d2).norm() > 1e-6 {
                    return false;
                }
                let delta = base - l.base;
                (delta - dir * delta.dot(&dir)).norm() < 1.0
            });
            if !too_close {
                placed = Some((base, extent));
                break;
            }
        }
        let Some((base, extent)) = placed else {
            continue;
        };
        let _ = id;
        lines.push(SceneLine {
            id: lines.len(),
            world_index,
            axis,
            base,
            extent,
        });
        texture_seeds.push(rng.gen());
    }

    let mut points = Vec::with_capacity(config.n_points);
    for id in 0..config.n_points {
        let beta = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = config.wall_radius + rng.gen_range(-2.0..2.0);
        points.push(ScenePoint {
            id,
            position: Vector3::new(
                radius * beta.cos(),
                radius * beta.sin(),
                rng.gen_range(config.wall_z[0]..config.wall_z[1]),
            ),
        });
    }

    Ok(SyntheticScene {
        worlds,
        lines,
        points,
        texture_seeds,
        background_seed: rng.gen(),
    })
}

/// Sensor noise and initial bias specification. A zeroed spec produces
/// perfect measurements.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NoiseSpec {
    #[serde(default)]
    pub gyro_noise_density: f64,
    #[serde(default)]
    pub accel_noise_density: f64,
    #[serde(default)]
    pub gyro_bias_walk: f64,
    #[serde(default)]
    pub accel_bias_walk: f64,
    /// Point observation noise, pixels.
    #[serde(default)]
    pub pixel_sigma: f64,
    /// Segment endpoint noise, pixels.
    #[serde(default)]
    pub endpoint_sigma: f64,
    #[serde(default)]
    pub init_gyro_bias: [f64; 3],
    #[serde(default)]
    pub init_accel_bias: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatesConfig {
    pub imu_hz: f64,
    pub cam_hz: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig {
            imu_hz: 200.0,
            cam_hz: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrinsicsConfig {
    /// `^I_C q`, scalar first.
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl ExtrinsicsConfig {
    /// Camera z forward along body x, camera x along body -y (z-up body).
    pub fn forward_facing() -> Self {
        let r = Rotation::from_matrix(&Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        ));
        let [w, x, y, z] = r.wxyz();
        ExtrinsicsConfig {
            rotation_wxyz: [w, x, y, z],
            translation: [0.05, 0.0, 0.0],
        }
    }

    pub fn pose(&self) -> Pose {
        let [w, x, y, z] = self.rotation_wxyz;
        Pose::new(
            Rotation::from_quaternion(w, x, y, z),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }
}

impl Default for ExtrinsicsConfig {
    fn default() -> Self {
        Self::forward_facing()
    }
}

fn default_camera() -> CameraModel {
    CameraModel {
        fx: 458.0,
        fy: 458.0,
        cx: 376.0,
        cy: 240.0,
        omega: 0.0,
        width: 752,
        height: 480,
    }
}

/// Complete synthetic-run description, loadable from a TOML scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub scene: SceneConfig,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_camera")]
    pub camera: CameraModel,
    #[serde(default)]
    pub extrinsics: ExtrinsicsConfig,
    #[serde(default)]
    pub render: RenderParams,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// One rendered camera frame.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub t_ns: u64,
    pub t: f64,
    pub render: FrameRender,
}

/// Everything a pipeline run (or a dataset export) needs.
pub struct SimulatedRun {
    pub scenario: Scenario,
    pub scene: SyntheticScene,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<SimFrame>,
    /// Ground-truth body poses at the camera timestamps.
    pub gt: Vec<(f64, Pose)>,
    pub textures: Arc<SceneTextures>,
    pub ground_truth: GroundTruth,
}

impl SimulatedRun {
    pub fn cam_pose_at(&self, t: f64) -> Pose {
        self.ground_truth.sample(t).pose * self.scenario.extrinsics.pose()
    }
}

/// Runs the full synthesizer: scene, trajectory, IMU stream and per-frame
/// renders.
pub fn simulate_run(scenario: &Scenario) -> Result<SimulatedRun, SimError> {
    let scene = generate_scene(&scenario.scene, scenario.seed)?;
    let ground_truth = GroundTruth::new(&scenario.trajectory)?;
    let duration = ground_truth.total_duration;

    let imu = synthesize_imu(
        &ground_truth,
        &scenario.noise,
        scenario.rates.imu_hz,
        duration,
        9.81,
        scenario.seed,
    );

    let textures = Arc::new(SceneTextures::new(&scene));
    let ext = scenario.extrinsics.pose();
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    let mut frame_rng = ChaCha12Rng::seed_from_u64(scenario.seed ^ 0xf8a3e5);
    for t_ns in time_grid(duration, scenario.rates.cam_hz) {
        let t = t_ns as f64 * 1e-9;
        let sample = ground_truth.sample(t);
        let cam_pose = sample.pose * ext;
        let render = render_observations(
            &scene,
            &cam_pose,
            &scenario.camera,
            &scenario.render,
            scenario.noise.endpoint_sigma,
            scenario.noise.pixel_sigma,
            &mut frame_rng,
        );
        frames.push(SimFrame { t_ns, t, render });
        gt.push((t, sample.pose));
    }

    Ok(SimulatedRun {
        scenario: scenario.clone(),
        scene,
        imu,
        frames,
        gt,
        textures,
        ground_truth,
    })
}

/// One-shot Gauss-Newton over a full track with a diffuse prior: the
/// reference the windowed accumulate-then-triangulate path is compared to.
pub fn batch_oracle(
    line: &crate::atlanta::StructuralLine,
    views: &[LineView],
    phi: f64,
    anchor_origin: Vector3<f64>,
    cam: &CameraModel,
    sigma_im: f64,
) -> Result<(Vector2<f64>, TriangulationReport), crate::estimator::EstimatorError> {
    let prior = LinePrior::diffuse(line.theta, line.rho);
    triangulate_line(line, &prior, views, phi, anchor_origin, cam, sigma_im)
}
