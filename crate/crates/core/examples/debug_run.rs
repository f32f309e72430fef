use atlanta_vio::eval::Trajectory;
use atlanta_vio::geom::CameraModel;
use atlanta_vio::pipeline::{frames_from_sim, run_vio, RunConfig, StructuralMode};
use atlanta_vio::sim::*;

fn scenario_nlines(_c: &mut RunConfig) {}

fn main() {
    let camera = CameraModel { fx: 458.0, fy: 458.0, cx: 376.0, cy: 240.0, omega: 0.0, width: 752, height: 480 };
    let waypoints = vec![
        [0.0, 0.0, 0.0, 0.0],
        [4.0, 0.0, 0.0, 45.0],
        [5.5, 3.0, 0.2, 110.0],
        [3.0, 5.5, 0.0, 180.0],
        [0.0, 5.0, 0.1, 230.0],
        [-1.5, 2.0, 0.0, 300.0],
        [0.0, 0.0, 0.0, 360.0],
    ];
    let scenario = Scenario {
        seed: 3,
        scene: SceneConfig { world_headings_deg: vec![0.0, 45.0], n_lines: 40, n_points: 60, wall_radius: 12.0, wall_z: [-0.5, 3.0] },
        trajectory: TrajectorySpec { path: PathSpec::Waypoints { points: waypoints, end: EndCondition::Rest }, duration_s: 28.0, settle_s: 1.0 },
        rates: RatesConfig { imu_hz: 200.0, cam_hz: 10.0 },
        noise: Default::default(),
        camera,
        extrinsics: Default::default(),
        render: Default::default(),
    };
    let run = simulate_run(&scenario).unwrap();
    let mut c = RunConfig::with_camera(camera);
    c.structure.mode = StructuralMode::StructVio;
    c.filter.m_max = 15;
    c.imu.gyro_noise_density = 1e-5;
    c.imu.accel_noise_density = 1e-4;
    c.imu.gyro_bias_walk = 1e-7;
    c.imu.accel_bias_walk = 1e-6;
    if let Ok(v) = std::env::var("ANGLE") { let a: f64 = v.parse().unwrap(); c.tracking.classify.max_angle_deg = a; c.tracking.ransac.classify.max_angle_deg = a; }
    if let Ok(v) = std::env::var("SIGL") { c.filter.sigma_im_line = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("NLINES") { scenario_nlines(&mut c); let _ = v; }
    c.features.max_points = std::env::var("NOPTS").map(|_| 0).unwrap_or(125);
    c.features.max_lines = std::env::var("NOLINES").map(|_| 0).unwrap_or(30);
    let out = run_vio(&c, &run.imu, frames_from_sim(&run), 3).unwrap();
    let gt = Trajectory::new(run.gt.clone()).unwrap();
    for ((t, pose), d) in out.trajectory.samples.iter().zip(&out.diagnostics) {
        let g = gt.nearest(*t, 0.02).unwrap();
        let err = (pose.translation - g.1.translation).norm();
        println!(
            "t={:6.2} err={:9.6} lines={:2} pts={:3} worlds={} blocks={:2} rej={:2} dim={}",
            t, err, d.active_lines, d.active_points, d.headings.len(), d.blocks_built, d.blocks_rejected, d.state_dim
        );
    }
}
