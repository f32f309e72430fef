use atlanta_vio::atlanta::{line_point_at, world_from_param_rotation};
use atlanta_vio::geom::CameraModel;
use atlanta_vio::pipeline::{frames_from_sim, RunConfig, StructuralMode, Vio};
use atlanta_vio::sim::*;
use nalgebra::Vector3;

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
    if let Ok(v) = std::env::var("SIGL") { c.filter.sigma_im_line = v.parse().unwrap(); }
    c.imu.gyro_noise_density = 1e-5;
    c.imu.accel_noise_density = 1e-4;
    c.imu.gyro_bias_walk = 1e-7;
    c.imu.accel_bias_walk = 1e-6;
    if let Ok(v) = std::env::var("ANGLE") { let a: f64 = v.parse().unwrap(); c.tracking.classify.max_angle_deg = a; c.tracking.ransac.classify.max_angle_deg = a; }
    let frames = frames_from_sim(&run);
    let mut vio = Vio::new(c, 3);
    for (fi, frame) in frames.iter().enumerate() {
        vio.process_frame(frame, &run.imu).unwrap();
        if fi % 10 != 9 { continue; }
        println!("=== frame {fi} t={:.1}", frame.t);
        for t in vio.line_tracks() {
            let Some(gt_id) = t.gt_id else { println!("  track {} NO GT", t.track_id); continue };
            let sl = &run.scene.lines[gt_id];
            // GT direction vs assigned axis direction
            let gt_dir = run.scene.line_direction(sl);
            let phi = vio.state.worlds.phi(t.line.world_id);
            let est_dir = world_from_param_rotation(t.line.axis, phi) * Vector3::z();
            let dir_err = gt_dir.cross(&est_dir).norm().asin().to_degrees();
            // GT (theta, rho) wrt track anchor
            let anchor = vio.state.camera_position(t.line.anchor_pose_id).unwrap();
            let l_rot = world_from_param_rotation(t.line.axis, phi);
            let u = l_rot.transpose() * (sl.base - anchor);
            let gt_theta = u.y.atan2(u.x);
            let gt_rho = 1.0 / (u.x * u.x + u.y * u.y).sqrt();
            // current reprojection residual at last obs
            let mid = line_point_at(&t.line, phi, &anchor, 0.5 * (t.line.range.0 + t.line.range.1)).ok();
            let _ = mid;
            println!(
                "  track {:3} gt {:2} obs {:2} dir_err {:6.2} deg  (th {:+.3} vs {:+.3})  (rho {:.3} vs {:.3}) tri={}",
                t.track_id, gt_id, t.observations.len(), dir_err, t.line.theta, gt_theta, t.line.rho, gt_rho, t.triangulated
            );
        }
        if fi > 170 { break; }
    }
}
// residual audit appended via separate binary? no - inline edit below
