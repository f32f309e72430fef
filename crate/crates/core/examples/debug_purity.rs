use atlanta_vio::geom::CameraModel;
use atlanta_vio::pipeline::{frames_from_sim, RunConfig, StructuralMode, Vio};
use atlanta_vio::sim::*;

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
    c.features.max_points = 0;
    c.imu.gyro_noise_density = 1e-5;
    c.imu.accel_noise_density = 1e-4;
    c.imu.gyro_bias_walk = 1e-7;
    c.imu.accel_bias_walk = 1e-6;
    let frames = frames_from_sim(&run);
    let mut vio = Vio::new(c, 3);
    // Map from (rounded time) -> rendered segments with gt ids.
    let mut total = 0usize;
    let mut impure = 0usize;
    for frame in frames.iter() {
        vio.process_frame(frame, &run.imu).unwrap();
        // After processing, audit each track's newest observation by finding
        // the rendered segment with the same endpoints in this frame.
        for t in vio.line_tracks() {
            let Some((cid, seg)) = t.observations.last() else { continue };
            let clone_t = vio.state.clone_by_id(*cid).map(|c| c.timestamp).unwrap_or(-1.0);
            if (clone_t - frame.t).abs() > 1e-9 { continue; }
            let sf = run.frames.iter().find(|f| (f.t - frame.t).abs() < 1e-9).unwrap();
            let mut best = (f64::INFINITY, usize::MAX);
            for rs in &sf.render.segments {
                let d = (rs.seg.a - seg.a).norm() + (rs.seg.b - seg.b).norm();
                if d < best.0 { best = (d, rs.line_id); }
            }
            total += 1;
            if let Some(gt) = t.gt_id {
                if best.1 != gt {
                    impure += 1;
                    if impure < 20 {
                        println!("t={:.1} track {} first-gt {} now-matched {} (d={:.2})", frame.t, t.track_id, gt, best.1, best.0);
                    }
                }
            }
        }
    }
    println!("impure {}/{}", impure, total);
}
