//! Dataset ingestion and export.
//!
//! The on-disk layout follows the EuRoC ASL convention so synthetic
//! exports and real recordings load identically:
//!
//! ```text
//! <root>/                      (or <root>/mav0/)
//!   imu0/data.csv              timestamp_ns,wx,wy,wz,ax,ay,az
//!   cam0/data.csv              timestamp_ns,filename
//!   cam0/data/<filename>       image (real data) or detection file (*.txt)
//!   state_groundtruth_estimate0/data.csv   optional reference trajectory
//! ```
//!
//! Detection files replace a real line detector. One file per frame:
//!
//! ```text
//! frame <timestamp_ns> <n_segments>
//! seg <x1> <y1> <x2> <y2>            # undistorted pixels
//! patch <cx> <cy> <side> <v...>      # optional, attaches to previous seg
//! pt <track_id> <x> <y>              # optional point observations
//! ```

use crate::atlanta::LineSegment2D;
use crate::eval::Trajectory;
use crate::geom::{ImuSample, Pose, Rotation};
use crate::sim::{SimPatchSource, SimulatedRun};
use crate::tracker::{Patch, PatchSource};
use nalgebra::{Vector2, Vector3};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("missing required file {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Per-frame detections standing in for a real front end.
#[derive(Debug, Clone, Default)]
pub struct DetectionFrame {
    pub segments: Vec<LineSegment2D>,
    /// Patch payloads per segment (possibly empty).
    pub patches: Vec<Vec<Patch>>,
    /// Point observations with stable front-end track ids.
    pub points: Vec<(u64, Vector2<f64>)>,
}

#[derive(Debug, Clone)]
pub enum FrameData {
    Detections(DetectionFrame),
    /// Real imagery needs an external detector; the pipeline rejects it.
    ImagePath(PathBuf),
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub t_ns: u64,
    pub t: f64,
    pub data: FrameData,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub imu_ns: Vec<u64>,
    pub frames: Vec<FrameRecord>,
    pub ground_truth: Option<Trajectory>,
}

/// Loads an EuRoC-layout dataset from `dir` (or `dir/mav0`).
pub fn load_euroc(dir: &Path) -> Result<Dataset, DataError> {
    let base = if dir.join("mav0").is_dir() {
        dir.join("mav0")
    } else {
        dir.to_path_buf()
    };
    let imu_csv = base.join("imu0/data.csv");
    let cam_csv = base.join("cam0/data.csv");
    if !imu_csv.is_file() {
        return Err(DataError::Missing(imu_csv));
    }
    if !cam_csv.is_file() {
        return Err(DataError::Missing(cam_csv));
    }

    let mut imu = Vec::new();
    let mut imu_ns = Vec::new();
    for (ln, fields) in csv_rows(&imu_csv)? {
        if fields.len() != 7 {
            return Err(parse_err(
                &imu_csv,
                ln,
                format!("expected 7 columns, found {}", fields.len()),
            ));
        }
        let t_ns: u64 = fields[0]
            .parse()
            .map_err(|e| parse_err(&imu_csv, ln, format!("bad timestamp: {e}")))?;
        let mut v = [0.0f64; 6];
        for (i, f) in fields[1..].iter().enumerate() {
            v[i] = f
                .parse()
                .map_err(|e| parse_err(&imu_csv, ln, format!("bad number {f:?}: {e}")))?;
        }
        if let Some(&last) = imu_ns.last() {
            if t_ns <= last {
                return Err(parse_err(&imu_csv, ln, "non-monotonic timestamp"));
            }
        }
        imu_ns.push(t_ns);
        imu.push(ImuSample {
            t: t_ns as f64 * 1e-9,
            gyro: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        });
    }

    let mut frames = Vec::new();
    let mut last_ns: Option<u64> = None;
    for (ln, fields) in csv_rows(&cam_csv)? {
        if fields.len() != 2 {
            return Err(parse_err(
                &cam_csv,
                ln,
                format!("expected 2 columns, found {}", fields.len()),
            ));
        }
        let t_ns: u64 = fields[0]
            .parse()
            .map_err(|e| parse_err(&cam_csv, ln, format!("bad timestamp: {e}")))?;
        if let Some(last) = last_ns {
            if t_ns <= last {
                return Err(parse_err(&cam_csv, ln, "non-monotonic timestamp"));
            }
        }
        last_ns = Some(t_ns);
        let file = base.join("cam0/data").join(&fields[1]);
        let data = if fields[1].ends_with(".txt") {
            FrameData::Detections(load_detection_file(&file)?)
        } else {
            FrameData::ImagePath(file)
        };
        frames.push(FrameRecord {
            t_ns,
            t: t_ns as f64 * 1e-9,
            data,
        });
    }

    let gt_csv = base.join("state_groundtruth_estimate0/data.csv");
    let ground_truth = if gt_csv.is_file() {
        Some(load_groundtruth(&gt_csv)?)
    } else {
        None
    };

    Ok(Dataset {
        imu,
        imu_ns,
        frames,
        ground_truth,
    })
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>, DataError> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        rows.push((i + 1, s.split(',').map(|c| c.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn load_groundtruth(path: &Path) -> Result<Trajectory, DataError> {
    let mut samples = Vec::new();
    for (ln, fields) in csv_rows(path)? {
        if fields.len() < 8 {
            return Err(parse_err(
                path,
                ln,
                format!("expected at least 8 columns, found {}", fields.len()),
            ));
        }
        let t_ns: u64 = fields[0]
            .parse()
            .map_err(|e| parse_err(path, ln, format!("bad timestamp: {e}")))?;
        let mut v = [0.0f64; 7];
        for (i, f) in fields[1..8].iter().enumerate() {
            v[i] = f
                .parse()
                .map_err(|e| parse_err(path, ln, format!("bad number {f:?}: {e}")))?;
        }
        samples.push((
            t_ns as f64 * 1e-9,
            Pose::new(
                Rotation::from_quaternion(v[3], v[4], v[5], v[6]),
                Vector3::new(v[0], v[1], v[2]),
            ),
        ));
    }
    Trajectory::new(samples).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Parses one per-frame detection file.
pub fn load_detection_file(path: &Path) -> Result<DetectionFrame, DataError> {
    let f = std::fs::File::open(path)
        .map_err(|_| DataError::Missing(path.to_path_buf()))?;
    let reader = std::io::BufReader::new(f);
    let mut out = DetectionFrame::default();
    let mut declared = None;
    for (i, line) in reader.lines().enumerate() {
        let ln = i + 1;
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = s.split_whitespace().collect();
        let tag = fields[0];
        let nums = |want: usize| -> Result<Vec<f64>, DataError> {
            if fields.len() != want + 1 {
                return Err(parse_err(
                    path,
                    ln,
                    format!("{tag}: expected {want} values, found {}", fields.len() - 1),
                ));
            }
            fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| parse_err(path, ln, format!("bad number {f:?}: {e}")))
                })
                .collect()
        };
        match tag {
            "frame" => {
                let v = nums(2)?;
                declared = Some(v[1] as usize);
            }
            "seg" => {
                let v = nums(4)?;
                out.segments.push(LineSegment2D::new(
                    Vector2::new(v[0], v[1]),
                    Vector2::new(v[2], v[3]),
                    0,
                ));
                out.patches.push(Vec::new());
            }
            "patch" => {
                if out.segments.is_empty() {
                    return Err(parse_err(path, ln, "patch before any seg record"));
                }
                if fields.len() < 4 {
                    return Err(parse_err(path, ln, "patch: missing header values"));
                }
                let cx: f64 = fields[1]
                    .parse()
                    .map_err(|e| parse_err(path, ln, format!("bad cx: {e}")))?;
                let cy: f64 = fields[2]
                    .parse()
                    .map_err(|e| parse_err(path, ln, format!("bad cy: {e}")))?;
                let side: usize = fields[3]
                    .parse()
                    .map_err(|e| parse_err(path, ln, format!("bad side: {e}")))?;
                if fields.len() != 4 + side * side {
                    return Err(parse_err(
                        path,
                        ln,
                        format!("patch: expected {} values, found {}", side * side, fields.len() - 4),
                    ));
                }
                let mut data = Vec::with_capacity(side * side);
                for f in &fields[4..] {
                    data.push(
                        f.parse::<f32>()
                            .map_err(|e| parse_err(path, ln, format!("bad value {f:?}: {e}")))?,
                    );
                }
                out.patches
                    .last_mut()
                    .unwrap()
                    .push(Patch::new(side, data, Vector2::new(cx, cy)));
            }
            "pt" => {
                let v = nums(3)?;
                out.points.push((v[0] as u64, Vector2::new(v[1], v[2])));
            }
            other => {
                return Err(parse_err(path, ln, format!("unknown record {other:?}")));
            }
        }
    }
    if let Some(n) = declared {
        if n != out.segments.len() {
            return Err(parse_err(
                path,
                0,
                format!("frame declared {n} segments, found {}", out.segments.len()),
            ));
        }
    }
    Ok(out)
}

/// Patch lookup over stored detection-file payloads: nearest payload of the
/// queried segment.
pub struct FilePatchSource {
    pub patches: Vec<Vec<Patch>>,
}

impl PatchSource for FilePatchSource {
    fn patch_at(&self, seg_index: usize, center: Vector2<f64>, side: usize) -> Option<Patch> {
        let list = self.patches.get(seg_index)?;
        list.iter()
            .filter(|p| p.side == side)
            .min_by(|a, b| {
                (a.center - center)
                    .norm()
                    .partial_cmp(&(b.center - center).norm())
                    .unwrap()
            })
            .cloned()
    }
}

/// Options for synthetic dataset export.
#[derive(Debug, Clone, Copy)]
pub struct ExportOptions {
    pub with_patches: bool,
    pub patches_per_segment: usize,
    pub patch_side: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            with_patches: true,
            patches_per_segment: 5,
            patch_side: 11,
        }
    }
}

/// Writes a simulated run as an EuRoC-layout dataset with detection files.
pub fn export_synthetic(
    run: &SimulatedRun,
    out_dir: &Path,
    options: &ExportOptions,
) -> Result<(), DataError> {
    std::fs::create_dir_all(out_dir.join("imu0"))?;
    std::fs::create_dir_all(out_dir.join("cam0/data"))?;
    std::fs::create_dir_all(out_dir.join("state_groundtruth_estimate0"))?;

    let mut imu_csv = BufWriter::new(std::fs::File::create(out_dir.join("imu0/data.csv"))?);
    writeln!(imu_csv, "#timestamp [ns],w_RS_S_x,w_RS_S_y,w_RS_S_z,a_RS_S_x,a_RS_S_y,a_RS_S_z")?;
    for s in &run.imu {
        let t_ns = (s.t * 1e9).round() as u64;
        writeln!(
            imu_csv,
            "{},{},{},{},{},{},{}",
            t_ns, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }

    let mut cam_csv = BufWriter::new(std::fs::File::create(out_dir.join("cam0/data.csv"))?);
    writeln!(cam_csv, "#timestamp [ns],filename")?;
    for frame in &run.frames {
        let name = format!("{}.txt", frame.t_ns);
        writeln!(cam_csv, "{},{name}", frame.t_ns)?;
        let mut det = BufWriter::new(std::fs::File::create(out_dir.join("cam0/data").join(&name))?);
        writeln!(det, "frame {} {}", frame.t_ns, frame.render.segments.len())?;
        let source = SimPatchSource {
            textures: run.textures.clone(),
            segments: frame.render.segments.clone(),
        };
        for (si, rs) in frame.render.segments.iter().enumerate() {
            writeln!(
                det,
                "seg {} {} {} {}",
                rs.seg.a.x, rs.seg.a.y, rs.seg.b.x, rs.seg.b.y
            )?;
            if options.with_patches {
                for k in 0..options.patches_per_segment {
                    let s = k as f64 / (options.patches_per_segment - 1).max(1) as f64;
                    let c = rs.seg.a + (rs.seg.b - rs.seg.a) * s;
                    if let Some(p) = source.patch_at(si, c, options.patch_side) {
                        write!(det, "patch {} {} {}", c.x, c.y, p.side)?;
                        for v in &p.data {
                            write!(det, " {}", v)?;
                        }
                        writeln!(det)?;
                    }
                }
            }
        }
        for p in &frame.render.points {
            writeln!(det, "pt {} {} {}", p.id, p.px.x, p.px.y)?;
        }
    }

    let mut gt_csv = BufWriter::new(std::fs::File::create(
        out_dir.join("state_groundtruth_estimate0/data.csv"),
    )?);
    writeln!(
        gt_csv,
        "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z []"
    )?;
    for (frame, (_, pose)) in run.frames.iter().zip(&run.gt) {
        let p = pose.translation;
        let [w, x, y, z] = pose.rotation.wxyz();
        writeln!(
            gt_csv,
            "{},{},{},{},{},{},{},{}",
            frame.t_ns, p.x, p.y, p.z, w, x, y, z
        )?;
    }
    Ok(())
}
