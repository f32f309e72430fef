//! Observation rendering and synthetic patch textures.
//!
//! Lines clip against the near plane, project through the camera, clip to
//! the image rectangle and receive endpoint noise. Each segment remembers
//! the range parameters and depths of its visible endpoints so a pixel on
//! the segment maps back (perspective-correct) to a position along the 3D
//! line; patches are band-limited 1D textures of that position, which makes
//! ZNCC matching behave like on real imagery: a correct association scores
//! near one, crossed lines decorrelate.

use super::{SceneLine, SyntheticScene};
use crate::atlanta::LineSegment2D;
use crate::geom::{CameraModel, Pose};
use crate::tracker::{Patch, PatchSource};
use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenderParams {
    /// Features farther than this from the camera are dropped, meters.
    pub max_range: f64,
    /// Minimum projected segment length, pixels.
    pub min_segment_px: f64,
    pub near_plane: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            max_range: 25.0,
            min_segment_px: 15.0,
            near_plane: 0.1,
        }
    }
}

/// A rendered (noisy) segment plus the bookkeeping to invert pixel
/// positions back to line-range coordinates.
#[derive(Debug, Clone)]
pub struct RenderedSegment {
    pub seg: LineSegment2D,
    pub line_id: usize,
    /// Range parameters of the visible endpoints along the line direction,
    /// measured from the line's base point.
    pub r_a: f64,
    pub r_b: f64,
    /// Camera-frame depths of the endpoints, for perspective-correct
    /// interpolation.
    pub z_a: f64,
    pub z_b: f64,
}

impl RenderedSegment {
    /// Range coordinate of a pixel on (or near) the segment.
    pub fn range_at_pixel(&self, p: Vector2<f64>) -> f64 {
        let d = self.seg.b - self.seg.a;
        let len2 = d.norm_squared();
        let s = if len2 < 1e-12 {
            0.0
        } else {
            ((p - self.seg.a).dot(&d) / len2).clamp(0.0, 1.0)
        };
        let wa = (1.0 - s) / self.z_a;
        let wb = s / self.z_b;
        (wa * self.r_a + wb * self.r_b) / (wa + wb)
    }
}

#[derive(Debug, Clone)]
pub struct RenderedPoint {
    pub id: usize,
    pub px: Vector2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameRender {
    pub segments: Vec<RenderedSegment>,
    pub points: Vec<RenderedPoint>,
}

/// Projects the visible scene into one camera frame.
pub fn render_observations<R: Rng>(
    scene: &SyntheticScene,
    cam_pose: &Pose,
    cam: &CameraModel,
    params: &RenderParams,
    endpoint_sigma: f64,
    pixel_sigma: f64,
    rng: &mut R,
) -> FrameRender {
    let inv = cam_pose.inverse();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise2 = |sigma: f64, rng: &mut R| {
        if sigma > 0.0 {
            Vector2::new(normal.sample(rng) * sigma, normal.sample(rng) * sigma)
        } else {
            Vector2::zeros()
        }
    };

    let mut segments = Vec::new();
    for line in &scene.lines {
        if let Some(seg) = project_scene_line(scene, line, &inv, cam, params) {
            let mut seg = seg;
            let na = noise2(endpoint_sigma, rng);
            let nb = noise2(endpoint_sigma, rng);
            seg.seg.a += na;
            seg.seg.b += nb;
            segments.push(seg);
        }
    }

    let mut points = Vec::new();
    for p in &scene.points {
        let p_c = inv.transform_point(&p.position);
        if p_c.z < params.near_plane || p_c.norm() > params.max_range {
            continue;
        }
        let Ok(px) = cam.project(&p_c, cam.omega != 0.0) else {
            continue;
        };
        if !cam.contains(px) {
            continue;
        }
        points.push(RenderedPoint {
            id: p.id,
            px: px + noise2(pixel_sigma, rng),
        });
    }

    FrameRender { segments, points }
}

fn project_scene_line(
    scene: &SyntheticScene,
    line: &SceneLine,
    cam_inv: &Pose,
    cam: &CameraModel,
    params: &RenderParams,
) -> Option<RenderedSegment> {
    let dir = scene.line_direction(line);
    let (w0, w1) = scene.line_endpoints(line);
    let mut p0 = cam_inv.transform_point(&w0);
    let mut p1 = cam_inv.transform_point(&w1);
    let mut r0 = line.extent.0;
    let mut r1 = line.extent.1;
    let _ = dir;

    // Near-plane clip in the camera frame; range interpolates linearly in 3D.
    if p0.z < params.near_plane && p1.z < params.near_plane {
        return None;
    }
    if p0.z < params.near_plane {
        let t = (params.near_plane - p0.z) / (p1.z - p0.z);
        p0 += (p1 - p0) * t;
        r0 += (r1 - r0) * t;
    } else if p1.z < params.near_plane {
        let t = (params.near_plane - p1.z) / (p0.z - p1.z);
        p1 += (p0 - p1) * t;
        r1 += (r0 - r1) * t;
    }
    if 0.5 * (p0 + p1).norm() > params.max_range {
        return None;
    }

    let a = cam.project(&p0, false).ok()?;
    let b = cam.project(&p1, false).ok()?;

    // Clip the projected segment to the image rectangle, tracking the
    // perspective-correct range parameters of the clipped endpoints.
    let (sa, sb) = clip_to_rect(a, b, cam.width as f64, cam.height as f64)?;
    let lerp_pr = |s: f64| -> (f64, f64) {
        let wa = (1.0 - s) / p0.z;
        let wb = s / p1.z;
        let w = wa + wb;
        ((wa * r0 + wb * r1) / w, 1.0 / w)
    };
    let (ra, za) = lerp_pr(sa);
    let (rb, zb) = lerp_pr(sb);
    let pa = a + (b - a) * sa;
    let pb = a + (b - a) * sb;
    if (pb - pa).norm() < params.min_segment_px {
        return None;
    }

    Some(RenderedSegment {
        seg: LineSegment2D::new(pa, pb, 0),
        line_id: line.id,
        r_a: ra,
        r_b: rb,
        z_a: za,
        z_b: zb,
    })
}

/// Liang-Barsky clip of a 2D segment to `[0,w) x [0,h)`; returns the
/// parameter interval of the visible part.
fn clip_to_rect(a: Vector2<f64>, b: Vector2<f64>, w: f64, h: f64) -> Option<(f64, f64)> {
    let d = b - a;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-d.x, a.x),          // x >= 0
        (d.x, w - 1.0 - a.x), // x <= w-1
        (-d.y, a.y),          // y >= 0
        (d.y, h - 1.0 - a.y), // y <= h-1
    ];
    for (p, q) in checks {
        if p.abs() < 1e-12 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            t0 = t0.max(r);
        } else {
            t1 = t1.min(r);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Band-limited per-line 1D textures plus a background field.
#[derive(Debug)]
pub struct SceneTextures {
    lines: Vec<Texture1D>,
    background: [f64; 6],
}

#[derive(Debug, Clone)]
struct Texture1D {
    along: [(f64, f64, f64); 7],
    perp: [(f64, f64, f64); 2],
    /// Diagonal wave mixing both patch coordinates, decorrelating lines
    /// whose 1D profiles happen to resemble each other.
    diag: (f64, f64, f64),
}

/// Meters of line per pixel when sampling texture patches.
const PATCH_SCALE_M_PER_PX: f64 = 0.02;

impl SceneTextures {
    pub fn new(scene: &SyntheticScene) -> Self {
        let lines = scene
            .texture_seeds
            .iter()
            .map(|seed| {
                let mut rng = ChaCha12Rng::seed_from_u64(*seed);
                let mut wave = |f_lo: f64, f_hi: f64| {
                    (
                        rng.gen_range(0.4..1.0),
                        rng.gen_range(f_lo..f_hi),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                };
                Texture1D {
                    along: [
                        wave(2.0, 6.0),
                        wave(6.0, 14.0),
                        wave(14.0, 30.0),
                        wave(30.0, 60.0),
                        wave(1.0, 2.0),
                        wave(8.0, 20.0),
                        wave(20.0, 45.0),
                    ],
                    perp: [wave(10.0, 25.0), wave(25.0, 60.0)],
                    diag: wave(15.0, 40.0),
                }
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(scene.background_seed);
        let mut background = [0.0; 6];
        for b in &mut background {
            *b = rng.gen_range(0.05..0.6);
        }
        SceneTextures { lines, background }
    }

    /// Patch for a sample at range `r` on line `line_id`; `i` runs along the
    /// line, `j` across it. The texture terms are separable in the two
    /// patch coordinates, so each wave is evaluated once per row/column.
    pub fn line_patch(&self, line_id: usize, r: f64, side: usize, center: Vector2<f64>) -> Patch {
        let tex = &self.lines[line_id % self.lines.len()];
        let half = (side / 2) as isize;
        let n = side as isize;
        let mut along = vec![0.0f64; side];
        let mut perp = vec![0.0f64; side];
        let mut diag = vec![0.0f64; (2 * n - 1) as usize];
        for (k, i) in (-half..=half).enumerate() {
            let s = r + i as f64 * PATCH_SCALE_M_PER_PX;
            for (a, f, p) in tex.along {
                along[k] += a * (std::f64::consts::TAU * f * s + p).sin();
            }
            let t = i as f64 * PATCH_SCALE_M_PER_PX;
            for (a, f, p) in tex.perp {
                perp[k] += 0.2 * a * (std::f64::consts::TAU * f * t + p).sin();
            }
        }
        let (da, df, dp) = tex.diag;
        for (k, ij) in (-2 * half..=2 * half).enumerate() {
            let u = r + ij as f64 * PATCH_SCALE_M_PER_PX;
            diag[k] = 0.6 * da * (std::f64::consts::TAU * df * u + dp).sin();
        }
        let mut data = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                data.push((along[i] + perp[j] + diag[i + j]) as f32);
            }
        }
        Patch::new(side, data, center)
    }

    pub fn background_patch(&self, px: Vector2<f64>, side: usize) -> Patch {
        let b = &self.background;
        let half = (side / 2) as isize;
        let mut data = Vec::with_capacity(side * side);
        for j in -half..=half {
            for i in -half..=half {
                let x = px.x + i as f64;
                let y = px.y + j as f64;
                let v = (x * b[0] + y * b[1]).sin()
                    + (x * b[2] - y * b[3] + 1.3).sin()
                    + (0.5 * x * b[4] + 2.1 * y * b[5]).cos();
                data.push(v as f32);
            }
        }
        Patch::new(side, data, px)
    }
}

/// Patch source for one rendered frame.
pub struct SimPatchSource {
    pub textures: Arc<SceneTextures>,
    pub segments: Vec<RenderedSegment>,
}

impl PatchSource for SimPatchSource {
    fn patch_at(&self, seg_index: usize, center: Vector2<f64>, side: usize) -> Option<Patch> {
        let seg = self.segments.get(seg_index)?;
        // Queries far off the segment hit background texture instead.
        if seg.seg.distance_to_point(center) > 4.0 {
            return Some(self.textures.background_patch(center, side));
        }
        let r = seg.range_at_pixel(center);
        Some(self.textures.line_patch(seg.line_id, r, side, center))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use crate::sim::{generate_scene, SceneConfig};
    use crate::tracker::zncc;
    use nalgebra::{Matrix3, Vector3};
    use rand::rngs::StdRng;

    fn cam() -> CameraModel {
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

    fn look_forward_pose() -> Pose {
        Pose::new(
            Rotation::from_matrix(&Matrix3::new(
                0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0,
            )),
            Vector3::zeros(),
        )
    }

    fn scene() -> SyntheticScene {
        generate_scene(
            &SceneConfig {
                world_headings_deg: vec![0.0, 45.0],
                n_lines: 30,
                n_points: 20,
                wall_radius: 8.0,
                wall_z: [-0.5, 3.0],
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_segments_lie_on_true_projection() {
        let sc = scene();
        let pose = look_forward_pose();
        let c = cam();
        let mut rng = StdRng::seed_from_u64(0);
        let render = render_observations(
            &sc,
            &pose,
            &c,
            &RenderParams::default(),
            0.0,
            0.0,
            &mut rng,
        );
        assert!(!render.segments.is_empty(), "no visible segments");
        let inv = pose.inverse();
        for rs in &render.segments {
            let line = &sc.lines[rs.line_id];
            let d = sc.line_direction(line);
            // Project two true 3D points and check incidence with the
            // rendered endpoints' implied line.
            let p0 = line.base + d * rs.r_a;
            let p1 = line.base + d * rs.r_b;
            let a = c.project(&inv.transform_point(&p0), false).unwrap();
            let b = c.project(&inv.transform_point(&p1), false).unwrap();
            assert!((a - rs.seg.a).norm() < 1e-9, "endpoint mismatch {}", (a - rs.seg.a).norm());
            assert!((b - rs.seg.b).norm() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_features_are_absent() {
        let sc = scene();
        // Face away from every feature by looking straight up from far away.
        let pose = Pose::new(Rotation::identity(), Vector3::new(100.0, 100.0, -50.0));
        let c = cam();
        let mut rng = StdRng::seed_from_u64(0);
        let render = render_observations(
            &sc,
            &pose,
            &c,
            &RenderParams {
                max_range: 10.0,
                ..Default::default()
            },
            0.0,
            0.0,
            &mut rng,
        );
        assert!(render.segments.is_empty());
        assert!(render.points.is_empty());
    }

    #[test]
    fn endpoint_noise_statistics() {
        let sc = scene();
        let pose = look_forward_pose();
        let c = cam();
        let mut rng = StdRng::seed_from_u64(5);
        // Reference render without noise.
        let clean = render_observations(
            &sc,
            &pose,
            &c,
            &RenderParams::default(),
            0.0,
            0.0,
            &mut rng,
        );
        assert!(!clean.segments.is_empty());
        let sigma = 1.0;
        let mut devs: Vec<f64> = Vec::new();
        for _ in 0..1000 {
            let noisy = render_observations(
                &sc,
                &pose,
                &c,
                &RenderParams::default(),
                sigma,
                0.0,
                &mut rng,
            );
            for (cl, no) in clean.segments.iter().zip(&noisy.segments) {
                // Perpendicular deviation of the noisy endpoint from the
                // clean infinite line.
                let l = cl.seg.line();
                devs.push(l.dot(&no.seg.a_h()));
                devs.push(l.dot(&no.seg.b_h()));
            }
        }
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - sigma).abs() / sigma < 0.1,
            "sample std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn patches_match_same_point_and_reject_other_lines() {
        let sc = scene();
        let textures = Arc::new(SceneTextures::new(&sc));
        let pose = look_forward_pose();
        let c = cam();
        let mut rng = StdRng::seed_from_u64(9);
        let render = render_observations(
            &sc,
            &pose,
            &c,
            &RenderParams::default(),
            0.0,
            0.0,
            &mut rng,
        );
        assert!(render.segments.len() >= 2);
        let src = SimPatchSource {
            textures: textures.clone(),
            segments: render.segments.clone(),
        };
        let mid0 = render.segments[0].seg.midpoint();
        let p_same_a = src.patch_at(0, mid0, 11).unwrap();
        let p_same_b = src.patch_at(0, mid0, 11).unwrap();
        assert!(zncc(&p_same_a, &p_same_b).unwrap() > 0.99);
        let mid1 = render.segments[1].seg.midpoint();
        let p_other = src.patch_at(1, mid1, 11).unwrap();
        let cross = zncc(&p_same_a, &p_other).unwrap();
        assert!(cross < 0.6, "cross-line correlation {cross}");
    }
}
