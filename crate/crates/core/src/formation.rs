//! Video formation: per-frame integration of renders over the open-shutter
//! interval, composited over a static background.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{TexturedMesh, Vec3};
use crate::image::Image;
use crate::motion::{sub_frame_times, MotionModel};
use crate::quat;
use crate::render::{rasterize_view, MeshView, RasterCache, RenderOutput};

#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub frames: Vec<Image>,
    pub background: Image,
}

impl VideoSequence {
    /// Frames with a median background.
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        check_frames(&frames)?;
        let background = estimate_background(&frames);
        Ok(VideoSequence { frames, background })
    }

    /// Frames with a known background plate.
    pub fn with_background(frames: Vec<Image>, background: Image) -> Result<Self> {
        check_frames(&frames)?;
        background.ensure_same_shape(&frames[0], "background")?;
        Ok(VideoSequence { frames, background })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Contiguous sub-sequence `[start, start + len)` sharing this background.
    pub fn window(&self, start: usize, len: usize) -> VideoSequence {
        VideoSequence {
            frames: self.frames[start..start + len].to_vec(),
            background: self.background.clone(),
        }
    }

    pub fn downscale(&self, factor: usize) -> VideoSequence {
        VideoSequence {
            frames: self.frames.iter().map(|f| f.downscale(factor)).collect(),
            background: self.background.downscale(factor),
        }
    }
}

fn check_frames(frames: &[Image]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("video needs at least one frame".into()))?;
    if first.channels != 3 {
        return Err(Error::DimensionMismatch("video frames must be RGB".into()));
    }
    for f in &frames[1..] {
        f.ensure_same_shape(first, "video frames")?;
    }
    Ok(())
}

/// Per-pixel, per-channel median over frames; even counts average the two
/// middle values.
pub fn estimate_background(frames: &[Image]) -> Image {
    let first = &frames[0];
    let n = frames.len();
    let mut out = Image::new(first.width, first.height, first.channels);
    let mut vals = vec![0.0; n];
    for i in 0..first.data.len() {
        for (k, f) in frames.iter().enumerate() {
            vals[k] = f.data[i];
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        out.data[i] = if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
    }
    out
}

/// Sharp composite of one render over the background.
pub fn composite(render: &RenderOutput, background: &Image) -> Image {
    let mut out = background.clone();
    for pi in 0..render.silhouette.data.len() {
        let s = render.silhouette.data[pi];
        for c in 0..3 {
            let i = pi * 3 + c;
            out.data[i] = render.appearance.data[i] + (1.0 - s) * background.data[i];
        }
    }
    out
}

/// Mesh quantities that stay fixed while the pose changes over time.
pub struct PreparedMesh<'a> {
    pub mesh: &'a TexturedMesh,
    pub object_vertices: Vec<Vec3>,
    pub corner_uvs: Vec<[[f64; 2]; 3]>,
}

impl<'a> PreparedMesh<'a> {
    pub fn new(mesh: &'a TexturedMesh) -> Self {
        PreparedMesh {
            mesh,
            object_vertices: mesh.vertices(),
            corner_uvs: mesh.corner_uvs(),
        }
    }

    /// Camera-space vertices at time `tau` plus the raw quaternion used.
    pub fn posed(&self, motion: &MotionModel, tau: f64) -> Result<(Vec<Vec3>, quat::Quat)> {
        let q_raw = motion.eval_rotation_raw(tau);
        let pose = motion.pose(tau)?;
        Ok((
            crate::geometry::pose_vertices(&self.object_vertices, &pose),
            q_raw,
        ))
    }

    pub fn view<'v>(&'v self, posed: &'v [Vec3]) -> MeshView<'v> {
        MeshView {
            vertices: posed,
            faces: &self.mesh.faces,
            corner_uvs: &self.corner_uvs,
            texture: &self.mesh.texture,
            wrap_v: self.mesh.prototype.wraps_v(),
        }
    }

    pub fn render_at(
        &self,
        motion: &MotionModel,
        tau: f64,
        camera: &Camera,
        softness: f64,
        need_color: bool,
    ) -> Result<(RenderOutput, RasterCache, Vec<Vec3>, quat::Quat)> {
        let (posed, q_raw) = self.posed(motion, tau)?;
        let (out, cache) = rasterize_view(&self.view(&posed), camera, softness, need_color)?;
        Ok((out, cache, posed, q_raw))
    }
}

/// Shared rendering inputs for one scene.
#[derive(Clone, Copy)]
pub struct FrameSetup<'a> {
    pub camera: &'a Camera,
    pub background: &'a Image,
    pub softness: f64,
}

/// Blurred frame `n` (1-based) of `frame_count`, together with the
/// individual sub-frame renders.
pub fn render_frame_detailed(
    mesh: &TexturedMesh,
    motion: &MotionModel,
    epsilon: f64,
    n: usize,
    frame_count: usize,
    setup: FrameSetup<'_>,
    s_count: usize,
) -> Result<(Image, Vec<RenderOutput>)> {
    let prepared = PreparedMesh::new(mesh);
    let times = sub_frame_times(n, frame_count, epsilon, s_count);
    let mut subs = Vec::with_capacity(s_count);
    for &tau in &times {
        subs.push(
            prepared
                .render_at(motion, tau, setup.camera, setup.softness, true)?
                .0,
        );
    }
    Ok((blur_composite(&subs, setup.background), subs))
}

/// Mean over sub-frames of `appearance + (1 - silhouette) * background`.
pub fn blur_composite(subs: &[RenderOutput], background: &Image) -> Image {
    let mut out = Image::new(background.width, background.height, 3);
    let inv = 1.0 / subs.len() as f64;
    for sub in subs {
        for pi in 0..sub.silhouette.data.len() {
            let s = sub.silhouette.data[pi];
            for c in 0..3 {
                let i = pi * 3 + c;
                out.data[i] += (sub.appearance.data[i] + (1.0 - s) * background.data[i]) * inv;
            }
        }
    }
    out
}

pub fn render_frame(
    mesh: &TexturedMesh,
    motion: &MotionModel,
    epsilon: f64,
    n: usize,
    frame_count: usize,
    setup: FrameSetup<'_>,
    s_count: usize,
) -> Result<Image> {
    Ok(render_frame_detailed(mesh, motion, epsilon, n, frame_count, setup, s_count)?.0)
}

pub fn render_video(
    mesh: &TexturedMesh,
    motion: &MotionModel,
    epsilon: f64,
    frame_count: usize,
    setup: FrameSetup<'_>,
    s_count: usize,
) -> Result<Vec<Image>> {
    (1..=frame_count)
        .map(|n| render_frame(mesh, motion, epsilon, n, frame_count, setup, s_count))
        .collect()
}

/// Temporal super-resolution: `factor` sharp composites per input frame at
/// the midpoints of equal sub-intervals of the open-shutter interval.
/// Returns the frames and the matching renders (for silhouettes).
pub fn render_tsr_detailed(
    mesh: &TexturedMesh,
    motion: &MotionModel,
    epsilon: f64,
    frame_count: usize,
    factor: usize,
    setup: FrameSetup<'_>,
) -> Result<(Vec<Image>, Vec<RenderOutput>)> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "TSR factor must be at least 1".into(),
        ));
    }
    let prepared = PreparedMesh::new(mesh);
    let mut frames = Vec::with_capacity(frame_count * factor);
    let mut renders = Vec::with_capacity(frame_count * factor);
    for n in 1..=frame_count {
        for tau in sub_frame_times(n, frame_count, epsilon, factor) {
            let out = prepared
                .render_at(motion, tau, setup.camera, setup.softness, true)?
                .0;
            frames.push(composite(&out, setup.background));
            renders.push(out);
        }
    }
    Ok((frames, renders))
}

pub fn render_tsr(
    mesh: &TexturedMesh,
    motion: &MotionModel,
    epsilon: f64,
    frame_count: usize,
    factor: usize,
    setup: FrameSetup<'_>,
) -> Result<Vec<Image>> {
    Ok(render_tsr_detailed(mesh, motion, epsilon, frame_count, factor, setup)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_prototype_with_texture, Pose, PrototypeKind};
    use crate::render::{rasterize, DEFAULT_SOFTNESS};

    fn textured_sphere() -> TexturedMesh {
        let mut m = make_prototype_with_texture(PrototypeKind::SphereLow, 16);
        m.texture = Image::from_fn(16, 16, 3, |x, y, c| {
            0.1 + 0.8 * (((x / 4 + y / 4 + c) % 2) as f64)
        });
        m
    }

    fn background(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            0.2 + 0.5 * ((x + 2 * y + 5 * c) % 11) as f64 / 10.0
        })
    }

    fn moving_motion() -> MotionModel {
        let start = Pose::new(quat::IDENTITY, Vec3::new(-1.2, -0.3, 6.0));
        let end = Pose::new(
            quat::from_axis_angle(&Vec3::new(0.3, 1.0, 0.2), 0.6),
            Vec3::new(1.3, 0.4, 6.5),
        );
        MotionModel::linear(&start, &end, 0.5)
    }

    #[test]
    fn median_background() {
        let a = Image::filled(2, 2, 3, 0.0);
        let b = Image::filled(2, 2, 3, 0.5);
        let c = Image::filled(2, 2, 3, 1.0);
        let bg = estimate_background(&[a.clone(), c.clone(), b.clone()]);
        assert!(bg.data.iter().all(|&v| v == 0.5));
        let same = estimate_background(&[b.clone(), b.clone()]);
        assert_eq!(same, b);
        let even = estimate_background(&[a, b.clone(), b, c]);
        assert!(even.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn median_recovers_clean_plate_under_sparse_occlusion() {
        let plate = background(10, 10);
        let frames: Vec<Image> = (0..5)
            .map(|k| {
                let mut f = plate.clone();
                // an occluder covers columns 2k and 2k+1 only in frame k
                for y in 0..10 {
                    for x in [2 * k, 2 * k + 1] {
                        for c in 0..3 {
                            f.set(x, y, c, 0.95);
                        }
                    }
                }
                f
            })
            .collect();
        assert_eq!(estimate_background(&frames), plate);
    }

    #[test]
    fn empty_silhouette_leaves_background() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = MotionModel::stationary(Vec3::new(50.0, 0.0, 6.0));
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let frame = render_frame(&mesh, &motion, 0.2, 1, 1, setup, 8).unwrap();
        assert!(frame.max_abs_diff(&bg) < 1e-12);
    }

    #[test]
    fn static_object_equals_sharp_composite() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = MotionModel::stationary(Vec3::new(0.2, 0.1, 6.0));
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let frame = render_frame(&mesh, &motion, 0.3, 2, 3, setup, 8).unwrap();
        let sharp = composite(
            &rasterize(&mesh, &motion.pose(0.0).unwrap(), &cam, DEFAULT_SOFTNESS).unwrap(),
            &bg,
        );
        assert!(frame.max_abs_diff(&sharp) < 1e-6);
    }

    #[test]
    fn blur_equals_average_of_independent_composites() {
        let cam = Camera::default_for(40, 40);
        let bg = background(40, 40);
        let mesh = textured_sphere();
        let motion = moving_motion();
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let (eps, n, nf) = (0.25, 2, 3);
        let frame = render_frame(&mesh, &motion, eps, n, nf, setup, 8).unwrap();
        // oracle: one full render and composite per sample time. The times
        // use the same float expression so that measure-zero texture
        // singularities (sphere poles) are hit identically.
        let (lo, width) = ((n as f64 - 1.0) / nf as f64, (1.0 - eps) / nf as f64);
        let composites: Vec<Image> = (0..8)
            .map(|s| {
                let tau = lo + width * (s as f64 + 0.5) / 8.0;
                composite(
                    &rasterize(&mesh, &motion.pose(tau).unwrap(), &cam, DEFAULT_SOFTNESS).unwrap(),
                    &bg,
                )
            })
            .collect();
        let d = frame.max_abs_diff(&Image::mean_of(&composites));
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn tsr_average_reproduces_blurred_frames() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = moving_motion();
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let tsr = render_tsr(&mesh, &motion, 0.15, 3, 8, setup).unwrap();
        assert_eq!(tsr.len(), 24);
        for n in 1..=3 {
            let frame = render_frame(&mesh, &motion, 0.15, n, 3, setup, 8).unwrap();
            let avg = Image::mean_of(&tsr[(n - 1) * 8..n * 8]);
            assert!(frame.max_abs_diff(&avg) < 1e-6);
        }
    }

    #[test]
    fn tsr_factor_one_static_matches_frame() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = MotionModel::stationary(Vec3::new(0.0, 0.0, 6.0));
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let tsr = render_tsr(&mesh, &motion, 0.4, 2, 1, setup).unwrap();
        let frame = render_frame(&mesh, &motion, 0.4, 1, 2, setup, 8).unwrap();
        assert!(tsr[0].max_abs_diff(&frame) < 1e-6);
    }

    #[test]
    fn tsr_centroids_are_equally_spaced_for_linear_motion() {
        let cam = Camera::default_for(64, 64);
        let bg = Image::filled(64, 64, 3, 0.0);
        let mesh = textured_sphere();
        let start = Pose::new(quat::IDENTITY, Vec3::new(-2.0, -0.5, 8.0));
        let end = Pose::new(quat::IDENTITY, Vec3::new(2.0, 0.5, 8.0));
        let motion = MotionModel::linear(&start, &end, 0.5);
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let eps = 0.2;
        let (_, renders) = render_tsr_detailed(&mesh, &motion, eps, 1, 8, setup).unwrap();
        let times = sub_frame_times(1, 1, eps, 8);
        for (out, tau) in renders.iter().zip(times) {
            let (cx, cy) = crate::render::center_of_mass(&out.silhouette).unwrap();
            let (ex, ey) = cam.project(&motion.eval_translation(tau).unwrap());
            assert!(
                (cx - ex).abs() < 0.5 && (cy - ey).abs() < 0.5,
                "({cx},{cy}) vs ({ex},{ey})"
            );
        }
    }

    #[test]
    fn composite_is_convex_combination() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = moving_motion();
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let frame = render_frame(&mesh, &motion, 0.1, 1, 2, setup, 8).unwrap();
        let (lo, hi) = (0.1f64.min(0.2), 0.9f64.max(0.7));
        assert!(frame
            .data
            .iter()
            .all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn large_gap_approaches_sharp_frame_at_shutter_open() {
        let cam = Camera::default_for(32, 32);
        let bg = background(32, 32);
        let mesh = textured_sphere();
        let motion = moving_motion();
        let setup = FrameSetup {
            camera: &cam,
            background: &bg,
            softness: DEFAULT_SOFTNESS,
        };
        let sharp = composite(
            &rasterize(&mesh, &motion.pose(0.0).unwrap(), &cam, DEFAULT_SOFTNESS).unwrap(),
            &bg,
        );
        let d_small = render_frame(&mesh, &motion, 0.5, 1, 3, setup, 8)
            .unwrap()
            .max_abs_diff(&sharp);
        let d_large = render_frame(&mesh, &motion, 0.999, 1, 3, setup, 8)
            .unwrap()
            .max_abs_diff(&sharp);
        assert!(d_large < d_small);
        assert!(d_large < 0.05, "{d_large} {d_small}");
    }
}
