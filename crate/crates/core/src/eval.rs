//! Image and 3D metrics, and the synthetic dataset generator used for
//! ground-truth evaluation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fit::VideoFit;
use crate::formation::{render_frame_detailed, render_tsr_detailed, FrameSetup, VideoSequence};
use crate::geometry::{make_prototype_with_texture, Pose, PrototypeKind, TexturedMesh, Vec3};
use crate::image::Image;
use crate::masks::{MaskSource, MaskTrack};
use crate::motion::{logit, ExposureGap, MotionModel};
use crate::quat::{self, Quat};
use crate::render::{center_of_mass, DEFAULT_SOFTNESS};

/// Reported in place of +infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Masks are binarized at this level before shifted-IoU comparisons.
pub const TIOU_BINARIZE: f64 = 0.5;

fn check_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    a.ensure_same_shape(b, what)
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shape(a, b, "psnr")?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), computed per channel
/// over window positions fully inside the image and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shape(a, b, "ssim")?;
    if a.width.min(a.height) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} is below the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for c in 0..a.channels {
        let pa = a.channel(c).data;
        let pb = b.channel(c).data;
        let prod = |f: &dyn Fn(f64, f64) -> f64| {
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| f(*x, *y))
                .collect::<Vec<f64>>()
        };
        let (mu_a, ow, oh) = filter_valid(&pa, w, h, &k);
        let (mu_b, ..) = filter_valid(&pb, w, h, &k);
        let (aa, ..) = filter_valid(&prod(&|x, _| x * x), w, h, &k);
        let (bb, ..) = filter_valid(&prod(&|_, y| y * y), w, h, &k);
        let (ab, ..) = filter_valid(&prod(&|x, y| x * y), w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / a.channels as f64)
}

/// IoU between a binarized mask and the same mask shifted by `(dx, dy)`
/// pixels (rounded to the nearest integer). An empty mask gives 1.
pub fn shifted_iou(mask: &Image, dx: f64, dy: f64) -> f64 {
    let (sx, sy) = (dx.round() as i64, dy.round() as i64);
    let (w, h) = (mask.width as i64, mask.height as i64);
    let on = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize, 0) >= TIOU_BINARIZE
    };
    let mut area = 0usize;
    let mut inter = 0usize;
    for y in 0..h {
        for x in 0..w {
            if on(x, y) {
                area += 1;
                if on(x - sx, y - sy) {
                    inter += 1;
                }
            }
        }
    }
    if area == 0 {
        return 1.0;
    }
    inter as f64 / (2 * area - inter) as f64
}

/// Trajectory IoU: mean over sub-frames of the IoU between `gt_mask` placed
/// at the ground-truth location and at the predicted location.
pub fn tiou(
    gt_mask: &Image,
    gt_locations: &[(f64, f64)],
    pred_locations: &[(f64, f64)],
) -> Result<f64> {
    if gt_locations.len() != pred_locations.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth and {} predicted locations",
            gt_locations.len(),
            pred_locations.len()
        )));
    }
    if gt_locations.is_empty() {
        return Ok(1.0);
    }
    let sum: f64 = gt_locations
        .iter()
        .zip(pred_locations)
        .map(|(g, p)| shifted_iou(gt_mask, p.0 - g.0, p.1 - g.1))
        .sum();
    Ok(sum / gt_locations.len() as f64)
}

/// Diameter of the centroid-centered bounding sphere.
pub fn object_size(vertices: &[Vec3]) -> Result<f64> {
    if vertices.is_empty() {
        return Err(Error::DegenerateMesh("empty vertex set".into()));
    }
    let c = vertices.iter().fold(Vec3::zeros(), |a, v| a + v) / vertices.len() as f64;
    Ok(2.0 * vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max))
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| (a - b).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric vertex Chamfer distance between the two posed meshes, divided by
/// the ground-truth object size.
pub fn mesh_error(
    gt: &TexturedMesh,
    gt_pose: &Pose,
    pred: &TexturedMesh,
    pred_pose: &Pose,
) -> Result<f64> {
    let g: Vec<Vec3> = gt.vertices().iter().map(|v| gt_pose.transform(v)).collect();
    let p: Vec<Vec3> = pred
        .vertices()
        .iter()
        .map(|v| pred_pose.transform(v))
        .collect();
    if g.is_empty() || p.is_empty() {
        return Err(Error::DegenerateMesh("empty mesh".into()));
    }
    let size = object_size(&g)?;
    Ok(0.5 * (mean_nearest(&g, &p) + mean_nearest(&p, &g)) / size)
}

/// Error of the translation offset between two times, relative to `object_size`.
pub fn translation_error_between(
    gt: &MotionModel,
    gt_times: (f64, f64),
    pred: &MotionModel,
    object_size: f64,
) -> Result<f64> {
    let dg = gt.eval_translation(gt_times.1)? - gt.eval_translation(gt_times.0)?;
    let dp = pred.eval_translation(1.0)? - pred.eval_translation(0.0)?;
    Ok((dp - dg).norm() / object_size)
}

/// `|(T̂(1) - T̂(0)) - (T(1) - T(0))| / object_size`.
pub fn translation_error(gt: &MotionModel, pred: &MotionModel, object_size: f64) -> Result<f64> {
    translation_error_between(gt, (0.0, 1.0), pred, object_size)
}

fn relative_rotation(a: &Quat, b: &Quat) -> Quat {
    quat::mul(b, &quat::conj(a))
}

/// Angle in degrees between two rotation changes; sign-invariant.
pub fn rotation_change_error(gt_change: &Quat, pred_change: &Quat) -> f64 {
    let d = quat::dot(&quat::normalize(gt_change), &quat::normalize(pred_change))
        .abs()
        .min(1.0);
    (2.0 * d.acos()).to_degrees()
}

pub fn rotation_error_between(
    gt: &MotionModel,
    gt_times: (f64, f64),
    pred: &MotionModel,
) -> Result<f64> {
    let g = relative_rotation(
        &gt.eval_rotation(gt_times.0)?,
        &gt.eval_rotation(gt_times.1)?,
    );
    let p = relative_rotation(&pred.eval_rotation(0.0)?, &pred.eval_rotation(1.0)?);
    Ok(rotation_change_error(&g, &p))
}

/// Angle in degrees between the rotation changes over `[0, 1]`.
pub fn rotation_error(gt: &MotionModel, pred: &MotionModel) -> Result<f64> {
    rotation_error_between(gt, (0.0, 1.0), pred)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Constant velocity and constant-rate rotation.
    Linear,
    /// Velocity reverses direction at a known knot time.
    Bounce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub rotation_cap: f64,
    pub frame_count: usize,
    pub size: usize,
    pub sub_frames: usize,
    pub high_speed_factor: usize,
    pub texture_size: usize,
    pub trajectory: TrajectoryKind,
    /// Fixed prototype; random when absent.
    pub prototype: Option<PrototypeKind>,
}

impl SynthConfig {
    pub fn new(seed: u64, rotation_cap: f64, frame_count: usize) -> Self {
        SynthConfig {
            seed,
            rotation_cap,
            frame_count,
            size: 128,
            sub_frames: 8,
            high_speed_factor: 8,
            texture_size: 64,
            trajectory: TrajectoryKind::Linear,
            prototype: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_cap >= 0.0 && self.rotation_cap <= 180.0) {
            return Err(Error::InvalidArgument(format!(
                "rotation cap {} outside [0, 180] degrees",
                self.rotation_cap
            )));
        }
        if self.frame_count == 0 || self.sub_frames == 0 || self.high_speed_factor == 0 {
            return Err(Error::InvalidArgument(
                "frame, sub-frame and factor counts must be positive".into(),
            ));
        }
        if self.size < 16 || self.texture_size < 2 {
            return Err(Error::InvalidArgument(
                "image size must be at least 16".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled ground truth of a synthetic scene (everything but the images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub config: SynthConfig,
    pub prototype: PrototypeKind,
    pub epsilon: f64,
    pub t_b: f64,
    /// Translation path length in object sizes.
    pub travel: f64,
    /// Total rotation angle over the clip in degrees.
    pub rotation_angle: f64,
    pub object_size: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub truth: SceneTruth,
    pub mesh: TexturedMesh,
    pub motion: MotionModel,
    pub gap: ExposureGap,
    pub camera: Camera,
    pub video: VideoSequence,
    pub masks: MaskTrack,
    pub high_speed: Vec<Image>,
    pub high_speed_masks: Vec<Image>,
}

impl SyntheticScene {
    pub fn epsilon(&self) -> f64 {
        self.gap.epsilon()
    }

    pub fn setup(&self) -> FrameSetup<'_> {
        FrameSetup {
            camera: &self.camera,
            background: &self.video.background,
            softness: DEFAULT_SOFTNESS,
        }
    }
}

/// Smooth periodic color field on `[0,1]^2` built from a few random
/// integer-frequency sinusoids per channel (seamless in both directions).
pub fn smooth_color_field(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Image {
    let mut waves = Vec::new();
    for c in 0..3 {
        let base = rng.gen_range(lo..hi);
        for _ in 0..4 {
            let fx = rng.gen_range(0..4) as f64;
            let fy = rng.gen_range(1..4) as f64;
            let amp = rng.gen_range(0.05..0.2);
            let phase = rng.gen_range(0.0..2.0 * PI);
            waves.push((c, fx, fy, amp, phase));
        }
        waves.push((c, 0.0, 0.0, base, PI / 2.0));
    }
    Image::from_fn(width, height, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let val: f64 = waves
            .iter()
            .filter(|w| w.0 == c)
            .map(|&(_, fx, fy, amp, ph)| amp * (2.0 * PI * (fx * u + fy * v) + ph).sin())
            .sum();
        val.clamp(0.02, 0.98)
    })
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    quat::from_axis_angle(&unit_vector(rng), rng.gen_range(0.0..PI))
}

/// Mostly in-plane direction with a small depth component.
fn travel_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let a = rng.gen_range(0.0..2.0 * PI);
    Vec3::new(a.cos(), a.sin(), rng.gen_range(-0.15..0.15)).normalize()
}

/// Generate a synthetic scene with the default size (128x128), S=8 masks and
/// factor-8 high-speed frames.
pub fn synth_generate(seed: u64, rotation_cap: f64, frame_count: usize) -> Result<SyntheticScene> {
    synth_generate_with(&SynthConfig::new(seed, rotation_cap, frame_count))
}

pub fn synth_generate_with(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kind = match cfg.prototype {
        Some(k) => k,
        None => PrototypeKind::ALL[rng.gen_range(0..PrototypeKind::ALL.len())],
    };
    let mut mesh = make_prototype_with_texture(kind, cfg.texture_size);
    mesh.texture = smooth_color_field(&mut rng, cfg.texture_size, cfg.texture_size, 0.25, 0.85);
    let size = object_size(&mesh.vertices())?;
    let radius = size / 2.0;

    let travel = rng.gen_range(1.0..5.0);
    let length = travel * size;
    let epsilon = rng.gen_range(0.05..0.5);
    let angle = rng.gen_range(0.0..=cfg.rotation_cap.max(0.0)).to_radians();
    let q0 = random_rotation(&mut rng);
    let axis = unit_vector(&mut rng);
    let q1 = quat::mul(&quat::from_axis_angle(&axis, angle), &q0);

    // path through the origin, later shifted to the viewing depth
    let dir = travel_direction(&mut rng);
    let (points, t_b) = match cfg.trajectory {
        TrajectoryKind::Linear => (vec![Vec3::zeros(), dir * length], 0.5),
        TrajectoryKind::Bounce => {
            let t_b = rng.gen_range(0.25..0.75);
            let turn = rng.gen_range(-PI / 3.0..PI / 3.0);
            let (s, c) = turn.sin_cos();
            let back = -Vec3::new(c * dir.x - s * dir.y, s * dir.x + c * dir.y, dir.z);
            let pb = dir * (length * t_b);
            (
                vec![Vec3::zeros(), pb, pb + back * (length * (1.0 - t_b))],
                t_b,
            )
        }
    };
    let lo = points
        .iter()
        .fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = points
        .iter()
        .fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let center = (lo + hi) / 2.0;
    let half_extent = ((hi - lo) / 2.0).xy().amax();
    let camera = Camera::default_for(cfg.size, cfg.size);
    // keep the whole path plus a margin inside the view
    let half_fov = cfg.size as f64 / (2.0 * camera.focal);
    let depth = ((half_extent + 1.3 * radius) / half_fov + (hi.z - lo.z) / 2.0).max(6.0);
    let offset = Vec3::new(0.0, 0.0, depth) - center;
    let points: Vec<Vec3> = points.into_iter().map(|p| p + offset).collect();

    let start = Pose::new(q0, points[0]);
    let end = Pose::new(q1, *points.last().unwrap());
    let mut motion = MotionModel::linear(&start, &end, t_b);
    if cfg.trajectory == TrajectoryKind::Bounce {
        let (p0, pb, p1) = (points[0], points[1], points[2]);
        let v1 = (pb - p0) / t_b;
        let v2 = (p1 - pb) / (1.0 - t_b);
        motion.trans_piece1 = [[p0.x, p0.y, p0.z], [v1.x, v1.y, v1.z], [0.0; 3]];
        motion.trans_piece2 = [[v2.x, v2.y, v2.z], [0.0; 3]];
        motion.knot_raw = logit(t_b);
    }
    let gap = ExposureGap::from_epsilon(epsilon);

    let background = smooth_color_field(&mut rng, cfg.size, cfg.size, 0.1, 0.6);
    let setup = FrameSetup {
        camera: &camera,
        background: &background,
        softness: DEFAULT_SOFTNESS,
    };
    let mut frames = Vec::with_capacity(cfg.frame_count);
    let mut masks = Vec::with_capacity(cfg.frame_count);
    for n in 1..=cfg.frame_count {
        let (frame, subs) = render_frame_detailed(
            &mesh,
            &motion,
            gap.epsilon(),
            n,
            cfg.frame_count,
            setup,
            cfg.sub_frames,
        )?;
        frames.push(frame);
        masks.push(subs.into_iter().map(|s| s.silhouette).collect());
    }
    let (high_speed, hs_renders) = render_tsr_detailed(
        &mesh,
        &motion,
        gap.epsilon(),
        cfg.frame_count,
        cfg.high_speed_factor,
        setup,
    )?;
    let truth = SceneTruth {
        config: cfg.clone(),
        prototype: kind,
        epsilon: gap.epsilon(),
        t_b: motion.knot_time(),
        travel,
        rotation_angle: angle.to_degrees(),
        object_size: size,
    };
    Ok(SyntheticScene {
        truth,
        mesh,
        motion,
        gap,
        camera,
        video: VideoSequence::with_background(frames, background)?,
        masks: MaskTrack::new(masks, MaskSource::SyntheticGroundTruth)?,
        high_speed,
        high_speed_masks: hs_renders.into_iter().map(|r| r.silhouette).collect(),
    })
}

/// Scores for one high-speed sub-frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    /// 0-based index in the high-speed sequence.
    pub index: usize,
    /// 1-based input frame and sub-frame.
    pub frame: usize,
    pub sub: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
}

/// 3D scores of one fitted window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// 1-based first frame and length.
    pub start: usize,
    pub len: usize,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub mesh_error: f64,
    pub epsilon_error: f64,
    pub t_b_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub psnr_mean: Option<f64>,
    pub psnr_median: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_median: Option<f64>,
    pub tiou: Option<f64>,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub mesh_error: f64,
    pub epsilon_error: f64,
    pub t_b_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub windows: Vec<WindowMetrics>,
    pub summary: EvalSummary,
}

impl EvalReport {
    /// One row per evaluated high-speed sub-frame.
    pub fn frames_csv(&self) -> String {
        let mut s = String::from("index,frame,sub,psnr,ssim,iou\n");
        for r in &self.frames {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.index, r.frame, r.sub, r.psnr, r.ssim, r.iou
            ));
        }
        s
    }

    pub fn windows_csv(&self) -> String {
        let mut s = String::from(
            "start,len,translation_error,rotation_error,mesh_error,epsilon_error,t_b_error\n",
        );
        for w in &self.windows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                w.start,
                w.len,
                w.translation_error,
                w.rotation_error,
                w.mesh_error,
                w.epsilon_error,
                w.t_b_error
            ));
        }
        s
    }
}

/// Ground truth needed for scoring a fit.
pub struct GroundTruthRef<'a> {
    pub mesh: &'a TexturedMesh,
    pub motion: &'a MotionModel,
    pub epsilon: f64,
    pub frame_count: usize,
    /// Sharp frames and silhouettes at `factor` per input frame, if available.
    pub high_speed: Option<(&'a [Image], &'a [Image])>,
}

impl<'a> GroundTruthRef<'a> {
    pub fn of(scene: &'a SyntheticScene) -> Self {
        GroundTruthRef {
            mesh: &scene.mesh,
            motion: &scene.motion,
            epsilon: scene.epsilon(),
            frame_count: scene.video.frame_count(),
            high_speed: Some((&scene.high_speed, &scene.high_speed_masks)),
        }
    }
}

/// Score a video fit against ground truth: per-window 3D errors, and image
/// metrics of the TSR reconstruction when high-speed frames are given.
pub fn evaluate_fit(
    gt: &GroundTruthRef<'_>,
    fit: &VideoFit,
    setup: FrameSetup<'_>,
) -> Result<EvalReport> {
    if fit.frame_count() != gt.frame_count {
        return Err(Error::DimensionMismatch(format!(
            "fit covers {} frames, ground truth has {}",
            fit.frame_count(),
            gt.frame_count
        )));
    }
    let nf = gt.frame_count as f64;
    let size = object_size(&gt.mesh.vertices())?;
    let mut windows = Vec::with_capacity(fit.windows.len());
    for w in &fit.windows {
        let r = &w.result;
        let t0 = w.start as f64 / nf;
        let t1 = (w.start + w.len) as f64 / nf;
        let gt_pose = gt.motion.pose(t0)?;
        let knot_gt = (gt.motion.knot_time() - t0) / (t1 - t0);
        windows.push(WindowMetrics {
            start: w.start + 1,
            len: w.len,
            translation_error: translation_error_between(gt.motion, (t0, t1), &r.motion, size)?,
            rotation_error: rotation_error_between(gt.motion, (t0, t1), &r.motion)?,
            mesh_error: mesh_error(gt.mesh, &gt_pose, &r.mesh, &r.motion.pose(0.0)?)?,
            epsilon_error: (r.epsilon - gt.epsilon).abs(),
            t_b_error: (r.motion.knot_time() - knot_gt).abs() * (t1 - t0),
        });
    }
    let mut frames = Vec::new();
    if let Some((hs, hs_masks)) = gt.high_speed {
        let per = hs.len() / gt.frame_count;
        if per == 0 || hs.len() != per * gt.frame_count || hs_masks.len() != hs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} high-speed frames and {} masks for {} input frames",
                hs.len(),
                hs_masks.len(),
                gt.frame_count
            )));
        }
        let (pred, pred_sil) = fit.render_tsr(setup, per)?;
        for (i, (p, g)) in pred.iter().zip(hs).enumerate() {
            let iou = match (center_of_mass(&hs_masks[i]), center_of_mass(&pred_sil[i])) {
                (Some(gl), Some(pl)) => tiou(&hs_masks[i], &[gl], &[pl])?,
                (Some(_), None) => 0.0,
                (None, _) => 1.0,
            };
            frames.push(FrameMetrics {
                index: i,
                frame: i / per + 1,
                sub: i % per + 1,
                psnr: psnr(p, g)?,
                ssim: ssim(p, g)?,
                iou,
            });
        }
    }
    let col = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).collect::<Vec<f64>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, s, i) = (col(|m| m.psnr), col(|m| m.ssim), col(|m| m.iou));
    let have = !frames.is_empty();
    let wcol = |f: fn(&WindowMetrics) -> f64| median(&windows.iter().map(f).collect::<Vec<f64>>());
    let summary = EvalSummary {
        frames: frames.len(),
        psnr_mean: have.then(|| mean(&p)),
        psnr_median: have.then(|| median(&p)),
        ssim_mean: have.then(|| mean(&s)),
        ssim_median: have.then(|| median(&s)),
        tiou: have.then(|| mean(&i)),
        translation_error: wcol(|w| w.translation_error),
        rotation_error: wcol(|w| w.rotation_error),
        mesh_error: wcol(|w| w.mesh_error),
        epsilon_error: wcol(|w| w.epsilon_error),
        t_b_error: wcol(|w| w.t_b_error),
    };
    Ok(EvalReport {
        frames,
        windows,
        summary,
    })
}
