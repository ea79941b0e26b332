//! Analysis-by-synthesis fitting: ADAM over mesh offsets, texture, motion
//! coefficients, knot and exposure gap; silhouette-only pre-optimization;
//! prototype selection; sliding-window video fits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::formation::{
    blur_composite, composite, render_frame, FrameSetup, PreparedMesh, VideoSequence,
};
use crate::geometry::{
    laplacian_loss_grad, make_prototype_with_texture, PrototypeKind, TexturedMesh, Vec3,
};
use crate::image::Image;
use crate::losses::{
    joint_loss, silhouette_loss_grad, tv_loss, tv_loss_grad, video_loss_grad, LossComponents,
    LossWeights,
};
use crate::masks::MaskTrack;
use crate::motion::{
    init_motion, sub_frame_time_epsilon_derivs, sub_frame_times, ExposureGap, MotionModel,
    INITIAL_EPSILON, RAW_LIMIT,
};
use crate::render::{pose_backward, rasterize_view_backward, RenderOutput, DEFAULT_SOFTNESS};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Standard deviation of the seeded noise added to initial motion coefficients.
pub const INIT_NOISE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub preopt_iterations: usize,
    pub preopt_threshold: f64,
    pub iterations: usize,
    pub lambda_v: f64,
    pub lambda_l: f64,
    pub sub_frames: usize,
    pub window: usize,
    pub softness: f64,
    pub seed: u64,
    pub prototypes: Vec<PrototypeKind>,
    pub texture_size: usize,
    /// Threshold for background-subtraction masks when none are given.
    pub mask_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.1,
            preopt_iterations: 100,
            preopt_threshold: 0.3,
            iterations: 1000,
            lambda_v: 1.0,
            lambda_l: 1000.0,
            sub_frames: 8,
            window: 3,
            softness: DEFAULT_SOFTNESS,
            seed: 0,
            prototypes: PrototypeKind::ALL.to_vec(),
            texture_size: 64,
            mask_threshold: 0.05,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("config: {what}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.preopt_threshold > 0.0 && self.preopt_threshold < 1.0) {
            return bad("preopt_threshold must lie in (0, 1)");
        }
        if !(self.lambda_v >= 0.0 && self.lambda_l >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.sub_frames == 0 || self.window == 0 || self.texture_size < 2 {
            return bad("sub_frames, window and texture_size must be positive");
        }
        if !(self.softness > 0.0) {
            return bad("softness must be positive");
        }
        if self.prototypes.is_empty() {
            return bad("at least one prototype is required");
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return bad("mask_threshold must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: self.lambda_v,
            lambda_l: self.lambda_l,
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::malformed("config value", format!("{key} = {value:?}")))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "preopt_iterations" => self.preopt_iterations = num(key, value)?,
            "preopt_threshold" => self.preopt_threshold = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "lambda_v" => self.lambda_v = num(key, value)?,
            "lambda_l" => self.lambda_l = num(key, value)?,
            "sub_frames" => self.sub_frames = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "softness" => self.softness = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "texture_size" => self.texture_size = num(key, value)?,
            "mask_threshold" => self.mask_threshold = num(key, value)?,
            "prototypes" => {
                self.prototypes = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(PrototypeKind::from_str)
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::malformed("config", format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FitConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::malformed(
                    "config",
                    format!("line {}: expected key = value", lineno + 1),
                )
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for FitConfig {
    /// The `key = value` form accepted by [`FitConfig::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let protos: Vec<String> = self.prototypes.iter().map(|p| p.to_string()).collect();
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "preopt_iterations = {}", self.preopt_iterations)?;
        writeln!(f, "preopt_threshold = {}", self.preopt_threshold)?;
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "lambda_v = {}", self.lambda_v)?;
        writeln!(f, "lambda_l = {}", self.lambda_l)?;
        writeln!(f, "sub_frames = {}", self.sub_frames)?;
        writeln!(f, "window = {}", self.window)?;
        writeln!(f, "softness = {}", self.softness)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "prototypes = {}", protos.join(","))?;
        writeln!(f, "texture_size = {}", self.texture_size)?;
        writeln!(f, "mask_threshold = {}", self.mask_threshold)
    }
}

/// ADAM state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "adam: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// The quantities being optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mesh: TexturedMesh,
    pub motion: MotionModel,
    pub gap: ExposureGap,
}

impl Scene {
    /// Prototype mesh with white texture at the image center, static,
    /// identity rotation, knot 0.5, epsilon 0.1, plus seeded noise of
    /// `INIT_NOISE` on every motion coefficient.
    pub fn initial(kind: PrototypeKind, camera: &Camera, texture_size: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(kind as u64 + 1)),
        );
        let mut params = init_motion(camera).to_params();
        let knot = params.len() - 1;
        for p in &mut params[..knot] {
            *p += INIT_NOISE * rng.sample::<f64, _>(rand_distr_standard());
        }
        Scene {
            mesh: make_prototype_with_texture(kind, texture_size),
            motion: MotionModel::from_params(&params),
            gap: ExposureGap::from_epsilon(INITIAL_EPSILON),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.gap.epsilon()
    }

    fn param_layout(&self) -> (usize, usize) {
        (3 * self.mesh.vertex_count(), self.mesh.texture.data.len())
    }

    /// Flat parameter vector: offsets, texture, motion, gap.
    pub fn to_params(&self) -> Vec<f64> {
        let (nv, nt) = self.param_layout();
        let mut p = Vec::with_capacity(nv + nt + MotionModel::PARAM_COUNT + 1);
        for o in &self.mesh.vertex_offsets {
            p.extend_from_slice(&[o.x, o.y, o.z]);
        }
        p.extend_from_slice(&self.mesh.texture.data);
        p.extend(self.motion.to_params());
        p.push(self.gap.gap_raw);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (nv, nt) = self.param_layout();
        for (i, o) in self.mesh.vertex_offsets.iter_mut().enumerate() {
            *o = Vec3::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
        }
        self.mesh.texture.data.copy_from_slice(&p[nv..nv + nt]);
        self.motion = MotionModel::from_params(&p[nv + nt..nv + nt + MotionModel::PARAM_COUNT]);
        self.gap.gap_raw = p[nv + nt + MotionModel::PARAM_COUNT];
    }

    /// Post-step projection: canonical mesh, texture in [0, 1], bounded
    /// logistic parameters.
    pub fn project(&mut self) -> Result<()> {
        self.mesh.canonicalize_in_place()?;
        self.mesh.texture.clamp01();
        self.motion.knot_raw = self.motion.knot_raw.clamp(-RAW_LIMIT, RAW_LIMIT);
        self.gap.gap_raw = self.gap.gap_raw.clamp(-RAW_LIMIT, RAW_LIMIT);
        Ok(())
    }
}

fn rand_distr_standard() -> StandardNormal {
    StandardNormal
}

/// Box-Muller standard normal, enough for initialization noise.
struct StandardNormal;

impl rand::distributions::Distribution<f64> for StandardNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Gradient of the joint loss, in the layout of [`Scene`].
#[derive(Clone, Debug)]
pub struct SceneGrad {
    pub vertex_offsets: Vec<Vec3>,
    pub texture: Vec<f64>,
    pub motion: MotionModel,
    pub gap_raw: f64,
}

impl SceneGrad {
    fn zeros(scene: &Scene) -> Self {
        SceneGrad {
            vertex_offsets: vec![Vec3::zeros(); scene.mesh.vertex_count()],
            texture: vec![0.0; scene.mesh.texture.data.len()],
            motion: MotionModel::zeros(),
            gap_raw: 0.0,
        }
    }

    fn add(&mut self, other: &SceneGrad) {
        for (a, b) in self.vertex_offsets.iter_mut().zip(&other.vertex_offsets) {
            *a += b;
        }
        for (a, b) in self.texture.iter_mut().zip(&other.texture) {
            *a += b;
        }
        let sum: Vec<f64> = self
            .motion
            .to_params()
            .iter()
            .zip(other.motion.to_params())
            .map(|(a, b)| a + b)
            .collect();
        self.motion = MotionModel::from_params(&sum);
        self.gap_raw += other.gap_raw;
    }

    /// Flat vector in the layout of [`Scene::to_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for o in &self.vertex_offsets {
            p.extend_from_slice(&[o.x, o.y, o.z]);
        }
        p.extend_from_slice(&self.texture);
        p.extend(self.motion.to_params());
        p.push(self.gap_raw);
        p
    }
}

/// Observations for one fit: a video window, its masks and the camera.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub video: &'a VideoSequence,
    pub masks: &'a MaskTrack,
    pub camera: &'a Camera,
    pub sub_frames: usize,
    pub softness: f64,
}

impl<'a> Problem<'a> {
    pub fn new(
        video: &'a VideoSequence,
        masks: &'a MaskTrack,
        camera: &'a Camera,
        config: &FitConfig,
    ) -> Result<Self> {
        masks.ensure_matches(video)?;
        if camera.width != video.width() || camera.height != video.height() {
            return Err(Error::DimensionMismatch(
                "camera and video sizes differ".into(),
            ));
        }
        let ms = masks.sub_frame_count();
        if ms != 1 && ms != config.sub_frames {
            return Err(Error::DimensionMismatch(format!(
                "mask track has {ms} sub-frames per frame; expected 1 or {}",
                config.sub_frames
            )));
        }
        Ok(Problem {
            video,
            masks,
            camera,
            sub_frames: config.sub_frames,
            softness: config.softness,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.video.frame_count()
    }
}

/// Which gradients [`evaluate`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// Everything except the texture.
    FrozenTexture,
    Full,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub components: LossComponents,
    pub total: f64,
    pub per_frame_video: Vec<f64>,
    pub grad: Option<SceneGrad>,
}

struct FramePass {
    video: f64,
    silhouette: f64,
    grad: Option<SceneGrad>,
}

fn frame_pass(
    scene: &Scene,
    prepared: &PreparedMesh<'_>,
    problem: &Problem<'_>,
    n: usize,
    weights: &LossWeights,
    mode: GradMode,
) -> Result<FramePass> {
    let nf = problem.frame_count();
    let s_count = problem.sub_frames;
    let eps = scene.epsilon();
    let times = sub_frame_times(n, nf, eps, s_count);
    let bg = &problem.video.background;
    let mut subs: Vec<RenderOutput> = Vec::with_capacity(s_count);
    let mut caches = Vec::with_capacity(s_count);
    let mut poses = Vec::with_capacity(s_count);
    for &tau in &times {
        let (out, cache, posed, q_raw) =
            prepared.render_at(&scene.motion, tau, problem.camera, problem.softness, true)?;
        subs.push(out);
        caches.push(cache);
        poses.push((posed, q_raw));
    }
    let frame = blur_composite(&subs, bg);
    let observed = &problem.video.frames[n - 1];
    let (video, g_frame) =
        video_loss_grad(std::slice::from_ref(&frame), std::slice::from_ref(observed))?;

    let masks = &problem.masks.masks[n - 1];
    let sils: Vec<Image> = subs.iter().map(|s| s.silhouette.clone()).collect();
    let (silhouette, g_sils) = if masks.len() == s_count {
        let (l, g) = silhouette_loss_grad(masks, &sils)?;
        (l, g)
    } else {
        // coarse variant: time-averaged silhouette against one blurred mask
        let mean = Image::mean_of(&sils);
        let (l, g) = silhouette_loss_grad(masks, std::slice::from_ref(&mean))?;
        let mut per_sub = g[0].clone();
        per_sub.data.iter_mut().for_each(|v| *v /= s_count as f64);
        (l, vec![per_sub; s_count])
    };
    if mode == GradMode::None {
        return Ok(FramePass {
            video,
            silhouette,
            grad: None,
        });
    }

    let inv_n = 1.0 / nf as f64;
    let inv_s = 1.0 / s_count as f64;
    let g_video_scale = weights.lambda_v * inv_n * inv_s;
    let use_video = weights.lambda_v != 0.0;
    let mut grad = SceneGrad::zeros(scene);
    let eps_chain = sub_frame_time_epsilon_derivs(nf, s_count);
    let d_eps = eps * (1.0 - eps);
    for s in 0..s_count {
        let (posed, q_raw) = &poses[s];
        let npix = bg.pixel_count();
        let mut g_sil = Image::new(bg.width, bg.height, 1);
        for pi in 0..npix {
            g_sil.data[pi] = g_sils[s].data[pi] * inv_n;
        }
        let g_app = if use_video {
            let mut ga = Image::new(bg.width, bg.height, 3);
            for pi in 0..npix {
                let mut acc = 0.0;
                for c in 0..3 {
                    let g = g_frame[0].data[pi * 3 + c] * g_video_scale;
                    ga.data[pi * 3 + c] = g;
                    acc += g * bg.data[pi * 3 + c];
                }
                g_sil.data[pi] -= acc;
            }
            Some(ga)
        } else {
            None
        };
        let mut g_posed = vec![Vec3::zeros(); posed.len()];
        let view = prepared.view(posed);
        let tex_grad = if mode == GradMode::Full && use_video {
            Some(grad.texture.as_mut_slice())
        } else {
            None
        };
        rasterize_view_backward(
            &view,
            problem.camera,
            problem.softness,
            &subs[s],
            &caches[s],
            g_app.as_ref(),
            Some(&g_sil),
            &mut g_posed,
            tex_grad,
        );
        let (g_t, g_q, g_obj) = pose_backward(&prepared.object_vertices, q_raw, &g_posed);
        for (a, b) in grad.vertex_offsets.iter_mut().zip(&g_obj) {
            *a += b;
        }
        let d_tau = scene
            .motion
            .backward(times[s], &g_t, &g_q, &mut grad.motion);
        grad.gap_raw += d_tau * eps_chain[s] * d_eps;
    }
    Ok(FramePass {
        video,
        silhouette,
        grad: Some(grad),
    })
}

/// Forward (and optionally reverse) pass of the joint loss.
pub fn evaluate(
    scene: &Scene,
    problem: &Problem<'_>,
    weights: &LossWeights,
    neighbors: &[Vec<u32>],
    mode: GradMode,
) -> Result<Evaluation> {
    let prepared = PreparedMesh::new(&scene.mesh);
    let nf = problem.frame_count();
    let passes: Vec<Result<FramePass>> = (1..=nf)
        .into_par_iter()
        .map(|n| frame_pass(scene, &prepared, problem, n, weights, mode))
        .collect();
    let mut per_frame_video = Vec::with_capacity(nf);
    let mut sil_sum = 0.0;
    let mut grad = (mode != GradMode::None).then(|| SceneGrad::zeros(scene));
    for pass in passes {
        let pass = pass?;
        per_frame_video.push(pass.video);
        sil_sum += pass.silhouette;
        if let (Some(total), Some(g)) = (grad.as_mut(), pass.grad.as_ref()) {
            total.add(g);
        }
    }
    let tv = match grad.as_mut() {
        Some(g) if mode == GradMode::Full => tv_loss_grad(&scene.mesh.texture, &mut g.texture),
        _ => tv_loss(&scene.mesh.texture),
    };
    let (laplacian, lap_grad) = laplacian_loss_grad(&scene.mesh, neighbors);
    if let Some(g) = grad.as_mut() {
        for (a, b) in g.vertex_offsets.iter_mut().zip(&lap_grad) {
            *a += b * weights.lambda_l;
        }
    }
    let components = LossComponents {
        video: per_frame_video.iter().sum::<f64>() / nf as f64,
        tv,
        silhouette: sil_sum / nf as f64,
        laplacian,
    };
    let total = joint_loss(&components, weights)?;
    Ok(Evaluation {
        components,
        total,
        per_frame_video,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Main,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Main => "main",
        })
    }
}

/// Loss values at one iteration, recorded before that iteration's step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub phase: Phase,
    pub components: LossComponents,
    pub total: f64,
    pub epsilon: f64,
    pub t_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub prototype: PrototypeKind,
    pub mesh: TexturedMesh,
    pub motion: MotionModel,
    pub epsilon: f64,
    pub gap: ExposureGap,
    pub history: Vec<HistoryRow>,
    pub preopt_iterations: usize,
    /// Per-frame video loss at the final iterate.
    pub per_frame_video: Vec<f64>,
}

impl FitResult {
    pub fn final_video_loss(&self) -> f64 {
        self.per_frame_video.iter().sum::<f64>() / self.per_frame_video.len() as f64
    }

    pub fn scene(&self) -> Scene {
        Scene {
            mesh: self.mesh.clone(),
            motion: self.motion.clone(),
            gap: self.gap,
        }
    }

    /// CSV of the loss history.
    pub fn history_csv(&self) -> String {
        let mut s =
            String::from("iteration,phase,video,tv,silhouette,laplacian,total,epsilon,t_b\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.phase,
                r.components.video,
                r.components.tv,
                r.components.silhouette,
                r.components.laplacian,
                r.total,
                r.epsilon,
                r.t_b
            ));
        }
        s
    }
}

fn record(history: &mut Vec<HistoryRow>, phase: Phase, scene: &Scene, eval: &Evaluation) {
    history.push(HistoryRow {
        iteration: history.len(),
        phase,
        components: eval.components,
        total: eval.total,
        epsilon: scene.epsilon(),
        t_b: scene.motion.knot_time(),
    });
}

fn step(
    scene: &mut Scene,
    grad: &SceneGrad,
    adam: &mut Adam,
    lr: f64,
    freeze_texture: bool,
    iteration: usize,
) -> Result<()> {
    let mut params = scene.to_params();
    let mut flat = grad.to_flat();
    if freeze_texture {
        let (nv, nt) = scene.param_layout();
        flat[nv..nv + nt].iter_mut().for_each(|g| *g = 0.0);
        let saved: Vec<f64> = params[nv..nv + nt].to_vec();
        adam_step(&mut params, &flat, adam, lr).map_err(|e| diverged(iteration, e))?;
        params[nv..nv + nt].copy_from_slice(&saved);
    } else {
        adam_step(&mut params, &flat, adam, lr).map_err(|e| diverged(iteration, e))?;
    }
    scene.set_params(&params);
    scene.project().map_err(|e| diverged(iteration, e))
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) | Error::DegenerateMesh(reason) => {
            Error::Diverged { iteration, reason }
        }
        other => Error::Diverged {
            iteration,
            reason: other.to_string(),
        },
    }
}

fn guarded_evaluate(
    scene: &Scene,
    problem: &Problem<'_>,
    weights: &LossWeights,
    neighbors: &[Vec<u32>],
    mode: GradMode,
    iteration: usize,
) -> Result<Evaluation> {
    evaluate(scene, problem, weights, neighbors, mode).map_err(|e| match e {
        Error::NonFinite(_) | Error::DegenerateRotation { .. } | Error::BehindNearPlane { .. } => {
            diverged(iteration, e)
        }
        other => other,
    })
}

/// Silhouette-only phase (`lambda_V = 0`, texture frozen). Evaluates, records,
/// stops once `L_S` is below the threshold, otherwise steps. Returns the
/// number of iterations recorded.
pub fn preoptimize(
    scene: &mut Scene,
    problem: &Problem<'_>,
    config: &FitConfig,
    history: &mut Vec<HistoryRow>,
) -> Result<usize> {
    let weights = LossWeights {
        lambda_v: 0.0,
        lambda_l: config.lambda_l,
    };
    let neighbors = scene.mesh.neighbors();
    let mut adam = Adam::new(scene.to_params().len());
    let start = history.len();
    for it in 0..config.preopt_iterations {
        let eval = guarded_evaluate(
            scene,
            problem,
            &weights,
            &neighbors,
            GradMode::FrozenTexture,
            history.len(),
        )?;
        record(history, Phase::Pre, scene, &eval);
        if eval.components.silhouette < config.preopt_threshold {
            debug!("pre-optimization converged after {} iterations", it + 1);
            return Ok(history.len() - start);
        }
        let grad = eval.grad.as_ref().expect("gradient requested");
        step(
            scene,
            grad,
            &mut adam,
            config.learning_rate,
            true,
            history.len() - 1,
        )?;
    }
    if let Some(last) = history.last() {
        warn!(
            "pre-optimization stopped at the iteration cap with L_S = {:.4} (threshold {})",
            last.components.silhouette, config.preopt_threshold
        );
    }
    Ok(history.len() - start)
}

/// Pre-optimization followed by the main phase on the full loss.
pub fn optimize_window(
    problem: &Problem<'_>,
    prototype: PrototypeKind,
    config: &FitConfig,
) -> Result<FitResult> {
    let scene = Scene::initial(prototype, problem.camera, config.texture_size, config.seed);
    optimize_from(scene, problem, config)
}

/// Run both phases starting from a given scene.
pub fn optimize_from(
    mut scene: Scene,
    problem: &Problem<'_>,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let prototype = scene.mesh.prototype;
    let mut history = Vec::with_capacity(config.preopt_iterations + config.iterations);
    let preopt_iterations = preoptimize(&mut scene, problem, config, &mut history)?;
    let weights = config.weights();
    let neighbors = scene.mesh.neighbors();
    let mut adam = Adam::new(scene.to_params().len());
    for it in 0..config.iterations {
        let eval = guarded_evaluate(
            &scene,
            problem,
            &weights,
            &neighbors,
            GradMode::Full,
            history.len(),
        )?;
        record(&mut history, Phase::Main, &scene, &eval);
        if (it + 1) % 100 == 0 {
            info!(
                "{prototype} iteration {}: total {:.5} video {:.5} silhouette {:.4} eps {:.3} t_b {:.3}",
                it + 1,
                eval.total,
                eval.components.video,
                eval.components.silhouette,
                scene.epsilon(),
                scene.motion.knot_time()
            );
        }
        let grad = eval.grad.as_ref().expect("gradient requested");
        step(
            &mut scene,
            grad,
            &mut adam,
            config.learning_rate,
            false,
            history.len() - 1,
        )?;
    }
    let fin = guarded_evaluate(
        &scene,
        problem,
        &weights,
        &neighbors,
        GradMode::None,
        history.len(),
    )?;
    scene.motion.canonicalize_rotation_sign();
    Ok(FitResult {
        prototype,
        epsilon: scene.epsilon(),
        gap: scene.gap,
        mesh: scene.mesh,
        motion: scene.motion,
        history,
        preopt_iterations,
        per_frame_video: fin.per_frame_video,
    })
}

/// Index of the lowest final video loss; ties go to the earliest entry.
pub fn argmin_video_loss(results: &[FitResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        match best {
            Some(b) if results[b].final_video_loss() <= r.final_video_loss() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Fit every configured prototype and keep the lowest final video loss
/// (ties by prototype enum order). Also returns all candidate results.
pub fn select_prototype_all(
    problem: &Problem<'_>,
    config: &FitConfig,
) -> Result<(FitResult, Vec<FitResult>)> {
    let mut kinds = config.prototypes.clone();
    kinds.sort();
    kinds.dedup();
    let runs: Vec<(PrototypeKind, Result<FitResult>)> = kinds
        .par_iter()
        .map(|&k| (k, optimize_window(problem, k, config)))
        .collect();
    let mut ok = Vec::new();
    let mut last_err = None;
    for (k, r) in runs {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => {
                warn!("prototype {k} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    let best = argmin_video_loss(&ok).ok_or_else(|| last_err.expect("at least one prototype"))?;
    Ok((ok[best].clone(), ok))
}

pub fn select_prototype(problem: &Problem<'_>, config: &FitConfig) -> Result<FitResult> {
    Ok(select_prototype_all(problem, config)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowFit {
    /// 0-based index of the window's first frame in the video.
    pub start: usize,
    pub len: usize,
    pub result: FitResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameChoice {
    /// 0-based frame index.
    pub frame: usize,
    /// Index into [`VideoFit::windows`].
    pub window: usize,
    pub video_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFit {
    pub windows: Vec<WindowFit>,
    pub frames: Vec<FrameChoice>,
}

impl VideoFit {
    pub fn window_of(&self, frame: usize) -> &WindowFit {
        &self.windows[self.frames[frame].window]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Re-render every input frame from its selected window.
    pub fn render_frames(&self, setup: FrameSetup<'_>, sub_frames: usize) -> Result<Vec<Image>> {
        (0..self.frame_count())
            .map(|f| {
                let w = self.window_of(f);
                let r = &w.result;
                render_frame(
                    &r.mesh,
                    &r.motion,
                    r.epsilon,
                    f - w.start + 1,
                    w.len,
                    setup,
                    sub_frames,
                )
            })
            .collect()
    }

    /// `factor` sharp frames per input frame, each frame taken from its
    /// selected window. Returns composites and silhouettes.
    pub fn render_tsr(
        &self,
        setup: FrameSetup<'_>,
        factor: usize,
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        if factor == 0 {
            return Err(Error::InvalidArgument(
                "TSR factor must be at least 1".into(),
            ));
        }
        let mut frames = Vec::with_capacity(self.frame_count() * factor);
        let mut silhouettes = Vec::with_capacity(self.frame_count() * factor);
        for f in 0..self.frame_count() {
            let w = self.window_of(f);
            let r = &w.result;
            let prepared = PreparedMesh::new(&r.mesh);
            for tau in sub_frame_times(f - w.start + 1, w.len, r.epsilon, factor) {
                let out = prepared
                    .render_at(&r.motion, tau, setup.camera, setup.softness, true)?
                    .0;
                frames.push(composite(&out, setup.background));
                silhouettes.push(out.silhouette);
            }
        }
        Ok((frames, silhouettes))
    }
}

/// Contiguous windows `(start, len)` of size `min(window, frames)`.
pub fn window_ranges(frames: usize, window: usize) -> Vec<(usize, usize)> {
    let len = window.min(frames);
    (0..=frames - len).map(|s| (s, len)).collect()
}

/// For each frame, the covering window with the lowest per-frame video loss
/// (ties: earliest window).
pub fn choose_windows(frames: usize, windows: &[(usize, usize, Vec<f64>)]) -> Vec<FrameChoice> {
    (0..frames)
        .map(|f| {
            let mut best: Option<FrameChoice> = None;
            for (wi, (start, len, losses)) in windows.iter().enumerate() {
                if f < *start || f >= start + len {
                    continue;
                }
                let l = losses[f - start];
                if best.is_none_or(|b| l < b.video_loss) {
                    best = Some(FrameChoice {
                        frame: f,
                        window: wi,
                        video_loss: l,
                    });
                }
            }
            best.expect("every frame is covered")
        })
        .collect()
}

/// Sliding-window fit of a whole video with per-frame window selection.
pub fn fit_video(
    video: &VideoSequence,
    masks: &MaskTrack,
    camera: &Camera,
    config: &FitConfig,
) -> Result<VideoFit> {
    config.validate()?;
    masks.ensure_matches(video)?;
    let ranges = window_ranges(video.frame_count(), config.window);
    let fits: Vec<Result<WindowFit>> = ranges
        .par_iter()
        .map(|&(start, len)| {
            let v = video.window(start, len);
            let m = masks.window(start, len);
            let problem = Problem::new(&v, &m, camera, config)?;
            info!("fitting window {}..{}", start + 1, start + len);
            let result = select_prototype(&problem, config)?;
            Ok(WindowFit { start, len, result })
        })
        .collect();
    let windows: Vec<WindowFit> = fits.into_iter().collect::<Result<_>>()?;
    let table: Vec<(usize, usize, Vec<f64>)> = windows
        .iter()
        .map(|w| (w.start, w.len, w.result.per_frame_video.clone()))
        .collect();
    let frames = choose_windows(video.frame_count(), &table);
    Ok(VideoFit { windows, frames })
}
