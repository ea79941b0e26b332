//! Batch commands behind the `deblur3d` binary. Each writes its manifest
//! before any other artifact and never modifies its inputs.

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fit, synth_generate_with, EvalReport, GroundTruthRef, SynthConfig, TrajectoryKind,
};
use crate::fit::{fit_video, FitConfig, VideoFit};
use crate::formation::{FrameSetup, VideoSequence};
use crate::image::{load_frame_dir, load_linear_rgb, save_frame_dir};
use crate::masks::{background_subtraction_masks, load_mask_track, synchronize_direction};
use crate::store::{
    load_fit, load_scene, save_fit, save_scene, write_json, write_text, RunManifest, FIT_FILE,
    FRAMES_DIR, LOSS_FILE, MOTION_FILE,
};

fn prepare_out(out: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    manifest.save(out)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingFile(dir.to_path_buf()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitArgs {
    pub frames: PathBuf,
    pub masks: Option<PathBuf>,
    pub background: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub sub_frames: Option<usize>,
    pub focal: Option<f64>,
    /// Extra `key=value` overrides applied after the config file.
    pub set: Vec<String>,
}

impl FitArgs {
    /// Config file values, then explicit flags.
    pub fn effective_config(&self) -> Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(path) => FitConfig::load(path)?,
            None => FitConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if let Some(s) = self.sub_frames {
            cfg.sub_frames = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct FitOutcome {
    pub fit: VideoFit,
    pub camera: Camera,
    pub motion_path: PathBuf,
    pub loss_path: PathBuf,
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitOutcome> {
    require_dir(&args.frames)?;
    let cfg = args.effective_config()?;
    let mut manifest = RunManifest::new("fit", Vec::new());
    manifest.config = Some(cfg.to_string());
    manifest.seed = Some(cfg.seed);
    manifest.inputs = [
        Some(&args.frames),
        args.masks.as_ref(),
        args.background.as_ref(),
        args.config.as_ref(),
    ]
    .into_iter()
    .flatten()
    .cloned()
    .collect();
    manifest.outputs = [FIT_FILE, MOTION_FILE, LOSS_FILE, FRAMES_DIR]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    if let Some(f) = args.focal {
        manifest.args.push(format!("--focal={f}"));
    }

    let frames = load_frame_dir(&args.frames)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no frames in {}",
            args.frames.display()
        )));
    }
    let video = match &args.background {
        Some(p) => VideoSequence::with_background(frames, load_linear_rgb(p)?)?,
        None => VideoSequence::new(frames)?,
    };
    let camera = match args.focal {
        Some(f) => Camera::new(
            video.width(),
            video.height(),
            f,
            video.width() as f64 / 2.0,
            video.height() as f64 / 2.0,
        )?,
        None => Camera::default_for(video.width(), video.height()),
    };
    let masks = match &args.masks {
        Some(dir) => {
            let track = load_mask_track(dir)?;
            if track.sub_frame_count() > 1 {
                synchronize_direction(&track)
            } else {
                track
            }
        }
        None => {
            info!("no masks given; estimating by background subtraction");
            background_subtraction_masks(&video, cfg.mask_threshold)
        }
    };
    masks.ensure_matches(&video)?;
    prepare_out(&args.out, &manifest)?;

    let fit = fit_video(&video, &masks, &camera, &cfg)?;
    let setup = FrameSetup {
        camera: &camera,
        background: &video.background,
        softness: cfg.softness,
    };
    let rendered = fit.render_frames(setup, cfg.sub_frames)?;
    save_fit(&args.out, &fit, &camera, &video.background, &cfg, &rendered)?;
    for w in &fit.windows {
        info!(
            "window {}..{}: {} eps {:.3} t_b {:.3} video loss {:.5}",
            w.start + 1,
            w.start + w.len,
            w.result.prototype,
            w.result.epsilon,
            w.result.motion.knot_time(),
            w.result.final_video_loss()
        );
    }
    Ok(FitOutcome {
        fit,
        camera,
        motion_path: args.out.join(MOTION_FILE),
        loss_path: args.out.join(LOSS_FILE),
    })
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub config: SynthConfig,
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    args.config.validate()?;
    let mut manifest = RunManifest::new("synth", Vec::new());
    manifest.seed = Some(args.config.seed);
    manifest.config = Some(serde_json::to_string(&args.config).expect("plain data serializes"));
    manifest.outputs = vec![args.out.clone()];
    prepare_out(&args.out, &manifest)?;
    let scene = synth_generate_with(&args.config)?;
    let written = save_scene(&scene, &args.out)?;
    info!(
        "wrote {} files: {} eps {:.3} travel {:.2} sizes, rotation {:.1} deg",
        written.len(),
        scene.truth.prototype,
        scene.truth.epsilon,
        scene.truth.travel,
        scene.truth.rotation_angle
    );
    Ok(())
}

impl SynthArgs {
    pub fn new(seed: u64, rotation_cap: f64, frame_count: usize, out: PathBuf) -> Self {
        SynthArgs {
            config: SynthConfig::new(seed, rotation_cap, frame_count),
            out,
        }
    }

    pub fn bounce(mut self) -> Self {
        self.config.trajectory = TrajectoryKind::Bounce;
        self
    }
}

#[derive(Clone, Debug)]
pub struct TsrArgs {
    pub fit: PathBuf,
    pub factor: usize,
    pub out: PathBuf,
    /// Scene directory with high-speed frames to score against.
    pub ground_truth: Option<PathBuf>,
}

/// Write `N * factor` sharp frames. Returns the number written.
pub fn cmd_tsr(args: &TsrArgs) -> Result<usize> {
    if args.factor == 0 {
        return Err(Error::InvalidArgument("factor must be at least 1".into()));
    }
    let stored = load_fit(&args.fit)?;
    let mut manifest = RunManifest::new("tsr", vec![format!("--factor={}", args.factor)]);
    manifest.inputs = [Some(&args.fit), args.ground_truth.as_ref()]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    manifest.outputs = vec![args.out.join(FRAMES_DIR)];
    prepare_out(&args.out, &manifest)?;
    let (frames, _) = stored.fit.render_tsr(stored.setup(), args.factor)?;
    save_frame_dir(&frames, &args.out.join(FRAMES_DIR))?;
    if let Some(gt_dir) = &args.ground_truth {
        let scene = load_scene(gt_dir)?;
        match scene.high_speed {
            Some((hs, _)) if hs.len() == frames.len() => {
                let mut csv = String::from("index,psnr,ssim\n");
                for (i, (p, g)) in frames.iter().zip(&hs).enumerate() {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        i,
                        crate::eval::psnr(p, g)?,
                        crate::eval::ssim(p, g)?
                    ));
                }
                write_text(&csv, &args.out.join("tsr_metrics.csv"))?;
            }
            Some((hs, _)) => {
                return Err(Error::DimensionMismatch(format!(
                    "{} TSR frames but {} ground-truth high-speed frames",
                    frames.len(),
                    hs.len()
                )))
            }
            None => warn!(
                "{} has no high-speed frames; skipping scores",
                gt_dir.display()
            ),
        }
    }
    Ok(frames.len())
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub fit: PathBuf,
    pub ground_truth: PathBuf,
    /// CSV of per-sub-frame scores; the JSON report goes beside it.
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let stored = load_fit(&args.fit)?;
    let scene = load_scene(&args.ground_truth)?;
    let cam = stored.camera();
    let gcam = &scene.document.camera;
    if (cam.width, cam.height) != (gcam.width, gcam.height) {
        return Err(Error::DimensionMismatch(format!(
            "fit is {}x{}, ground truth is {}x{}",
            cam.width, cam.height, gcam.width, gcam.height
        )));
    }
    let json_path = args.out.with_extension("json");
    let parent = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut manifest = RunManifest::new("eval", Vec::new());
    manifest.inputs = vec![args.fit.clone(), args.ground_truth.clone()];
    manifest.outputs = vec![args.out.clone(), json_path.clone()];
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    write_json(&manifest, &args.out.with_extension("manifest.json"))?;

    if scene.high_speed.is_none() {
        warn!("no high-speed ground truth; reporting 3D metrics only");
    }
    let hs = scene
        .high_speed
        .as_ref()
        .map(|(f, m)| (f.as_slice(), m.as_slice()));
    let gt = GroundTruthRef {
        mesh: &scene.mesh,
        motion: &scene.motion,
        epsilon: scene.document.motion.epsilon,
        frame_count: scene.video.frame_count(),
        high_speed: hs,
    };
    let report = evaluate_fit(&gt, &stored.fit, stored.setup())?;
    write_text(&report.frames_csv(), &args.out)?;
    write_json(&report, &json_path)?;
    let s = &report.summary;
    info!(
        "e_t {:.3} e_r {:.2} deg e_mesh {:.3} eps error {:.3} psnr {:?} ssim {:?} tiou {:?}",
        s.translation_error,
        s.rotation_error,
        s.mesh_error,
        s.epsilon_error,
        s.psnr_median,
        s.ssim_median,
        s.tiou
    );
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RenderArgs {
    pub fit: PathBuf,
    pub out: PathBuf,
    pub sub_frames: Option<usize>,
}

/// Re-render the blurred input frames of a fit. Returns the number written.
pub fn cmd_render(args: &RenderArgs) -> Result<usize> {
    let stored = load_fit(&args.fit)?;
    let s = args.sub_frames.unwrap_or(stored.document.sub_frames);
    if s == 0 {
        return Err(Error::InvalidArgument(
            "sub-frame count must be at least 1".into(),
        ));
    }
    let mut manifest = RunManifest::new("render", vec![format!("--subframes={s}")]);
    manifest.inputs = vec![args.fit.clone()];
    manifest.outputs = vec![args.out.join(FRAMES_DIR)];
    prepare_out(&args.out, &manifest)?;
    let frames = stored.fit.render_frames(stored.setup(), s)?;
    save_frame_dir(&frames, &args.out.join(FRAMES_DIR))?;
    Ok(frames.len())
}
