//! On-disk layout of fit results, synthetic scenes and run manifests.
//!
//! A fit directory holds `manifest.json`, `fit.json`, `background.png`,
//! `frames/` (re-rendered input frames) and one `window_{k}/` per window with
//! `mesh.obj` (+ `.png`, `.mtl`), `motion.json` and `loss.csv`. The first
//! window's mesh, motion and loss files are mirrored at the top level.
//!
//! A scene directory holds `frames/`, `masks/`, `high_speed/`,
//! `high_speed_masks/`, `background.png`, `mesh.obj` and `ground_truth.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::{SceneTruth, SyntheticScene};
use crate::fit::{FitConfig, FitResult, FrameChoice, VideoFit, WindowFit};
use crate::formation::{FrameSetup, VideoSequence};
use crate::geometry::{export_obj, import_obj, PrototypeKind, TexturedMesh};
use crate::image::{
    load_frame_dir, load_gray, load_linear_rgb, save_frame_dir, save_gray16, save_linear_rgb16,
    Image,
};
use crate::masks::{load_mask_track, MaskTrack};
use crate::motion::{ExposureGap, MotionDocument, MotionModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIT_FILE: &str = "fit.json";
pub const MOTION_FILE: &str = "motion.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const MESH_FILE: &str = "mesh.obj";
pub const BACKGROUND_FILE: &str = "background.png";
pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const HIGH_SPEED_DIR: &str = "high_speed";
pub const HIGH_SPEED_MASKS_DIR: &str = "high_speed_masks";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything needed to reproduce a command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Effective configuration in `key = value` form, when the command has one.
    pub config: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(self, &dir.join(MANIFEST_FILE))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    /// 1-based first frame.
    pub start: usize,
    pub len: usize,
    pub dir: String,
    pub prototype: PrototypeKind,
    pub epsilon: f64,
    pub t_b: f64,
    pub preopt_iterations: usize,
    pub per_frame_video: Vec<f64>,
}

/// Summary of a fit directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub version: String,
    pub frame_count: usize,
    pub camera: Camera,
    pub sub_frames: usize,
    pub softness: f64,
    pub config: String,
    pub windows: Vec<WindowEntry>,
    pub frames: Vec<FrameChoice>,
}

/// A fit read back from disk.
#[derive(Clone, Debug)]
pub struct StoredFit {
    pub document: FitDocument,
    pub fit: VideoFit,
    pub background: Image,
}

impl StoredFit {
    pub fn camera(&self) -> &Camera {
        &self.document.camera
    }

    pub fn setup(&self) -> FrameSetup<'_> {
        FrameSetup {
            camera: &self.document.camera,
            background: &self.background,
            softness: self.document.softness,
        }
    }
}

fn window_dir_name(k: usize) -> String {
    format!("window_{k}")
}

fn save_result(result: &FitResult, frame_count: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_obj(&result.mesh, &dir.join(MESH_FILE))?;
    MotionDocument::new(&result.motion, &result.gap, frame_count).save(&dir.join(MOTION_FILE))?;
    write_text(&result.history_csv(), &dir.join(LOSS_FILE))
}

/// Write a video fit. `frames` are the re-rendered input frames.
pub fn save_fit(
    dir: &Path,
    fit: &VideoFit,
    camera: &Camera,
    background: &Image,
    config: &FitConfig,
    frames: &[Image],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(fit.windows.len());
    for (k, w) in fit.windows.iter().enumerate() {
        let name = window_dir_name(k + 1);
        save_result(&w.result, w.len, &dir.join(&name))?;
        written.push(dir.join(&name));
        entries.push(WindowEntry {
            start: w.start + 1,
            len: w.len,
            dir: name,
            prototype: w.result.prototype,
            epsilon: w.result.epsilon,
            t_b: w.result.motion.knot_time(),
            preopt_iterations: w.result.preopt_iterations,
            per_frame_video: w.result.per_frame_video.clone(),
        });
    }
    if let Some(first) = fit.windows.first() {
        save_result(&first.result, first.len, dir)?;
        written.extend(
            [MESH_FILE, MOTION_FILE, LOSS_FILE]
                .iter()
                .map(|f| dir.join(f)),
        );
    }
    save_linear_rgb16(background, &dir.join(BACKGROUND_FILE))?;
    written.push(dir.join(BACKGROUND_FILE));
    save_frame_dir(frames, &dir.join(FRAMES_DIR))?;
    written.push(dir.join(FRAMES_DIR));
    let doc = FitDocument {
        version: env!("CARGO_PKG_VERSION").to_string(),
        frame_count: fit.frame_count(),
        camera: *camera,
        sub_frames: config.sub_frames,
        softness: config.softness,
        config: config.to_string(),
        windows: entries,
        frames: fit.frames.clone(),
    };
    write_json(&doc, &dir.join(FIT_FILE))?;
    written.push(dir.join(FIT_FILE));
    Ok(written)
}

fn load_result(dir: &Path, entry: &WindowEntry) -> Result<FitResult> {
    let doc = MotionDocument::load(&dir.join(MOTION_FILE))?;
    let mesh: TexturedMesh = import_obj(&dir.join(MESH_FILE))?;
    let motion: MotionModel = doc.motion();
    let gap: ExposureGap = doc.gap();
    Ok(FitResult {
        prototype: mesh.prototype,
        mesh,
        epsilon: gap.epsilon(),
        gap,
        motion,
        history: Vec::new(),
        preopt_iterations: entry.preopt_iterations,
        per_frame_video: entry.per_frame_video.clone(),
    })
}

pub fn load_fit(dir: &Path) -> Result<StoredFit> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let document: FitDocument = read_json(&dir.join(FIT_FILE))?;
    let mut windows = Vec::with_capacity(document.windows.len());
    for e in &document.windows {
        if e.start == 0 || e.start - 1 + e.len > document.frame_count {
            return Err(Error::malformed(
                "fit.json",
                format!("window {} out of range", e.dir),
            ));
        }
        windows.push(WindowFit {
            start: e.start - 1,
            len: e.len,
            result: load_result(&dir.join(&e.dir), e)?,
        });
    }
    if document.frames.len() != document.frame_count
        || document.frames.iter().any(|c| c.window >= windows.len())
    {
        return Err(Error::malformed(
            "fit.json",
            "frame selection does not match the windows",
        ));
    }
    let background = load_linear_rgb(&dir.join(BACKGROUND_FILE))?;
    if background.width != document.camera.width || background.height != document.camera.height {
        return Err(Error::DimensionMismatch(
            "background and camera sizes differ".into(),
        ));
    }
    let fit = VideoFit {
        windows,
        frames: document.frames.clone(),
    };
    Ok(StoredFit {
        document,
        fit,
        background,
    })
}

/// Ground-truth metadata of a scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDocument {
    pub truth: SceneTruth,
    pub camera: Camera,
    pub motion: MotionDocument,
}

/// A synthetic scene read back from disk. High-speed data is optional.
#[derive(Clone, Debug)]
pub struct StoredScene {
    pub document: GroundTruthDocument,
    pub mesh: TexturedMesh,
    pub motion: MotionModel,
    pub video: VideoSequence,
    pub masks: Option<MaskTrack>,
    pub high_speed: Option<(Vec<Image>, Vec<Image>)>,
}

pub fn save_scene(scene: &SyntheticScene, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    written.extend(save_frame_dir(&scene.video.frames, &dir.join(FRAMES_DIR))?);
    written.extend(scene.masks.save(&dir.join(MASKS_DIR))?);
    written.extend(save_frame_dir(
        &scene.high_speed,
        &dir.join(HIGH_SPEED_DIR),
    )?);
    let hs_dir = dir.join(HIGH_SPEED_MASKS_DIR);
    for (i, m) in scene.high_speed_masks.iter().enumerate() {
        let p = hs_dir.join(crate::image::frame_file_name(i + 1));
        save_gray16(m, &p)?;
        written.push(p);
    }
    save_linear_rgb16(&scene.video.background, &dir.join(BACKGROUND_FILE))?;
    written.push(dir.join(BACKGROUND_FILE));
    export_obj(&scene.mesh, &dir.join(MESH_FILE))?;
    written.push(dir.join(MESH_FILE));
    let doc = GroundTruthDocument {
        truth: scene.truth.clone(),
        camera: scene.camera,
        motion: MotionDocument::new(&scene.motion, &scene.gap, scene.video.frame_count()),
    };
    write_json(&doc, &dir.join(GROUND_TRUTH_FILE))?;
    written.push(dir.join(GROUND_TRUTH_FILE));
    Ok(written)
}

fn load_gray_dir(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (1..=count)
        .map(|i| load_gray(&dir.join(crate::image::frame_file_name(i))))
        .collect()
}

/// Load a scene directory. Missing high-speed data or masks are reported
/// as `None` rather than as errors.
pub fn load_scene(dir: &Path) -> Result<StoredScene> {
    let document: GroundTruthDocument = read_json(&dir.join(GROUND_TRUTH_FILE))?;
    let mesh = import_obj(&dir.join(MESH_FILE))?;
    let frames = load_frame_dir(&dir.join(FRAMES_DIR))?;
    let background = load_linear_rgb(&dir.join(BACKGROUND_FILE))?;
    let video = VideoSequence::with_background(frames, background)?;
    let masks = if dir.join(MASKS_DIR).is_dir() {
        Some(load_mask_track(&dir.join(MASKS_DIR))?)
    } else {
        None
    };
    let hs_dir = dir.join(HIGH_SPEED_DIR);
    let high_speed = if hs_dir.is_dir() {
        let frames = load_frame_dir(&hs_dir)?;
        let masks = load_gray_dir(&dir.join(HIGH_SPEED_MASKS_DIR), frames.len())?;
        Some((frames, masks))
    } else {
        None
    };
    Ok(StoredScene {
        motion: document.motion.motion(),
        document,
        mesh,
        video,
        masks,
        high_speed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{synth_generate_with, SynthConfig};

    fn small_scene() -> SyntheticScene {
        let mut cfg = SynthConfig::new(5, 30.0, 2);
        cfg.size = 24;
        cfg.texture_size = 8;
        cfg.sub_frames = 2;
        cfg.high_speed_factor = 2;
        synth_generate_with(&cfg).unwrap()
    }

    #[test]
    fn scene_round_trip() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.document.truth, scene.truth);
        assert_eq!(back.motion, scene.motion);
        assert_eq!(back.video.frame_count(), 2);
        assert_eq!(back.masks.as_ref().unwrap().sub_frame_count(), 2);
        let (hs, hm) = back.high_speed.unwrap();
        assert_eq!((hs.len(), hm.len()), (4, 4));
        // 8-bit sRGB frames, 16-bit linear background
        assert!(back.video.frames[0].max_abs_diff(&scene.video.frames[0]) < 0.02);
        assert!(back.video.background.max_abs_diff(&scene.video.background) < 1e-4);
        let orig = scene.mesh.vertices();
        for (a, b) in back.mesh.vertices().iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn missing_fit_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_fit(&dir.path().join("nope")),
            Err(Error::MissingFile(_))
        ));
        assert!(matches!(load_fit(dir.path()), Err(Error::MissingFile(_))));
    }
}
