//! Temporal super-resolution: fit a short synthetic clip, then render eight
//! sharp frames per input frame and score them against the ground truth.

use deblur3d::eval::{median, psnr, ssim, synth_generate_with, SynthConfig};
use deblur3d::fit::{fit_video, FitConfig};
use deblur3d::image::save_frame_dir;
use deblur3d::PrototypeKind;

fn main() -> anyhow::Result<()> {
    let mut sc = SynthConfig::new(2, 30.0, 3);
    sc.size = 64;
    sc.prototype = Some(PrototypeKind::SphereHigh);
    let scene = synth_generate_with(&sc)?;
    let cfg = FitConfig {
        iterations: 300,
        prototypes: vec![PrototypeKind::SphereHigh],
        texture_size: 32,
        ..FitConfig::default()
    };
    let fit = fit_video(&scene.video, &scene.masks, &scene.camera, &cfg)?;
    let (frames, _) = fit.render_tsr(scene.setup(), 8)?;
    let p: Vec<f64> = frames
        .iter()
        .zip(&scene.high_speed)
        .map(|(a, b)| psnr(a, b))
        .collect::<Result<_, _>>()?;
    let s: Vec<f64> = frames
        .iter()
        .zip(&scene.high_speed)
        .map(|(a, b)| ssim(a, b))
        .collect::<Result<_, _>>()?;
    let dir = std::env::temp_dir().join("deblur3d_tsr");
    save_frame_dir(&frames, &dir)?;
    println!(
        "{} frames in {}: median psnr {:.2} dB, ssim {:.3}",
        frames.len(),
        dir.display(),
        median(&p),
        median(&s)
    );
    Ok(())
}
