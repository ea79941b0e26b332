//! Fit a small synthetic scene (shortened schedule) and compare the recovered
//! exposure gap and motion with the ground truth.

use deblur3d::eval::{evaluate_fit, synth_generate_with, GroundTruthRef, SynthConfig};
use deblur3d::fit::{fit_video, FitConfig};
use deblur3d::PrototypeKind;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut sc = SynthConfig::new(4, 30.0, 3);
    sc.size = 64;
    sc.prototype = Some(PrototypeKind::SphereLow);
    let scene = synth_generate_with(&sc)?;
    let cfg = FitConfig {
        iterations: 300,
        prototypes: vec![PrototypeKind::SphereLow],
        texture_size: 32,
        ..FitConfig::default()
    };
    let fit = fit_video(&scene.video, &scene.masks, &scene.camera, &cfg)?;
    let report = evaluate_fit(&GroundTruthRef::of(&scene), &fit, scene.setup())?;
    let r = &fit.windows[0].result;
    println!(
        "epsilon {:.3} (truth {:.3})",
        r.epsilon, scene.truth.epsilon
    );
    println!(
        "translation error {:.3} object sizes",
        report.summary.translation_error
    );
    println!("rotation error {:.2} deg", report.summary.rotation_error);
    println!("mesh error {:.3}", report.summary.mesh_error);
    Ok(())
}
