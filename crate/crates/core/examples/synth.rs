//! Generate a synthetic scene with ground truth and write it to disk.

use deblur3d::eval::{synth_generate_with, SynthConfig, TrajectoryKind};
use deblur3d::store::save_scene;

fn main() -> anyhow::Result<()> {
    let mut cfg = SynthConfig::new(7, 30.0, 3);
    cfg.trajectory = TrajectoryKind::Bounce;
    let scene = synth_generate_with(&cfg)?;
    let dir = std::env::temp_dir().join("deblur3d_scene");
    let files = save_scene(&scene, &dir)?;
    let t = &scene.truth;
    println!(
        "{}: eps {:.3}, bounce at {:.3}, travel {:.2} sizes, {} files in {}",
        t.prototype,
        t.epsilon,
        t.t_b,
        t.travel,
        files.len(),
        dir.display()
    );
    Ok(())
}
