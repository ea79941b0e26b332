//! Estimate masks by background subtraction, reverse one frame of a
//! ground-truth track and repair it with direction synchronization.

use deblur3d::eval::{synth_generate_with, SynthConfig};
use deblur3d::losses::soft_iou;
use deblur3d::masks::{background_subtraction_masks, synchronize_direction};
use deblur3d::Image;

fn main() -> anyhow::Result<()> {
    let mut cfg = SynthConfig::new(11, 30.0, 4);
    cfg.size = 64;
    let scene = synth_generate_with(&cfg)?;
    let estimated = background_subtraction_masks(&scene.video, 0.05);
    for (n, (est, gt)) in estimated.masks.iter().zip(&scene.masks.masks).enumerate() {
        println!(
            "frame {}: IoU of estimate vs blurred truth {:.3}",
            n + 1,
            soft_iou(&Image::mean_of(gt), &est[0])
        );
    }
    let mut broken = scene.masks.clone();
    broken.masks[2].reverse();
    let fixed = synchronize_direction(&broken);
    println!("repaired: {}", fixed.masks == scene.masks.masks);
    Ok(())
}
