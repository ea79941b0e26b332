//! Image and trajectory metrics on simple inputs.

use deblur3d::eval::{psnr, rotation_error, ssim, tiou};
use deblur3d::geometry::{Pose, Vec3};
use deblur3d::{quat, Image, MotionModel};

fn main() -> anyhow::Result<()> {
    let a = Image::from_fn(32, 32, 3, |x, y, _| ((x + y) % 7) as f64 / 7.0);
    let b = Image::from_fn(32, 32, 3, |x, y, c| (a.get(x, y, c) + 0.1).min(1.0));
    println!("psnr {:.2} dB, ssim {:.4}", psnr(&a, &b)?, ssim(&a, &b)?);
    let disk = Image::from_fn(100, 100, 1, |x, y, _| {
        let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
        if dx * dx + dy * dy <= 400.0 {
            1.0
        } else {
            0.0
        }
    });
    println!(
        "tiou, shift by the radius: {:.3}",
        tiou(&disk, &[(50.0, 50.0)], &[(70.0, 50.0)])?
    );
    let p0 = Pose::new(quat::IDENTITY, Vec3::new(0.0, 0.0, 6.0));
    let turn = Pose::new(
        quat::from_axis_angle(&Vec3::z(), 1.0),
        Vec3::new(1.0, 0.0, 6.0),
    );
    let still = Pose::new(quat::IDENTITY, Vec3::new(1.0, 0.0, 6.0));
    let e = rotation_error(
        &MotionModel::linear(&p0, &turn, 0.5),
        &MotionModel::linear(&p0, &still, 0.5),
    )?;
    println!("rotation error {e:.2} deg");
    Ok(())
}
