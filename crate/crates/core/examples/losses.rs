//! Evaluate the loss terms on a shifted render against its original.

use deblur3d::geometry::{laplacian_loss, make_prototype_with_texture, Pose, Vec3};
use deblur3d::losses::{
    joint_loss, silhouette_loss, tv_loss, video_loss, LossComponents, LossWeights,
};
use deblur3d::render::{rasterize, DEFAULT_SOFTNESS};
use deblur3d::{quat, Camera, PrototypeKind};

fn main() -> anyhow::Result<()> {
    let mesh = make_prototype_with_texture(PrototypeKind::SphereLow, 16);
    let camera = Camera::default_for(64, 64);
    let a = rasterize(
        &mesh,
        &Pose::new(quat::IDENTITY, Vec3::new(0.0, 0.0, 5.0)),
        &camera,
        DEFAULT_SOFTNESS,
    )?;
    for shift in [0.0, 0.2, 0.5, 1.0] {
        let b = rasterize(
            &mesh,
            &Pose::new(quat::IDENTITY, Vec3::new(shift, 0.0, 5.0)),
            &camera,
            DEFAULT_SOFTNESS,
        )?;
        let c = LossComponents {
            video: video_loss(std::slice::from_ref(&b.appearance), std::slice::from_ref(&a.appearance))?,
            tv: tv_loss(&mesh.texture),
            silhouette: silhouette_loss(std::slice::from_ref(&a.silhouette), std::slice::from_ref(&b.silhouette))?,
            laplacian: laplacian_loss(&mesh),
        };
        let total = joint_loss(&c, &LossWeights::default())?;
        println!(
            "shift {shift:.1}: video {:.4} silhouette {:.4} total {total:.4}",
            c.video, c.silhouette
        );
    }
    Ok(())
}
