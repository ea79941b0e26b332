//! Render a textured torus with the soft rasterizer and save the appearance
//! and silhouette images.

use deblur3d::eval::smooth_color_field;
use deblur3d::geometry::{make_prototype_with_texture, Pose, Vec3};
use deblur3d::image::{save_frame_png, save_gray16};
use deblur3d::render::{rasterize, DEFAULT_SOFTNESS};
use deblur3d::{quat, Camera, PrototypeKind};
use rand::SeedableRng;

fn main() -> anyhow::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut mesh = make_prototype_with_texture(PrototypeKind::Torus, 64);
    mesh.texture = smooth_color_field(&mut rng, 64, 64, 0.3, 0.8);
    let camera = Camera::default_for(128, 128);
    let pose = Pose::new(
        quat::from_axis_angle(&Vec3::x(), 1.0),
        Vec3::new(0.0, 0.0, 4.0),
    );
    let out = rasterize(&mesh, &pose, &camera, DEFAULT_SOFTNESS)?;
    let dir = std::env::temp_dir();
    save_frame_png(&out.appearance, &dir.join("deblur3d_render.png"))?;
    save_gray16(&out.silhouette, &dir.join("deblur3d_silhouette.png"))?;
    println!(
        "silhouette area {:.1} px, saved to {}",
        out.silhouette.sum(),
        dir.display()
    );
    Ok(())
}
