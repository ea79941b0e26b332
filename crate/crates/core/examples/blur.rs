//! Render a motion-blurred three-frame video of a fast sphere, with and
//! without the exposure gap.

use deblur3d::formation::{render_video, FrameSetup};
use deblur3d::geometry::{make_prototype_with_texture, Pose, Vec3};
use deblur3d::image::save_frame_dir;
use deblur3d::render::DEFAULT_SOFTNESS;
use deblur3d::{quat, Camera, Image, MotionModel, PrototypeKind};

fn main() -> anyhow::Result<()> {
    let mut mesh = make_prototype_with_texture(PrototypeKind::SphereHigh, 32);
    mesh.texture = Image::from_fn(32, 32, 3, |x, y, c| {
        if (x / 4 + y / 4 + c) % 2 == 0 {
            0.9
        } else {
            0.2
        }
    });
    let camera = Camera::default_for(96, 96);
    let background = Image::filled(96, 96, 3, 0.1);
    let start = Pose::new(quat::IDENTITY, Vec3::new(-2.0, -0.5, 6.0));
    let end = Pose::new(
        quat::from_axis_angle(&Vec3::z(), 0.8),
        Vec3::new(2.0, 0.5, 6.0),
    );
    let motion = MotionModel::linear(&start, &end, 0.5);
    let setup = FrameSetup {
        camera: &camera,
        background: &background,
        softness: DEFAULT_SOFTNESS,
    };
    for eps in [0.0, 0.4] {
        let frames = render_video(&mesh, &motion, eps, 3, setup, 8)?;
        let dir = std::env::temp_dir().join(format!("deblur3d_blur_eps{eps}"));
        save_frame_dir(&frames, &dir)?;
        println!("eps {eps}: {} frames in {}", frames.len(), dir.display());
    }
    Ok(())
}
