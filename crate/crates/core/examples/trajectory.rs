//! Sample a bouncing trajectory, print poses around the knot and save it.

use deblur3d::geometry::{Pose, Vec3};
use deblur3d::motion::{sub_frame_times, MotionDocument};
use deblur3d::{quat, ExposureGap, MotionModel};

fn main() -> anyhow::Result<()> {
    let start = Pose::new(quat::IDENTITY, Vec3::new(-1.5, 0.0, 6.0));
    let end = Pose::new(
        quat::from_axis_angle(&Vec3::y(), 0.5),
        Vec3::new(1.5, 0.0, 6.0),
    );
    let mut motion = MotionModel::linear(&start, &end, 0.6);
    // reverse the vertical velocity after the knot
    motion.trans_piece1[1][1] = 2.0;
    motion.trans_piece2[0][1] = -3.0;
    let gap = ExposureGap::from_epsilon(0.2);
    for tau in [0.0, 0.3, 0.6, 0.8, 1.0] {
        let p = motion.pose(tau)?;
        println!(
            "tau {tau:.1}: T = ({:+.2}, {:+.2}, {:+.2}), angle {:.1} deg",
            p.translation.x,
            p.translation.y,
            p.translation.z,
            quat::angle(&p.rotation).to_degrees()
        );
    }
    println!(
        "frame 2 of 3 sub-frame times: {:?}",
        sub_frame_times(2, 3, gap.epsilon(), 4)
    );
    let path = std::env::temp_dir().join("deblur3d_motion.json");
    MotionDocument::new(&motion, &gap, 3).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
