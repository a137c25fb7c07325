//! Drop the robot onto the ground holding its standing joint targets, then
//! command a crouch and print the trunk height and contact forces.
//!
//! ```text
//! cargo run --release --example simulate -- [trajectory.csv]
//! ```

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motion_prior::dataset::{RefPose, RefVelocity, RobotGeometry};
use motion_prior::sim::{reset_from_reference, write_trajectory_row, PlanarSim, SimConfig, TRAJECTORY_HEADER};

fn main() -> motion_prior::Result<()> {
    let csv_path = std::env::args().nth(1);
    let g = RobotGeometry::default();
    let sim = PlanarSim::new(g.clone(), SimConfig::default())?;
    let stand = g.standing_joints();
    // start 5 cm above the standing height so the first steps are airborne
    let pose = RefPose::new(0.0, g.standing_height() + 0.05, 0.0, stand, &g);
    let mut state = reset_from_reference(&pose, &RefVelocity::default(), 0.0, &g, &mut ChaCha8Rng::seed_from_u64(0));

    let mut csv = csv_path.map(|p| {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p).expect("create trajectory file"));
        writeln!(f, "{TRAJECTORY_HEADER}").expect("write header");
        f
    });
    let crouch = [stand[0] + 0.3, stand[1] - 0.5, stand[2] + 0.3, stand[3] - 0.5];
    for k in 0..150 {
        let target = if k < 75 { stand } else { crouch };
        let (next, forces) = sim.step_logged(&state, &target)?;
        let f = forces.last().copied().unwrap_or_default();
        if let Some(out) = csv.as_mut() {
            write_trajectory_row(out, &next, &f).expect("write row");
            writeln!(out).expect("write row");
        }
        if k % 15 == 14 {
            println!(
                "t {:.2}s  z {:.3} m  pitch {:+.3}  contacts {:?}  Fn front {:6.1} N  rear {:6.1} N",
                next.time, next.root_z, next.pitch, next.foot_contact, f[0].normal, f[1].normal
            );
        }
        state = next;
    }
    Ok(())
}

