//! Generate the synthetic clip menu, print a summary of each clip and
//! optionally write the clips as JSON.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [out_dir]
//! ```

use motion_prior::dataset::{generate_synthetic_clip, save_clip, standard_menu, RobotGeometry};

fn main() -> motion_prior::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let geometry = RobotGeometry::default();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).expect("create output directory");
    }
    println!("{:<13} {:>6} {:>8} {:>8} {:>8} {:>9}", "clip", "frames", "dist m", "max z", "pitch", "airborne");
    for (name, kind, params) in standard_menu() {
        let mut clip = generate_synthetic_clip(kind, &params, &geometry)?;
        clip.name = name;
        let first = &clip.frames[0];
        let last = &clip.frames[clip.last_index()];
        let max_z = clip.frames.iter().map(|f| f.root_z).fold(f64::MIN, f64::max);
        let airborne = clip.frames.iter().filter(|f| f.airborne()).count();
        println!(
            "{:<13} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>9}",
            clip.name,
            clip.frames.len(),
            last.root_x - first.root_x,
            max_z,
            last.pitch - first.pitch,
            airborne
        );
        if let Some(dir) = &out {
            save_clip(&clip, dir.join(format!("{}.json", clip.name)))?;
        }
    }
    Ok(())
}
