//! Generates a few synthetic scenes and shows how far weak perspective is
//! from the true projection at each depth.
//!
//! cargo run --example simulate_scenes

use fullpersp::geometry::{self, project_weak};
use fullpersp::synth::{generate, SynthConfig};
use nalgebra::Vector2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenes = generate(&SynthConfig { seed: 42, n: 8, pixel_noise: 0.0, ..Default::default() })?;
    println!("{:>5} {:>8} {:>9} {:>12} {:>14}", "index", "t_z (m)", "f (px)", "image", "weak err (px)");
    for s in &scenes {
        let wc = s.weak_cam;
        let t = Vector2::new(wc.t_x, wc.t_y);
        // Weak projection in crop units, mapped back to pixels.
        let worst = s
            .joints3d()
            .iter()
            .zip(s.joints2d_full())
            .map(|(p, x)| (geometry::from_crop(&project_weak(p, wc.s, &t), &s.bbox) - x).norm())
            .fold(0.0, f64::max);
        println!(
            "{:>5} {:>8.3} {:>9.1} {:>12} {:>14.2}",
            s.index,
            wc.t_z,
            s.intrinsics.f,
            format!("{}x{}", s.image.w, s.image.h),
            worst
        );
    }
    Ok(())
}
