//! Rotation utilities: world orientation from a noisy camera rotation, SO(3)
//! projection, and Procrustes alignment.
//!
//! cargo run --example orient_align

use fullpersp::orient::{geodesic_distance, naive_world_orientation, procrustes_align, project_to_so3};
use fullpersp::so3;
use fullpersp::synth::{generate, SynthConfig};
use nalgebra::{Matrix3, Vector3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for sigma in [0.0, 2.0, 5.0, 10.0] {
        let scenes = generate(&SynthConfig { seed: 3, n: 500, rot_noise_deg: sigma, ..Default::default() })?;
        let mean = |f: &dyn Fn(&fullpersp::synth::SceneSample) -> Matrix3<f64>| {
            scenes.iter().map(|s| geodesic_distance(&f(s), &s.rb())).sum::<f64>() / scenes.len() as f64 * 180.0 / std::f64::consts::PI
        };
        println!(
            "rot noise {sigma:>4.1} deg: uncorrected {:6.2} deg, naive {:6.2} deg",
            mean(&|s| s.rb_cam()),
            mean(&|s| naive_world_orientation(&s.rc_noisy(), &s.rb_cam()))
        );
    }

    let skewed = so3::rot_z(0.5) + Matrix3::from_element(0.05);
    let r = project_to_so3(&skewed)?;
    println!("projected: det {:.12}, orthogonality defect {:.1e}", r.determinant(), so3::orthogonality_defect(&r));

    let x: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, (i % 2) as f64)).collect();
    let r0 = so3::exp_map(&Vector3::new(0.2, -0.4, 0.9));
    let y: Vec<_> = x.iter().map(|p| r0 * p * 1.5 + Vector3::new(1.0, 2.0, 3.0)).collect();
    let (sim, _) = procrustes_align(&x, &y)?;
    println!("procrustes: scale {:.6}, rotation error {:.1e} rad, t {:?}", sim.scale, geodesic_distance(&sim.r, &r0), sim.t.as_slice());
    Ok(())
}
