//! Trains all three stages on synthetic scenes and reports held-out depth and
//! orientation accuracy.
//!
//! cargo run --release --example train_pipeline -- [train_n] [test_n]

use std::time::Instant;

use fullpersp::learn::model::{matrix_rows, Model, SceneRow};
use fullpersp::learn::train::{run_stage, TrainConfig};
use fullpersp::learn::TrainStage;
use fullpersp::metrics::{median, mpjpe};
use fullpersp::orient::{geodesic_distance, naive_world_orientation, project_to_so3};
use fullpersp::synth::{generate, SynthConfig};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let train_n = args.first().copied().unwrap_or(5000);
    let test_n = args.get(1).copied().unwrap_or(1000);
    let train = generate(&SynthConfig { n: train_n, seed: 1, ..Default::default() })?;
    let test = generate(&SynthConfig { n: test_n, seed: 2, ..Default::default() })?;
    let rows: Vec<SceneRow> = test.iter().map(SceneRow::new).collect();

    let cfg = TrainConfig::default();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let depth_err = |m: &Model| {
        let errs: Vec<f64> = m
            .predict_rows(&rows)
            .iter()
            .zip(&test)
            .map(|(p, s)| (p.t_z - s.weak_cam.t_z).abs() / s.weak_cam.t_z)
            .collect();
        median(&errs)
    };
    let mean_mpjpe = |m: &Model| {
        let preds = m.predict_rows(&rows);
        let total: f64 = preds
            .iter()
            .zip(&test)
            .map(|(p, s)| {
                let pj: Vec<_> = p.joints.iter().map(|&j| Vector3::from(j)).collect();
                mpjpe(&s.joints3d(), &pj, true).expect("16 joints")
            })
            .sum();
        total / test.len() as f64
    };
    let full0 = model.full2d_error(&rows);
    println!("init: median depth err {:.4}, FULL2 {:.4}", depth_err(&model), full0);

    for stage in TrainStage::ALL {
        let t = Instant::now();
        let report = run_stage(stage, &mut model, &train, &cfg)?;
        let last = report.records.last().expect("at least one epoch");
        println!(
            "stage {}: {:.1}s, final total {:.5}, audits ok {}",
            stage.name(),
            t.elapsed().as_secs_f64(),
            last.total,
            report.audits_ok()
        );
        if stage != TrainStage::III {
            let full = model.full2d_error(&rows);
            println!(
                "  median depth err {:.4}, FULL2 {:.4} ({:.1}% drop), MPJPE {:.1} mm",
                depth_err(&model),
                full,
                100.0 * (1.0 - full / full0),
                mean_mpjpe(&model)
            );
        }
    }

    let preds = model.predict_rows(&rows);
    let mut err = [0.0; 3];
    for (p, s) in preds.iter().zip(&test) {
        let rbc = matrix_rows(&p.r_b_cam);
        let oc = project_to_so3(&matrix_rows(&p.r_b_world))?;
        err[0] += geodesic_distance(&rbc, &s.rb());
        err[1] += geodesic_distance(&naive_world_orientation(&s.rc_noisy(), &rbc), &s.rb());
        err[2] += geodesic_distance(&oc, &s.rb());
    }
    let deg = |v: f64| v / test.len() as f64 * 180.0 / std::f64::consts::PI;
    println!("orientation error (deg): none {:.2}, naive {:.2}, orient_correct {:.2}", deg(err[0]), deg(err[1]), deg(err[2]));
    Ok(())
}
