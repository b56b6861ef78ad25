//! Trains a single super-resolution unit (street-block -> fine) on a small
//! synthetic city and reports held-out RMSE against the block-constant
//! baseline (using the coarse map as-is).
//!
//! Usage: cargo run --release --example spatial_training -- [iters] [lr] [patch] [batch]

use popmap::citygen::{generate_city, generate_population};
use popmap::grid::PoiCategory;
use popmap::preprocess::{aggregate, grid_pois};
use popmap::spatial::{SpatialHp, StackedMapper};

fn main() -> popmap::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map_or(800, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(3e-3, |s| s.parse().unwrap());
    let patch: usize = args.get(3).map_or(12, |s| s.parse().unwrap());
    let batch: usize = args.get(4).map_or(8, |s| s.parse().unwrap());

    let city = generate_city(31, 32, 32, 40, 600)?;
    let cube = generate_population(&city, 31)?;
    let pois = grid_pois(&city.pois, 32, 32, 1.0);
    let ladder = vec![city.street_blocks().clone(), city.fine().clone()];
    let hp = SpatialHp {
        iterations: iters,
        batch_size: batch,
        patch,
        stride: patch / 2,
        lr_front: lr,
        lr_out: lr / 10.0,
        ..SpatialHp::default()
    };

    // train on days 0-3, evaluate on day 4
    let train_frames = cube.frames[..96].to_vec();
    let t0 = std::time::Instant::now();
    let (mut mapper, traces) = StackedMapper::train(
        &train_frames,
        &pois,
        &city.mask,
        &ladder,
        &PoiCategory::ALL,
        &hp,
        7,
    )?;
    let train_s = t0.elapsed().as_secs_f64();

    let trace = &traces[0].losses;
    let head: f64 = trace[..20.min(trace.len())].iter().sum::<f64>() / 20.0;
    let tail: f64 = trace[trace.len().saturating_sub(50)..].iter().sum::<f64>() / 50.0;
    println!("train {train_s:.1}s  loss {head:.4} -> {tail:.4} (standardized MSE)");

    let mut sq_map = 0.0;
    let mut sq_coarse = 0.0;
    let mut n = 0usize;
    for t in 96..120 {
        let truth = &cube.frames[t];
        let coarse = aggregate(truth, &ladder[0])?;
        let mapped = mapper.map_level(&coarse, &pois, &city.mask)?;
        for i in 0..truth.values.len() {
            if city.mask.inside[i] {
                sq_map += (mapped.values[i] - truth.values[i]).powi(2);
                sq_coarse += (coarse.values[i] - truth.values[i]).powi(2);
                n += 1;
            }
        }
    }
    println!(
        "held-out RMSE: mapped {:.3}  block-constant {:.3}",
        (sq_map / n as f64).sqrt(),
        (sq_coarse / n as f64).sqrt()
    );
    Ok(())
}
