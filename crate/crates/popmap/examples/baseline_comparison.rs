//! Fits the four pixelwise dasymetric baselines (lasso, CART tree, random
//! forest, MLP) on district-to-fine disaggregation and prints held-out
//! metrics for each.
//!
//! Usage: cargo run --release --example baseline_comparison -- [seed]

use std::time::Instant;

use popmap::baselines::{build_pixel_dataset, fit, BaselineHp, BaselineMethod};
use popmap::citygen::{generate_city, generate_population};
use popmap::grid::PopCube;
use popmap::metrics::compute_metrics;
use popmap::pipeline::prediction_cube;
use popmap::preprocess::{aggregate, grid_pois};

fn main() -> popmap::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let city = generate_city(seed, 32, 32, 60, 1500)?;
    let truth = generate_population(&city, seed)?;
    let pois = grid_pois(&city.pois, 32, 32, 1.0);

    let coarse_frames = truth
        .frames
        .iter()
        .map(|f| aggregate(f, city.districts()))
        .collect::<popmap::Result<Vec<_>>>()?;
    let coarse = PopCube::new(coarse_frames, truth.times.clone())?;

    // train on days 0-3, test on day 4
    let split = 96;
    let sub = |cube: &PopCube, lo: usize, hi: usize| {
        PopCube::new(cube.frames[lo..hi].to_vec(), cube.times[lo..hi].to_vec())
    };
    let train = build_pixel_dataset(
        &sub(&coarse, 0, split)?,
        &sub(&truth, 0, split)?,
        &pois,
        &city.mask,
        true,
    )?;
    let test_truth = sub(&truth, split, 120)?;
    let test = build_pixel_dataset(
        &sub(&coarse, split, 120)?,
        &test_truth,
        &pois,
        &city.mask,
        true,
    )?;
    println!(
        "{} training rows, {} test rows, {} features each",
        train.len(),
        test.len(),
        popmap::baselines::N_FEATURES
    );

    let hp = BaselineHp::default();
    println!("{:<8} {:>10} {:>8} {:>8} {:>10} {:>8}", "method", "RMSE", "NRMSE", "Corr", "MAE", "time_s");
    for method in BaselineMethod::ALL {
        let t0 = Instant::now();
        let model = fit(method, &train, &hp, seed)?;
        let pred = prediction_cube(&model.predict(&test.features), &test, &test_truth)?;
        let rep = compute_metrics(&pred, &test_truth, &city.mask)?;
        println!(
            "{:<8} {:>10.3} {:>8.4} {:>8.4} {:>10.3} {:>8.2}",
            method.name(),
            rep.rmse,
            rep.nrmse,
            rep.corr,
            rep.mae,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
