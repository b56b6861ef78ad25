//! Trains the temporal smoothing model (shared LSTM + hour embedding) on
//! the static mapper's outputs and compares it against the flat-LSTM
//! ablation and the raw static outputs on a held-out day.
//!
//! Usage: cargo run --release --example temporal_smoothing --
//!            [seed] [iters] [hidden] [embed] [n_days] [night_activity|-] [n_districts]
//!
//! With few districts (try `0 3000 32 8 8 - 2`) the function classes mix
//! inside each district, commuting cancels at the coarse level, and the
//! static mapper's per-cell series go flat — the situation the smoother
//! exists to fix. `night_activity` switches to the class-dependent
//! device-activity observation model with that deep-night floor.

use popmap::citygen::{
    generate_population, simulate_device_records, simulate_device_records_with_activity,
    ActivityProfiles, FunctionClass,
};
use popmap::grid::{Level, PoiCategory, PopCube};
use popmap::metrics::compute_metrics;
use popmap::pipeline::{smooth_days, DEFAULT_DROPOUT};
use popmap::preprocess::{activation_correct, aggregate, grid_pois};
use popmap::spatial::{SpatialHp, StackedMapper};
use popmap::temporal::{train_temporal, TemporalHp};
use popmap::voronoi::voronoi_weights;

fn main() -> popmap::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let iters: usize = args.get(2).map_or(300, |s| s.parse().unwrap());
    let hidden: usize = args.get(3).map_or(32, |s| s.parse().unwrap());
    let embed: usize = args.get(4).map_or(8, |s| s.parse().unwrap());
    let n_days: usize = args.get(5).map_or(5, |s| s.parse().unwrap());
    // optional: deep-night residential device-activity floor; absent =
    // hour-only dropout (no class-dependent inactivity)
    let night_activity: Option<f64> = args.get(6).and_then(|s| s.parse().ok());
    // optional: district count override; fewer districts mix function
    // classes at the coarse level (within-district commuting cancels)
    let n_districts: Option<usize> = args.get(7).map(|s| s.parse().unwrap());

    let mut ccfg0 = popmap::citygen::CityConfig::for_grid(32, 32, 60, 1500);
    ccfg0.n_days = n_days;
    if let Some(nd) = n_districts {
        ccfg0.n_districts = nd;
    }
    let city = popmap::citygen::generate_city_with(ccfg0, seed)?;
    let truth = generate_population(&city, seed)?;
    let pois = grid_pois(&city.pois, 32, 32, 1.0);

    // static stage: district -> fine mapper trained on all but the last day
    let split = (n_days - 1) * 24;
    let train_truth = PopCube::new(truth.frames[..split].to_vec(), truth.times[..split].to_vec())?;
    let test_truth = PopCube::new(truth.frames[split..].to_vec(), truth.times[split..].to_vec())?;
    let hp = SpatialHp {
        iterations: 400,
        batch_size: 8,
        patch: 12,
        stride: 6,
        lr_front: 1e-2,
        lr_out: 1e-3,
        ..SpatialHp::default()
    };
    println!("training stacked mapper ({} units)...", city.ladder.len() - 1);
    let (mut mapper, _) = StackedMapper::train(
        &train_truth.frames,
        &pois,
        &city.mask,
        &city.ladder,
        &PoiCategory::ALL,
        &hp,
        seed,
    )?;

    // observed input chain, as deployed: device records with diurnal
    // dropout -> activation correction -> voronoi rasterization -> district
    // aggregate. Activation correction pins the citywide total, so the
    // static outputs carry muted diurnal dynamics the smoother must restore.
    let ccfg = &city.config;
    let records = match night_activity {
        None => simulate_device_records(&truth, &city, &DEFAULT_DROPOUT, seed)?,
        Some(floor) => {
            let mut act = ActivityProfiles::default();
            for h in 0..24 {
                // rescale the default curves so the deep-night residential
                // activity bottoms out at `floor`
                let night = (1.0 - act.residential[h]) / 0.75;
                act.residential[h] = 1.0 - (1.0 - floor) * night;
                act.suburb[h] = 1.0 - (1.0 - floor).min(0.95) * night * 0.95;
                act.mixed[h] = 1.0 - (1.0 - floor) * 0.6 * night;
            }
            simulate_device_records_with_activity(&truth, &city, &DEFAULT_DROPOUT, &act, seed)?
        }
    };
    let corrected = activation_correct(&records)?;
    let wm = voronoi_weights(&city.stations, ccfg.grid_h, ccfg.grid_w, ccfg.cell_km, &city.mask)?;
    let observed_district = {
        let mut frames = Vec::with_capacity(truth.len());
        for slot in 0..corrected.counts.n_slots {
            let fine = wm.rasterize(&corrected.counts.slot_counts(slot), Level::Fine)?;
            frames.push(aggregate(&fine, city.districts())?);
        }
        PopCube::new(frames, truth.times.clone())?
    };
    let obs_train =
        PopCube::new(observed_district.frames[..split].to_vec(), truth.times[..split].to_vec())?;
    let obs_test =
        PopCube::new(observed_district.frames[split..].to_vec(), truth.times[split..].to_vec())?;
    let static_test = mapper.map_cube(&obs_test, &pois, &city.mask)?;

    // cross-fitted temporal training inputs: each half of the train days is
    // mapped by a mapper trained on the other half, so the smoother sees
    // out-of-sample static outputs like the ones it will face at inference
    let static_train = popmap::pipeline::crossfit_static(
        &train_truth,
        &obs_train,
        &pois,
        &city,
        &PoiCategory::ALL,
        &hp,
        seed,
    )?;

    // temporal stage: LSTM + hour embedding vs flat LSTM
    let mut te_smoothed = None;
    for use_te in [true, false] {
        let thp = TemporalHp {
            iterations: iters,
            hidden,
            embed_width: embed,
            use_time_embedding: use_te,
            ..TemporalHp::default()
        };
        let (model, losses) = train_temporal(&static_train, &train_truth, &city.mask, &thp, seed)?;
        let smoothed = smooth_days(&model, &static_test, &city.mask)?;
        let rep = compute_metrics(&smoothed, &test_truth, &city.mask)?;
        println!(
            "{}: loss {:.4} -> {:.4}, held-out RMSE {:.3} NRMSE {:.4} Corr {:.4}",
            if use_te { "lstm+te  " } else { "lstm-flat" },
            losses.first().unwrap(),
            losses.last().unwrap(),
            rep.rmse,
            rep.nrmse,
            rep.corr
        );
        if use_te {
            te_smoothed = Some(smoothed);
        }
    }
    let te_smoothed = te_smoothed.unwrap();
    let rep = compute_metrics(&static_test, &test_truth, &city.mask)?;
    println!(
        "static   : held-out RMSE {:.3} NRMSE {:.4} Corr {:.4}",
        rep.rmse, rep.nrmse, rep.corr
    );

    // oracle smoothing: keep the static day-mean level per cell, borrow the
    // true diurnal shape — the best any shape-only smoother could do
    let (hgt, wid) = (test_truth.height(), test_truth.width());
    let mut oracle = static_test.clone();
    for r in 0..hgt {
        for c in 0..wid {
            if !city.mask.get(r, c) {
                continue;
            }
            let sm: f64 = (0..24).map(|t| static_test.frames[t].get(r, c)).sum::<f64>() / 24.0;
            let tm: f64 = (0..24).map(|t| test_truth.frames[t].get(r, c)).sum::<f64>() / 24.0;
            for t in 0..24 {
                let shape = if tm > 0.0 { test_truth.frames[t].get(r, c) / tm } else { 0.0 };
                oracle.frames[t].set(r, c, sm * shape);
            }
        }
    }
    let rep = compute_metrics(&oracle, &test_truth, &city.mask)?;
    println!(
        "oracle   : held-out RMSE {:.3} NRMSE {:.4} (shape-only smoothing bound)",
        rep.rmse, rep.nrmse
    );

    // residential diurnal range recovered, relative to truth: the static
    // maps flatten sleeping-hour residents, smoothing should restore them
    let mut sums = [0.0f64; 3]; // truth, smoothed, static
    for r in 0..hgt {
        for c in 0..wid {
            let cell = r * wid + c;
            if !city.mask.get(r, c)
                || city.function_class_of_cell(cell) != Some(FunctionClass::Residential)
            {
                continue;
            }
            for (i, cube) in [&test_truth, &te_smoothed, &static_test].iter().enumerate() {
                let series: Vec<f64> = cube.frames.iter().map(|f| f.get(r, c)).collect();
                let hi = series.iter().cloned().fold(f64::MIN, f64::max);
                let lo = series.iter().cloned().fold(f64::MAX, f64::min);
                sums[i] += hi - lo;
            }
        }
    }
    println!(
        "res range: smoothed/truth {:.3} vs static/truth {:.3}",
        sums[1] / sums[0],
        sums[2] / sums[0]
    );
    Ok(())
}
