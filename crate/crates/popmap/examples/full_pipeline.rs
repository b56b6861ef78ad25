//! Runs the complete pipeline — city generation, preprocessing, spatial and
//! temporal training, baselines, and the cross-validated evaluation — into
//! a run directory and prints the final comparison table.
//!
//! Usage: cargo run --release --example full_pipeline -- [out_dir] [seed]
//!
//! Expect a few minutes of training at the default desk scale.

use std::path::PathBuf;

use popmap::pipeline::{render_report, run_gen, run_pipeline, ExperimentConfig, Stage};

fn main() -> popmap::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(
        args.get(1)
            .cloned()
            .unwrap_or_else(|| "runs/full-pipeline".to_string()),
    );
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());

    let cfg = ExperimentConfig::desk(seed);
    println!("run directory: {}", out.display());
    println!("config hash: {}", cfg.hash());

    run_gen(&cfg, &out, false)?;
    println!("gen: done");
    for stage in Stage::ALL {
        let t0 = std::time::Instant::now();
        run_pipeline(&cfg, &out, &[stage], false)?;
        println!("{}: done in {:.1}s", stage.name(), t0.elapsed().as_secs_f64());
    }

    println!();
    print!("{}", render_report(&out.join("results.csv"))?);
    Ok(())
}
