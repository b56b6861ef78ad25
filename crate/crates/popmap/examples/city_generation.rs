//! Generates a synthetic city and its ground-truth population cube, prints
//! summary statistics, and exports the first day as 16-bit PGM heatmaps.
//!
//! Usage: cargo run --release --example city_generation -- [seed] [out_dir]

use popmap::citygen::{generate_city, generate_population, FunctionClass};
use popmap::grid::PopCube;
use popmap::pipeline::export_pgm16;

fn main() -> popmap::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let out = args.get(2).cloned();

    let city = generate_city(seed, 32, 32, 60, 2000)?;
    let truth = generate_population(&city, seed)?;

    println!(
        "city: {}x{} grid, {} in-boundary cells, {} stations, {} PoIs",
        city.config.grid_h,
        city.config.grid_w,
        city.mask.count_inside(),
        city.stations.len(),
        city.pois.len()
    );
    println!(
        "zone ladder: {:?} zones per level",
        city.ladder
            .iter()
            .map(|z| z.zone_count())
            .collect::<Vec<_>>()
    );
    println!("downtown center: {:?}", city.downtown_center);

    // function-class census over street blocks
    for fc in FunctionClass::ALL {
        let n = city
            .profiles
            .iter()
            .filter(|p| p.function_class == fc)
            .count();
        println!("  {:<12} {n} street blocks", fc.name());
    }

    // totals are nearly constant over hours (phase shifts, not migration)
    let totals: Vec<f64> = truth
        .frames
        .iter()
        .take(24)
        .map(|f| f.masked_total(&city.mask))
        .collect();
    let (lo, hi) = totals
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "day-0 hourly totals: {:.0} .. {:.0} ({:+.2}% spread)",
        lo,
        hi,
        100.0 * (hi - lo) / lo
    );

    if let Some(dir) = out {
        let day0 = PopCube::new(truth.frames[..24].to_vec(), truth.times[..24].to_vec())?;
        let files = export_pgm16(&day0, std::path::Path::new(&dir), "truth")?;
        println!("wrote {} PGM frames to {dir}", files.len() - 1);
    }
    Ok(())
}
