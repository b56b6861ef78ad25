//! Builds Voronoi area weights for the station layout of a synthetic city
//! and demonstrates the two conservation guarantees: every station's weight
//! row sums to one, and rasterizing station counts preserves the total.
//!
//! Usage: cargo run --release --example voronoi_rasterization -- [seed]

use popmap::citygen::generate_city;
use popmap::grid::Level;
use popmap::voronoi::voronoi_weights;

fn main() -> popmap::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let city = generate_city(seed, 32, 32, 40, 500)?;
    let cfg = &city.config;

    let wm = voronoi_weights(&city.stations, cfg.grid_h, cfg.grid_w, cfg.cell_km, &city.mask)?;

    let mut worst = 0.0f64;
    for s in 0..wm.n_stations {
        worst = worst.max((wm.row_sum(s) - 1.0).abs());
    }
    println!("{} stations; worst |row sum - 1| = {worst:.2e}", wm.n_stations);

    // rasterize an arbitrary count vector and check mass conservation
    let counts: Vec<f64> = (0..wm.n_stations).map(|s| 100.0 + 17.0 * s as f64).collect();
    let total_in: f64 = counts.iter().sum();
    let map = wm.rasterize(&counts, Level::Fine)?;
    let total_out = map.masked_total(&city.mask);
    println!(
        "rasterized {total_in:.1} persons -> grid total {total_out:.1} (diff {:.2e})",
        (total_in - total_out).abs()
    );

    // how many cells each station's polygon touches
    let (min_t, max_t) = wm
        .entries
        .iter()
        .map(|row| row.len())
        .fold((usize::MAX, 0), |(a, b), v| (a.min(v), b.max(v)));
    println!("station footprint: {min_t}..{max_t} cells");
    Ok(())
}
