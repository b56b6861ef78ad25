//! Simulates per-hour device dropout (fewer devices observable at night),
//! applies the activation-ratio correction, and shows that corrected totals
//! recover the true population scale.
//!
//! Usage: cargo run --release --example activation_correction -- [seed]

use popmap::citygen::{generate_city, generate_population, simulate_device_records};
use popmap::pipeline::DEFAULT_DROPOUT;
use popmap::preprocess::activation_correct;

fn main() -> popmap::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let city = generate_city(seed, 32, 32, 60, 1000)?;
    let truth = generate_population(&city, seed)?;

    let records = simulate_device_records(&truth, &city, &DEFAULT_DROPOUT, seed)?;
    let corrected = activation_correct(&records)?;

    println!("hour  truth-total  observed  corrected  ratio");
    for hour in 0..24 {
        let t = truth.frames[hour].masked_total(&city.mask);
        let obs = records.slot_total(hour);
        let cor = corrected.counts.slot_total(hour);
        println!(
            "{hour:>4}  {t:>11.0}  {obs:>8.0}  {cor:>9.0}  {:.3}",
            corrected.ratios[hour]
        );
    }
    println!("recovered city population (peak slot): {:.0}", corrected.peak_total);

    // every corrected slot sums to the peak total by construction
    let worst = (0..records.n_slots)
        .map(|t| (corrected.counts.slot_total(t) - corrected.peak_total).abs())
        .fold(0.0f64, f64::max);
    println!("worst |corrected slot total - peak| = {worst:.2e}");
    Ok(())
}
