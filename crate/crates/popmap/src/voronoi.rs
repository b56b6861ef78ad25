//! Exact Voronoi area weights on a cell grid.
//!
//! Each station's Voronoi region is intersected with every grid cell by
//! successive half-plane clipping of the cell square against the
//! perpendicular bisectors between stations (Sutherland–Hodgman). The weight
//! of (station, cell) is the intersection area divided by the station
//! polygon's total in-boundary area, so per-station weights sum to one and
//! rasterization conserves mass exactly.

use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, GridMap, Level};

type Pt = (f64, f64);

fn dist2(a: Pt, b: Pt) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Clips `poly` to the half-plane of points at least as close to `s` as to
/// `j` (the bisector half-plane).
fn clip_closer_to(poly: &[Pt], s: Pt, j: Pt) -> Vec<Pt> {
    // keep p with (j-s)·p - (|j|²-|s|²)/2 ≤ 0
    let nx = j.0 - s.0;
    let ny = j.1 - s.1;
    let c = (j.0 * j.0 + j.1 * j.1 - s.0 * s.0 - s.1 * s.1) / 2.0;
    let g = |p: Pt| nx * p.0 + ny * p.1 - c;

    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let gc = g(cur);
        let gn = g(next);
        if gc <= 0.0 {
            out.push(cur);
        }
        if (gc < 0.0 && gn > 0.0) || (gc > 0.0 && gn < 0.0) {
            let t = gc / (gc - gn);
            out.push((cur.0 + t * (next.0 - cur.0), cur.1 + t * (next.1 - cur.1)));
        }
    }
    out
}

fn polygon_area(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.0 * b.1 - b.0 * a.1;
    }
    acc.abs() / 2.0
}

/// Sparse station → cell weight matrix. `entries[s]` holds
/// `(cell_index, weight)` pairs over in-boundary cells, summing to 1.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub n_stations: usize,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

/// Area of `cell ∩ Voronoi(s)` for one cell square, clipping only against
/// stations that can actually cut the cell.
fn cell_station_area(cell: &[Pt; 4], s: usize, candidates: &[usize], stations: &[Pt]) -> f64 {
    let mut poly: Vec<Pt> = cell.to_vec();
    for &j in candidates {
        if j == s {
            continue;
        }
        poly = clip_closer_to(&poly, stations[s], stations[j]);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Exact area weights of every station's Voronoi polygon over the
/// in-boundary cells of a `height`×`width` grid with square cells of side
/// `cell_km`. Station coordinates are in the same km frame, x along columns
/// and y along rows.
pub fn voronoi_weights(
    stations: &[Pt],
    height: usize,
    width: usize,
    cell_km: f64,
    mask: &BoundaryMask,
) -> Result<WeightMatrix> {
    if stations.is_empty() {
        return Err(Error::input("voronoi_weights: need at least one station"));
    }
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            if dist2(stations[i], stations[j]) == 0.0 {
                return Err(Error::input(format!(
                    "voronoi_weights: duplicate station coordinates at index {i} and {j}"
                )));
            }
        }
    }
    if mask.height != height || mask.width != width {
        return Err(Error::shape("voronoi_weights: mask size mismatch"));
    }

    let n = stations.len();
    let mut areas: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut totals = vec![0.0; n];
    // half the cell diagonal bounds how far ownership can reach into a cell
    let r = cell_km * std::f64::consts::SQRT_2 / 2.0;

    for row in 0..height {
        for col in 0..width {
            if !mask.get(row, col) {
                continue;
            }
            let x0 = col as f64 * cell_km;
            let y0 = row as f64 * cell_km;
            let cell = [
                (x0, y0),
                (x0 + cell_km, y0),
                (x0 + cell_km, y0 + cell_km),
                (x0, y0 + cell_km),
            ];
            let center = (x0 + cell_km / 2.0, y0 + cell_km / 2.0);
            let d_min = stations
                .iter()
                .map(|s| dist2(center, *s).sqrt())
                .fold(f64::INFINITY, f64::min);
            // stations that can own part of this cell
            let candidates: Vec<usize> = (0..n)
                .filter(|&s| dist2(center, stations[s]).sqrt() <= d_min + 2.0 * r + 1e-12)
                .collect();
            let idx = row * width + col;
            let cell_area = cell_km * cell_km;
            if candidates.len() == 1 {
                let s = candidates[0];
                areas[s].push((idx, cell_area));
                totals[s] += cell_area;
                continue;
            }
            for &s in &candidates {
                let a = cell_station_area(&cell, s, &candidates, stations);
                if a > 0.0 {
                    areas[s].push((idx, a));
                    totals[s] += a;
                }
            }
        }
    }

    for (s, total) in totals.iter().enumerate() {
        if *total <= 0.0 {
            return Err(Error::input(format!(
                "voronoi_weights: station {s} has no in-boundary area"
            )));
        }
        for e in &mut areas[s] {
            e.1 /= total;
        }
    }

    Ok(WeightMatrix {
        n_stations: n,
        height,
        width,
        entries: areas,
    })
}

impl WeightMatrix {
    /// Distributes per-station counts onto the grid:
    /// `cell = Σ_s count_s · weight(s, cell)`. Totals are conserved.
    pub fn rasterize(&self, counts: &[f64], level: Level) -> Result<GridMap> {
        if counts.len() != self.n_stations {
            return Err(Error::shape(format!(
                "rasterize: {} counts for {} stations",
                counts.len(),
                self.n_stations
            )));
        }
        let mut map = GridMap::zeros(self.height, self.width, level);
        for (s, row) in self.entries.iter().enumerate() {
            let c = counts[s];
            if c == 0.0 {
                continue;
            }
            for &(idx, w) in row {
                map.values[idx] += c * w;
            }
        }
        Ok(map)
    }

    pub fn row_sum(&self, s: usize) -> f64 {
        self.entries[s].iter().map(|(_, w)| w).sum()
    }
}

/// Index of the station nearest to each in-boundary cell center
/// (out-of-boundary cells get `usize::MAX`).
pub fn nearest_station(
    stations: &[Pt],
    height: usize,
    width: usize,
    cell_km: f64,
    mask: &BoundaryMask,
) -> Vec<usize> {
    let mut out = vec![usize::MAX; height * width];
    for row in 0..height {
        for col in 0..width {
            if !mask.get(row, col) {
                continue;
            }
            let center = (
                (col as f64 + 0.5) * cell_km,
                (row as f64 + 0.5) * cell_km,
            );
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (s, p) in stations.iter().enumerate() {
                let d = dist2(center, *p);
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            out[row * width + col] = best;
        }
    }
    out
}
