//! From raw per-station counts to corrected, gridded, multi-level rasters:
//! activation-ratio correction, Voronoi rasterization, PoI gridding,
//! zone-average aggregation and patch extraction.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, FrameTime, GridMap, Level, PoiCategory, PoiGrid, ZonePartition};

/// Station × time-slot count matrix (row-major by station).
#[derive(Debug, Clone)]
pub struct StationCounts {
    pub n_stations: usize,
    pub n_slots: usize,
    pub data: Vec<f64>,
    pub times: Vec<FrameTime>,
}

impl StationCounts {
    pub fn zeros(n_stations: usize, times: Vec<FrameTime>) -> Self {
        let n_slots = times.len();
        StationCounts {
            n_stations,
            n_slots,
            data: vec![0.0; n_stations * n_slots],
            times,
        }
    }

    #[inline]
    pub fn get(&self, station: usize, slot: usize) -> f64 {
        self.data[station * self.n_slots + slot]
    }

    #[inline]
    pub fn set(&mut self, station: usize, slot: usize, v: f64) {
        self.data[station * self.n_slots + slot] = v;
    }

    pub fn slot_total(&self, slot: usize) -> f64 {
        (0..self.n_stations).map(|s| self.get(s, slot)).sum()
    }

    pub fn slot_counts(&self, slot: usize) -> Vec<f64> {
        (0..self.n_stations).map(|s| self.get(s, slot)).collect()
    }
}

/// Output of the activation-ratio correction.
#[derive(Debug, Clone)]
pub struct ActivationCorrected {
    pub counts: StationCounts,
    /// City-wide activation ratio per slot.
    pub ratios: Vec<f64>,
    /// Peak slot total, the recovered city population.
    pub peak_total: f64,
    /// Slots with an all-zero total, excluded from correction.
    pub excluded_slots: Vec<usize>,
}

/// Inflates observed counts to totals: S[t] = Σᵢ Xᵢ[t],
/// R[t] = S[t] / maxⱼ S[j], Yᵢ[t] = Xᵢ[t] / R[t]. Every corrected slot
/// then sums to the peak total. All-zero slots cannot be corrected and are
/// flagged in `excluded_slots`.
pub fn activation_correct(x: &StationCounts) -> Result<ActivationCorrected> {
    if x.data.iter().any(|v| *v < 0.0) {
        return Err(Error::input("activation_correct: negative count"));
    }
    let totals: Vec<f64> = (0..x.n_slots).map(|t| x.slot_total(t)).collect();
    let peak = totals.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::input(
            "activation_correct: no time slot with positive total",
        ));
    }
    let mut corrected = x.clone();
    let mut ratios = vec![0.0; x.n_slots];
    let mut excluded = Vec::new();
    for t in 0..x.n_slots {
        if totals[t] <= 0.0 {
            excluded.push(t);
            continue;
        }
        let r = totals[t] / peak;
        ratios[t] = r;
        for s in 0..x.n_stations {
            corrected.set(s, t, x.get(s, t) / r);
        }
    }
    Ok(ActivationCorrected {
        counts: corrected,
        ratios,
        peak_total: peak,
        excluded_slots: excluded,
    })
}

/// Replaces each in-boundary cell with the mean of its zone's values. Zone
/// sums are preserved exactly (mean × count = sum), so the aggregation-level
/// mass constraint holds over any union of whole zones.
pub fn aggregate(fine: &GridMap, zones: &ZonePartition) -> Result<GridMap> {
    if fine.height != zones.height || fine.width != zones.width {
        return Err(Error::partition("aggregate: zone raster size mismatch"));
    }
    let nz = zones.zone_count();
    let mut sums = vec![0.0; nz];
    let mut counts = vec![0usize; nz];
    for (i, &l) in zones.labels.iter().enumerate() {
        if l >= 0 {
            sums[l as usize] += fine.values[i];
            counts[l as usize] += 1;
        }
    }
    for (z, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::partition(format!(
                "aggregate: zone {z} has no in-boundary cells"
            )));
        }
    }
    let mut out = GridMap::zeros(fine.height, fine.width, zones.level);
    for (i, &l) in zones.labels.iter().enumerate() {
        if l >= 0 {
            out.values[i] = sums[l as usize] / counts[l as usize] as f64;
        }
    }
    Ok(out)
}

/// A multi-channel H×W raster, channel-major.
#[derive(Debug, Clone)]
pub struct MultiChannelMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MultiChannelMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape("multi-channel map size mismatch"));
        }
        Ok(MultiChannelMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// One training pair: a multi-channel input window and the matching
/// single-channel target window, plus its grid position.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub row: usize,
    pub col: usize,
}

/// Sliding-window offsets: multiples of `stride`, plus a final window
/// flushed to the far edge when the last strided window does not reach it.
fn window_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut offs = Vec::new();
    let mut pos = 0;
    while pos + patch <= dim {
        offs.push(pos);
        pos += stride;
    }
    let last = dim - patch;
    if offs.last() != Some(&last) {
        offs.push(last);
    }
    offs
}

/// Sliding-window (input, target) pairs. A window is dropped when more than
/// half of its area lies out of boundary.
pub fn extract_patches(
    input: &MultiChannelMap,
    target: &GridMap,
    patch: usize,
    stride: usize,
    mask: &BoundaryMask,
) -> Result<Vec<PatchPair>> {
    if input.height != target.height || input.width != target.width {
        return Err(Error::shape("extract_patches: input/target size mismatch"));
    }
    if patch == 0 || patch > input.height || patch > input.width {
        return Err(Error::shape(format!(
            "extract_patches: patch {patch} exceeds map {}x{}",
            input.height, input.width
        )));
    }
    if stride == 0 {
        return Err(Error::config("extract_patches: stride must be positive"));
    }
    let (h, w) = (input.height, input.width);
    let mut pairs = Vec::new();
    for &r0 in &window_offsets(h, patch, stride) {
        for &c0 in &window_offsets(w, patch, stride) {
            let mut outside = 0;
            for r in r0..r0 + patch {
                for c in c0..c0 + patch {
                    if !mask.get(r, c) {
                        outside += 1;
                    }
                }
            }
            if outside * 2 > patch * patch {
                continue;
            }
            let mut inp = Vec::with_capacity(input.channels * patch * patch);
            for ch in 0..input.channels {
                let plane = input.channel(ch);
                for r in r0..r0 + patch {
                    inp.extend_from_slice(&plane[r * w + c0..r * w + c0 + patch]);
                }
            }
            let mut tgt = Vec::with_capacity(patch * patch);
            for r in r0..r0 + patch {
                tgt.extend_from_slice(&target.values[r * w + c0..r * w + c0 + patch]);
            }
            pairs.push(PatchPair {
                input: inp,
                target: tgt,
                row: r0,
                col: c0,
            });
        }
    }
    Ok(pairs)
}

/// Counts PoIs per cell per category; PoIs mapped into the same grid cell
/// are counted together.
pub fn grid_pois(
    pois: &[(f64, f64, PoiCategory)],
    height: usize,
    width: usize,
    cell_km: f64,
) -> PoiGrid {
    let mut grid = PoiGrid::zeros(height, width);
    for &(x, y, cat) in pois {
        let col = ((x / cell_km).floor() as usize).min(width - 1);
        let row = ((y / cell_km).floor() as usize).min(height - 1);
        grid.counts[cat.index()][row * width + col] += 1.0;
    }
    grid
}

// ---------------------------------------------------------------------------
// GridMap CSV format: header `# level,H,W,day,hour`, then H rows of W values.
// Out-of-boundary cells are written as 0; the mask goes to a sibling
// `.mask.csv`.

pub fn write_gridmap_csv(path: &Path, map: &GridMap, time: FrameTime) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "# {},{},{},{},{}",
        map.level.as_u8(),
        map.height,
        map.width,
        time.day,
        time.hour
    )?;
    for r in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|c| {
                let v = map.get(r, c);
                if v.is_nan() {
                    // NaN forbidden in the format
                    String::from("0")
                } else {
                    format!("{v:.12e}")
                }
            })
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_mask_csv(path: &Path, mask: &BoundaryMask) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..mask.height {
        let row: Vec<&str> = (0..mask.width)
            .map(|c| if mask.get(r, c) { "1" } else { "0" })
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_gridmap_csv(path: &Path) -> Result<(GridMap, FrameTime)> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty grid map csv"))??;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::format("grid map csv missing header"))?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 5 {
        return Err(Error::format("grid map csv header needs 5 fields"));
    }
    let level = Level::from_u8(
        parts[0]
            .parse::<u8>()
            .map_err(|_| Error::format("bad level field"))?,
    )?;
    let h: usize = parts[1].parse().map_err(|_| Error::format("bad H"))?;
    let w: usize = parts[2].parse().map_err(|_| Error::format("bad W"))?;
    let day: usize = parts[3].parse().map_err(|_| Error::format("bad day"))?;
    let hour: usize = parts[4].parse().map_err(|_| Error::format("bad hour"))?;
    let mut values = Vec::with_capacity(h * w);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad value {tok:?}")))?;
            if v.is_nan() {
                return Err(Error::format("NaN forbidden in grid map csv"));
            }
            values.push(v);
        }
    }
    let map = GridMap::from_values(h, w, values, level)?;
    Ok((map, FrameTime { day, hour }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PoiCategory;

    fn times(n: usize) -> Vec<FrameTime> {
        (0..n)
            .map(|i| FrameTime {
                day: i / 24,
                hour: i % 24,
            })
            .collect()
    }

    #[test]
    fn activation_constant_input_is_identity() {
        let mut x = StationCounts::zeros(2, times(3));
        for t in 0..3 {
            x.set(0, t, 4.0);
            x.set(1, t, 6.0);
        }
        let out = activation_correct(&x).unwrap();
        assert!(out.ratios.iter().all(|r| (*r - 1.0).abs() < 1e-12));
        assert_eq!(out.counts.data, x.data);
    }

    #[test]
    fn activation_direct_evaluation() {
        // X = [[3,1],[1,1]] → S = [4,2], R = [1, 0.5], Y[:,1] = [2,2]
        let mut x = StationCounts::zeros(2, times(2));
        x.set(0, 0, 3.0);
        x.set(0, 1, 1.0);
        x.set(1, 0, 1.0);
        x.set(1, 1, 1.0);
        let out = activation_correct(&x).unwrap();
        assert_eq!(out.ratios, vec![1.0, 0.5]);
        assert_eq!(out.counts.get(0, 1), 2.0);
        assert_eq!(out.counts.get(1, 1), 2.0);
        assert_eq!(out.peak_total, 4.0);
    }

    #[test]
    fn activation_totals_all_equal_peak() {
        let mut x = StationCounts::zeros(3, times(5));
        let vals = [
            [3.0, 0.5, 2.0, 1.0, 4.0],
            [1.0, 2.5, 0.0, 2.0, 1.0],
            [0.5, 1.0, 3.0, 0.5, 2.0],
        ];
        for (s, row) in vals.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                x.set(s, t, *v);
            }
        }
        let out = activation_correct(&x).unwrap();
        for t in 0..5 {
            let total = out.counts.slot_total(t);
            assert!(
                (total - out.peak_total).abs() <= 1e-9 * out.peak_total,
                "slot {t}: {total} vs {}",
                out.peak_total
            );
        }
    }

    #[test]
    fn activation_flags_all_zero_slot() {
        let mut x = StationCounts::zeros(2, times(3));
        x.set(0, 0, 1.0);
        x.set(1, 2, 2.0);
        let out = activation_correct(&x).unwrap();
        assert_eq!(out.excluded_slots, vec![1]);
    }

    #[test]
    fn aggregate_single_zone_mean_preserves_sum() {
        let fine = GridMap::from_values(2, 2, vec![1.0, 3.0, 5.0, 7.0], Level::Fine).unwrap();
        let zones = ZonePartition::new(2, 2, vec![0, 0, 0, 0], Level::District).unwrap();
        let out = aggregate(&fine, &zones).unwrap();
        assert!(out.values.iter().all(|v| (*v - 4.0).abs() < 1e-12));
        let sum: f64 = out.values.iter().sum();
        assert!((sum - 16.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_identity_partition_is_identity() {
        let mask = BoundaryMask::all_inside(3, 3);
        let fine = GridMap::from_values(3, 3, (0..9).map(|i| i as f64).collect(), Level::Fine)
            .unwrap();
        let zones = ZonePartition::identity(&mask, Level::StreetBlock);
        let out = aggregate(&fine, &zones).unwrap();
        assert_eq!(out.values, fine.values);
    }

    #[test]
    fn patch_equal_to_map_gives_one_pair() {
        let inp = MultiChannelMap::new(1, 4, 4, vec![1.0; 16]).unwrap();
        let tgt = GridMap::from_values(4, 4, vec![2.0; 16], Level::Fine).unwrap();
        let mask = BoundaryMask::all_inside(4, 4);
        let pairs = extract_patches(&inp, &tgt, 4, 2, &mask).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].input.len(), 16);
    }

    #[test]
    fn fully_out_of_boundary_window_dropped() {
        let inp = MultiChannelMap::new(1, 4, 8, vec![1.0; 32]).unwrap();
        let tgt = GridMap::from_values(4, 8, vec![0.0; 32], Level::Fine).unwrap();
        let mut mask = BoundaryMask::all_inside(4, 8);
        // right half out of boundary
        for r in 0..4 {
            for c in 4..8 {
                mask.inside[r * 8 + c] = false;
            }
        }
        let pairs = extract_patches(&inp, &tgt, 4, 4, &mask).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].row, pairs[0].col), (0, 0));
    }

    #[test]
    fn paper_scale_patch_count_matches_closed_form() {
        // 83×114 map, 38×38 patches, stride 19:
        // rows ⌈(83−38)/19⌉+1 = 4, cols ⌈(114−38)/19⌉+1 = 5 → 20 windows
        let inp = MultiChannelMap::new(1, 83, 114, vec![0.0; 83 * 114]).unwrap();
        let tgt = GridMap::zeros(83, 114, Level::Fine);
        let mask = BoundaryMask::all_inside(83, 114);
        let pairs = extract_patches(&inp, &tgt, 38, 19, &mask).unwrap();
        let rows = (83usize - 38).div_ceil(19) + 1;
        let cols = (114usize - 38).div_ceil(19) + 1;
        assert_eq!(pairs.len(), rows * cols);
        assert_eq!(pairs.len(), 20);
    }

    #[test]
    fn poi_gridding_counts_together() {
        let pois = vec![
            (0.5, 0.5, PoiCategory::Business),
            (0.7, 0.3, PoiCategory::Business),
            (1.5, 0.5, PoiCategory::Residence),
        ];
        let grid = grid_pois(&pois, 2, 2, 1.0);
        assert_eq!(grid.counts[PoiCategory::Business.index()][0], 2.0);
        assert_eq!(grid.counts[PoiCategory::Residence.index()][1], 1.0);
    }

    #[test]
    fn gridmap_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let map = GridMap::from_values(2, 3, vec![0.0, 1.5, 2.25, 3.0, 4.125, 5.0], Level::Fine)
            .unwrap();
        let t = FrameTime { day: 2, hour: 13 };
        write_gridmap_csv(&path, &map, t).unwrap();
        let (back, t2) = read_gridmap_csv(&path).unwrap();
        assert_eq!(t2, t);
        assert_eq!(back.level, Level::Fine);
        for (a, b) in back.values.iter().zip(&map.values) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
