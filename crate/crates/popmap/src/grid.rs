//! Raster domain types: grid maps, population cubes, zone partitions and
//! PoI rasters. All levels share one H×W pixel grid; coarser levels are
//! block-constant over their zones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation tier of a population raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    /// Coarsest tier (X1).
    District = 1,
    /// Middle tier (X2).
    StreetBlock = 2,
    /// Finest tier (X3 / X_fg), one value per cell.
    Fine = 3,
}

impl Level {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Level> {
        match v {
            1 => Ok(Level::District),
            2 => Ok(Level::StreetBlock),
            3 => Ok(Level::Fine),
            _ => Err(Error::format(format!("unknown level tag {v}"))),
        }
    }
}

/// Boolean in-boundary mask over an H×W grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMask {
    pub height: usize,
    pub width: usize,
    pub inside: Vec<bool>,
}

impl BoundaryMask {
    pub fn all_inside(height: usize, width: usize) -> Self {
        BoundaryMask {
            height,
            width,
            inside: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.inside[row * self.width + col]
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|b| **b).count()
    }
}

/// A single-channel H×W raster of non-negative population at one time slot
/// and one aggregation level. Out-of-boundary cells are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub level: Level,
}

impl GridMap {
    pub fn zeros(height: usize, width: usize, level: Level) -> Self {
        GridMap {
            height,
            width,
            values: vec![0.0; height * width],
            level,
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>, level: Level) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "grid map expects {}x{}={} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(GridMap {
            height,
            width,
            values,
            level,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    /// Total population over in-boundary cells.
    pub fn masked_total(&self, mask: &BoundaryMask) -> f64 {
        self.values
            .iter()
            .zip(&mask.inside)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .sum()
    }

    /// Zeroes every out-of-boundary cell in place.
    pub fn apply_mask(&mut self, mask: &BoundaryMask) {
        for (v, m) in self.values.iter_mut().zip(&mask.inside) {
            if !*m {
                *v = 0.0;
            }
        }
    }
}

/// Timestamp of one frame: (weekday index, hour of day).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameTime {
    pub day: usize,
    pub hour: usize,
}

/// An ordered stack of grid maps at a common level and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopCube {
    pub frames: Vec<GridMap>,
    pub times: Vec<FrameTime>,
}

impl PopCube {
    pub fn new(frames: Vec<GridMap>, times: Vec<FrameTime>) -> Result<Self> {
        if frames.len() != times.len() {
            return Err(Error::shape("frame/timestamp count mismatch"));
        }
        if let Some(first) = frames.first() {
            for f in &frames {
                if f.height != first.height || f.width != first.width || f.level != first.level {
                    return Err(Error::shape("cube frames must share shape and level"));
                }
            }
        }
        for pair in times.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::shape("cube timestamps must be strictly increasing"));
            }
        }
        Ok(PopCube { frames, times })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn level(&self) -> Level {
        self.frames[0].level
    }

    /// Days present, in order, deduplicated.
    pub fn days(&self) -> Vec<usize> {
        let mut days: Vec<usize> = self.times.iter().map(|t| t.day).collect();
        days.dedup();
        days
    }

    /// Sub-cube restricted to the given days (order preserved).
    pub fn select_days(&self, days: &[usize]) -> PopCube {
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for (f, t) in self.frames.iter().zip(&self.times) {
            if days.contains(&t.day) {
                frames.push(f.clone());
                times.push(*t);
            }
        }
        PopCube { frames, times }
    }

    /// Sub-cube restricted to hours in `[start, end)`.
    pub fn select_hours(&self, start: usize, end: usize) -> PopCube {
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for (f, t) in self.frames.iter().zip(&self.times) {
            if t.hour >= start && t.hour < end {
                frames.push(f.clone());
                times.push(*t);
            }
        }
        PopCube { frames, times }
    }
}

/// Grid-cell → zone-id labeling defining one aggregation level.
/// Label −1 marks out-of-boundary cells; in-boundary labels are contiguous
/// `0..zone_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonePartition {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i32>,
    pub level: Level,
}

impl ZonePartition {
    pub fn new(height: usize, width: usize, labels: Vec<i32>, level: Level) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::partition("label raster size mismatch"));
        }
        let p = ZonePartition {
            height,
            width,
            labels,
            level,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let max = self.labels.iter().copied().max().unwrap_or(-1);
        if max < 0 {
            return Err(Error::partition("partition has no in-boundary zone"));
        }
        let mut seen = vec![false; (max + 1) as usize];
        for &l in &self.labels {
            if l < -1 {
                return Err(Error::partition(format!("invalid zone label {l}")));
            }
            if l >= 0 {
                seen[l as usize] = true;
            }
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::partition(format!(
                "zone labels not contiguous: zone {gap} has no cells"
            )));
        }
        Ok(())
    }

    pub fn zone_count(&self) -> usize {
        (self.labels.iter().copied().max().unwrap_or(-1) + 1) as usize
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    /// Cell indices grouped by zone.
    pub fn zone_cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.zone_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                cells[l as usize].push(i);
            }
        }
        cells
    }

    /// The per-cell identity partition under `mask` (every in-boundary cell
    /// its own zone).
    pub fn identity(mask: &BoundaryMask, level: Level) -> ZonePartition {
        let mut labels = vec![-1i32; mask.height * mask.width];
        let mut next = 0;
        for (i, &inside) in mask.inside.iter().enumerate() {
            if inside {
                labels[i] = next;
                next += 1;
            }
        }
        ZonePartition {
            height: mask.height,
            width: mask.width,
            labels,
            level,
        }
    }

    /// True when every zone of `self` lies inside exactly one zone of
    /// `coarser`.
    pub fn nested_in(&self, coarser: &ZonePartition) -> bool {
        if self.height != coarser.height || self.width != coarser.width {
            return false;
        }
        let mut parent = vec![-2i32; self.zone_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            let c = coarser.labels[i];
            if (l >= 0) != (c >= 0) {
                return false;
            }
            if l >= 0 {
                if parent[l as usize] == -2 {
                    parent[l as usize] = c;
                } else if parent[l as usize] != c {
                    return false;
                }
            }
        }
        true
    }
}

/// Four categories of points of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoiCategory {
    Entertainment,
    Business,
    Transportation,
    Residence,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 4] = [
        PoiCategory::Entertainment,
        PoiCategory::Business,
        PoiCategory::Transportation,
        PoiCategory::Residence,
    ];

    pub fn index(self) -> usize {
        match self {
            PoiCategory::Entertainment => 0,
            PoiCategory::Business => 1,
            PoiCategory::Transportation => 2,
            PoiCategory::Residence => 3,
        }
    }
}

/// Per-category H×W count rasters. PoIs falling in the same cell are counted
/// together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiGrid {
    pub height: usize,
    pub width: usize,
    /// Indexed by `PoiCategory::index()`.
    pub counts: [Vec<f64>; 4],
}

impl PoiGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        PoiGrid {
            height,
            width,
            counts: std::array::from_fn(|_| vec![0.0; height * width]),
        }
    }

    pub fn channel(&self, cat: PoiCategory) -> &[f64] {
        &self.counts[cat.index()]
    }
}
