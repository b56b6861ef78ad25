//! Deterministic synthetic-city generator: base stations, nested zone
//! partitions, PoIs and hourly ground-truth fine-grained population.
//!
//! The city lives on an abstract planar km grid with an elliptical boundary.
//! Population density decays from a downtown center; per-street-block
//! function classes (residential, workplace, transit, mixed, suburb) drive
//! both the diurnal profile of each zone and the category mix of its PoIs,
//! so PoI rasters carry real signal about where population concentrates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    BoundaryMask, FrameTime, GridMap, Level, PoiCategory, PopCube, ZonePartition,
};
use crate::preprocess::StationCounts;
use crate::voronoi::nearest_station;

/// Function class of a street-block zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionClass {
    Residential,
    Workplace,
    Transit,
    Mixed,
    Suburb,
}

impl FunctionClass {
    pub const ALL: [FunctionClass; 5] = [
        FunctionClass::Residential,
        FunctionClass::Workplace,
        FunctionClass::Transit,
        FunctionClass::Mixed,
        FunctionClass::Suburb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionClass::Residential => "residential",
            FunctionClass::Workplace => "workplace",
            FunctionClass::Transit => "transit",
            FunctionClass::Mixed => "mixed",
            FunctionClass::Suburb => "suburb",
        }
    }

    /// 24 positive hourly multipliers describing the typical diurnal trend.
    pub fn hourly_shape(self) -> [f64; 24] {
        match self {
            // high at night, dips to a low level through the working day
            FunctionClass::Residential => [
                1.28, 1.30, 1.30, 1.30, 1.28, 1.22, 1.10, 0.90, 0.68, 0.52, 0.48, 0.46, 0.46,
                0.46, 0.48, 0.52, 0.60, 0.78, 0.98, 1.10, 1.18, 1.24, 1.28, 1.30,
            ],
            // mirror image: peaks during working hours
            FunctionClass::Workplace => [
                0.24, 0.22, 0.22, 0.22, 0.24, 0.32, 0.52, 0.95, 1.55, 1.85, 1.92, 1.95, 1.88,
                1.90, 1.94, 1.88, 1.70, 1.30, 0.92, 0.62, 0.46, 0.36, 0.30, 0.26,
            ],
            // commute peaks around 8:00 and 18:00
            FunctionClass::Transit => [
                0.25, 0.22, 0.22, 0.24, 0.30, 0.50, 0.95, 1.60, 1.85, 1.30, 1.00, 0.95, 0.98,
                0.95, 0.98, 1.05, 1.25, 1.65, 1.80, 1.35, 0.90, 0.60, 0.42, 0.30,
            ],
            // moderate daytime surplus
            FunctionClass::Mixed => [
                0.80, 0.78, 0.78, 0.78, 0.80, 0.85, 0.95, 1.05, 1.15, 1.20, 1.22, 1.24, 1.22,
                1.22, 1.22, 1.20, 1.18, 1.15, 1.12, 1.05, 0.98, 0.92, 0.86, 0.82,
            ],
            // nearly flat
            FunctionClass::Suburb => [
                1.04, 1.05, 1.05, 1.05, 1.04, 1.02, 1.00, 0.97, 0.95, 0.94, 0.94, 0.94, 0.94,
                0.94, 0.95, 0.96, 0.97, 0.99, 1.00, 1.01, 1.02, 1.03, 1.04, 1.04,
            ],
        }
    }

    /// PoI category mix (entertainment, business, transportation, residence).
    fn poi_mix(self) -> [f64; 4] {
        match self {
            FunctionClass::Residential => [0.10, 0.10, 0.05, 0.75],
            FunctionClass::Workplace => [0.15, 0.65, 0.10, 0.10],
            FunctionClass::Transit => [0.10, 0.15, 0.65, 0.10],
            FunctionClass::Mixed => [0.45, 0.30, 0.10, 0.15],
            FunctionClass::Suburb => [0.15, 0.20, 0.15, 0.50],
        }
    }

    fn density_factor(self) -> f64 {
        match self {
            FunctionClass::Residential => 1.2,
            FunctionClass::Workplace => 1.0,
            FunctionClass::Transit => 0.8,
            FunctionClass::Mixed => 1.4,
            FunctionClass::Suburb => 0.4,
        }
    }
}

/// Typical temporal profile attached to a street-block zone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionProfile {
    pub function_class: FunctionClass,
    /// Mean persons per cell of the zone at the reference (flat) hour.
    pub base_level: f64,
    pub hourly_shape: [f64; 24],
}

/// Generator knobs. `generate_city` derives sensible zone counts from the
/// grid size when using the convenience constructor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_km: f64,
    pub n_stations: usize,
    pub n_pois: usize,
    pub n_districts: usize,
    pub n_street_blocks: usize,
    pub n_days: usize,
    /// Lognormal sigma of the per-zone day-to-day multiplier.
    pub day_noise_sigma: f64,
    /// Mean persons per in-boundary cell.
    pub mean_cell_population: f64,
}

impl CityConfig {
    /// Defaults scaled from the grid size: district → street-block →
    /// fine zone counts grow by roughly equal enhancement ratios.
    pub fn for_grid(grid_h: usize, grid_w: usize, n_stations: usize, n_pois: usize) -> Self {
        let in_cells = (std::f64::consts::PI / 4.0 * (grid_h * grid_w) as f64).round() as usize;
        let n_districts = ((in_cells as f64).powf(1.0 / 3.0)).round().max(4.0) as usize;
        let n_street_blocks =
            ((n_districts as f64 * in_cells as f64).sqrt()).round().max(n_districts as f64 + 1.0)
                as usize;
        CityConfig {
            grid_h,
            grid_w,
            cell_km: 1.0,
            n_stations,
            n_pois,
            n_districts,
            n_street_blocks,
            n_days: 5,
            day_noise_sigma: 0.05,
            mean_cell_population: 150.0,
        }
    }
}

/// The generated city: geometry, partitions, stations, PoIs and profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityModel {
    pub config: CityConfig,
    pub seed: u64,
    pub mask: BoundaryMask,
    pub stations: Vec<(f64, f64)>,
    /// Nested partitions, coarse to fine:
    /// district, intermediate-A, street-block, intermediate-B, fine.
    pub ladder: Vec<ZonePartition>,
    pub pois: Vec<(f64, f64, PoiCategory)>,
    /// Per street-block zone.
    pub profiles: Vec<RegionProfile>,
    /// Grid coordinate (row, col) of the max-density cell.
    pub downtown_center: (usize, usize),
    /// Persons per cell at the reference hour.
    pub base_density: Vec<f64>,
}

impl CityModel {
    pub fn districts(&self) -> &ZonePartition {
        &self.ladder[0]
    }

    pub fn street_blocks(&self) -> &ZonePartition {
        &self.ladder[2]
    }

    pub fn fine(&self) -> &ZonePartition {
        &self.ladder[4]
    }

    /// Street-block zone label per cell, -1 outside.
    pub fn street_zone_of(&self, cell: usize) -> i32 {
        self.street_blocks().labels[cell]
    }

    pub fn function_class_of_cell(&self, cell: usize) -> Option<FunctionClass> {
        let z = self.street_zone_of(cell);
        (z >= 0).then(|| self.profiles[z as usize].function_class)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CityFile::from_model(self);
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<CityModel> {
        let file: CityFile = serde_json::from_str(json)?;
        file.into_model()
    }
}

// ---------------------------------------------------------------------------
// JSON serialization with run-length-encoded zone label rasters.

#[derive(Serialize, Deserialize)]
struct RlePartition {
    level: Level,
    /// (value, run length) pairs in row-major order.
    runs: Vec<(i32, u32)>,
}

impl RlePartition {
    fn encode(p: &ZonePartition) -> Self {
        let mut runs: Vec<(i32, u32)> = Vec::new();
        for &l in &p.labels {
            match runs.last_mut() {
                Some((v, n)) if *v == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        RlePartition {
            level: p.level,
            runs,
        }
    }

    fn decode(&self, height: usize, width: usize) -> Result<ZonePartition> {
        let mut labels = Vec::with_capacity(height * width);
        for &(v, n) in &self.runs {
            labels.extend(std::iter::repeat(v).take(n as usize));
        }
        ZonePartition::new(height, width, labels, self.level)
    }
}

#[derive(Serialize, Deserialize)]
struct CityFile {
    config: CityConfig,
    seed: u64,
    bounds_km: (f64, f64),
    mask_runs: Vec<(bool, u32)>,
    stations: Vec<(f64, f64)>,
    ladder: Vec<RlePartition>,
    pois: Vec<(f64, f64, PoiCategory)>,
    profiles: Vec<RegionProfile>,
    downtown_center: (usize, usize),
    base_density: Vec<f64>,
}

impl CityFile {
    fn from_model(m: &CityModel) -> CityFile {
        let mut mask_runs: Vec<(bool, u32)> = Vec::new();
        for &b in &m.mask.inside {
            match mask_runs.last_mut() {
                Some((v, n)) if *v == b => *n += 1,
                _ => mask_runs.push((b, 1)),
            }
        }
        CityFile {
            config: m.config.clone(),
            seed: m.seed,
            bounds_km: (
                m.config.grid_w as f64 * m.config.cell_km,
                m.config.grid_h as f64 * m.config.cell_km,
            ),
            mask_runs,
            stations: m.stations.clone(),
            ladder: m.ladder.iter().map(RlePartition::encode).collect(),
            pois: m.pois.clone(),
            profiles: m.profiles.clone(),
            downtown_center: m.downtown_center,
            base_density: m.base_density.clone(),
        }
    }

    fn into_model(self) -> Result<CityModel> {
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let mut inside = Vec::with_capacity(h * w);
        for (v, n) in &self.mask_runs {
            inside.extend(std::iter::repeat(*v).take(*n as usize));
        }
        if inside.len() != h * w {
            return Err(Error::format("city file: mask run length mismatch"));
        }
        let mask = BoundaryMask {
            height: h,
            width: w,
            inside,
        };
        let ladder = self
            .ladder
            .iter()
            .map(|p| p.decode(h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(CityModel {
            config: self.config,
            seed: self.seed,
            mask,
            stations: self.stations,
            ladder,
            pois: self.pois,
            profiles: self.profiles,
            downtown_center: self.downtown_center,
            base_density: self.base_density,
        })
    }
}

// ---------------------------------------------------------------------------
// generation

fn elliptical_mask(h: usize, w: usize) -> BoundaryMask {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut inside = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 + 0.5 - cy) / cy;
            let dx = (c as f64 + 0.5 - cx) / cx;
            inside[r * w + c] = dy * dy + dx * dx <= 1.0;
        }
    }
    BoundaryMask {
        height: h,
        width: w,
        inside,
    }
}

/// Subdivides each zone of `parent` into roughly `factor` sub-zones by
/// nearest-seed assignment among the zone's own cells. Nesting holds by
/// construction; every seed owns at least its own cell.
fn subdivide(
    parent: &ZonePartition,
    factor: f64,
    level: Level,
    rng: &mut ChaCha8Rng,
) -> Result<ZonePartition> {
    let (h, w) = (parent.height, parent.width);
    let mut labels = vec![-1i32; h * w];
    let mut next = 0i32;
    for cells in parent.zone_cells() {
        let k = (factor.round() as usize).clamp(1, cells.len());
        let mut seeds = cells.clone();
        seeds.shuffle(rng);
        seeds.truncate(k);
        for &cell in &cells {
            let (r, c) = (cell / w, cell % w);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (si, &s) in seeds.iter().enumerate() {
                let (sr, sc) = (s / w, s % w);
                let d = ((r as f64 - sr as f64).powi(2) + (c as f64 - sc as f64).powi(2))
                    // deterministic tie-break toward earlier seeds
                    + si as f64 * 1e-9;
                if d < best_d {
                    best_d = d;
                    best = si;
                }
            }
            labels[cell] = next + best as i32;
        }
        // relabel so only seeds that actually own cells consume ids
        let mut used: Vec<i32> = cells.iter().map(|&c| labels[c]).collect();
        used.sort_unstable();
        used.dedup();
        for &cell in &cells {
            let l = labels[cell];
            labels[cell] = next + used.iter().position(|&u| u == l).unwrap() as i32;
        }
        next += used.len() as i32;
    }
    ZonePartition::new(h, w, labels, level)
}

/// Weighted sample of `k` distinct cell indices.
fn sample_cells_weighted(
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut x = rng.gen_range(0.0..total);
        let mut pick = 0;
        for (i, wi) in w.iter().enumerate() {
            x -= wi;
            if x <= 0.0 {
                pick = i;
                break;
            }
        }
        out.push(pick);
        w[pick] = 0.0;
    }
    out
}

/// Builds a reproducible synthetic city. Stations cluster where population
/// is dense; PoI category mix follows each zone's function class.
pub fn generate_city(
    seed: u64,
    grid_h: usize,
    grid_w: usize,
    n_stations: usize,
    n_pois: usize,
) -> Result<CityModel> {
    generate_city_with(CityConfig::for_grid(grid_h, grid_w, n_stations, n_pois), seed)
}

pub fn generate_city_with(config: CityConfig, seed: u64) -> Result<CityModel> {
    let (h, w) = (config.grid_h, config.grid_w);
    if h < 16 || w < 16 {
        return Err(Error::config("generate_city: grid must be at least 16x16"));
    }
    if config.n_stations < 4 {
        return Err(Error::config("generate_city: need at least 4 stations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = elliptical_mask(h, w);
    let in_cells: Vec<usize> = (0..h * w).filter(|&i| mask.inside[i]).collect();

    // downtown near the grid center with a little jitter
    let downtown = (
        (h as f64 / 2.0 + rng.gen_range(-0.08..0.08) * h as f64),
        (w as f64 / 2.0 + rng.gen_range(-0.08..0.08) * w as f64),
    );

    // nested partition ladder with roughly equal enhancement ratios
    let root = {
        let mut labels = vec![-1i32; h * w];
        for &i in &in_cells {
            labels[i] = 0;
        }
        ZonePartition::new(h, w, labels, Level::District)?
    };
    let nd = config.n_districts as f64;
    let ns = config.n_street_blocks as f64;
    let nf = in_cells.len() as f64;
    let n_int_a = (nd * ns).sqrt();
    let n_int_b = (ns * nf).sqrt();
    let districts = subdivide(&root, nd, Level::District, &mut rng)?;
    let int_a = subdivide(&districts, n_int_a / districts.zone_count() as f64, Level::StreetBlock, &mut rng)?;
    let street = subdivide(&int_a, ns / int_a.zone_count() as f64, Level::StreetBlock, &mut rng)?;
    let int_b = subdivide(&street, n_int_b / street.zone_count() as f64, Level::Fine, &mut rng)?;
    let fine = ZonePartition::identity(&mask, Level::Fine);

    // function classes per street-block zone by distance to downtown
    let radius = (h.min(w)) as f64 / 2.0;
    let street_cells = street.zone_cells();
    let mut classes: Vec<FunctionClass> = street_cells
        .iter()
        .map(|cells| {
            let (mut ry, mut rx) = (0.0, 0.0);
            for &cell in cells {
                ry += (cell / w) as f64 + 0.5;
                rx += (cell % w) as f64 + 0.5;
            }
            ry /= cells.len() as f64;
            rx /= cells.len() as f64;
            let d = ((ry - downtown.0).powi(2) + (rx - downtown.1).powi(2)).sqrt() / radius;
            if d < 0.25 {
                FunctionClass::Mixed
            } else if d < 0.48 {
                FunctionClass::Workplace
            } else if d < 0.78 {
                FunctionClass::Residential
            } else {
                FunctionClass::Suburb
            }
        })
        .collect();
    // sprinkle transit hubs
    for class in classes.iter_mut() {
        if rng.gen_bool(0.07) {
            *class = FunctionClass::Transit;
        }
    }

    // base density: downtown falloff × class factor × zone and cell texture
    let sigma = 0.38 * radius;
    let zone_noise = LogNormal::new(0.0, 0.30).expect("lognormal");
    let cell_noise = LogNormal::new(0.0, 0.18).expect("lognormal");
    let zone_factor: Vec<f64> = (0..street.zone_count())
        .map(|_| zone_noise.sample(&mut rng))
        .collect();
    let mut base = vec![0.0; h * w];
    for &cell in &in_cells {
        let (r, c) = (cell / w, cell % w);
        let dy = r as f64 + 0.5 - downtown.0;
        let dx = c as f64 + 0.5 - downtown.1;
        let falloff = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        let z = street.labels[cell] as usize;
        base[cell] = (0.08 + falloff)
            * classes[z].density_factor()
            * zone_factor[z]
            * cell_noise.sample(&mut rng);
    }
    let total: f64 = base.iter().sum();
    let scale = config.mean_cell_population * in_cells.len() as f64 / total;
    for v in &mut base {
        *v *= scale;
    }
    let downtown_center = {
        let best = in_cells
            .iter()
            .copied()
            .max_by(|&a, &b| base[a].partial_cmp(&base[b]).unwrap())
            .unwrap();
        (best / w, best % w)
    };

    // stations cluster with population
    let station_cells = sample_cells_weighted(&base, config.n_stations, &mut rng);
    if station_cells.len() < config.n_stations {
        return Err(Error::config("generate_city: not enough cells for stations"));
    }
    let stations: Vec<(f64, f64)> = station_cells
        .iter()
        .map(|&cell| {
            let (r, c) = (cell / w, cell % w);
            (
                (c as f64 + rng.gen_range(0.2..0.8)) * config.cell_km,
                (r as f64 + rng.gen_range(0.2..0.8)) * config.cell_km,
            )
        })
        .collect();

    // PoIs: density-weighted cells, category mix from the zone class
    let mut pois = Vec::with_capacity(config.n_pois);
    let cum: Vec<f64> = base
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let total_w = *cum.last().unwrap();
    for _ in 0..config.n_pois {
        let x = rng.gen_range(0.0..total_w);
        let cell = cum.partition_point(|&c| c < x).min(h * w - 1);
        let z = street.labels[cell];
        if z < 0 {
            continue;
        }
        let mix = classes[z as usize].poi_mix();
        let mut pick = rng.gen_range(0.0..1.0);
        let mut cat = PoiCategory::Residence;
        for (ci, &p) in mix.iter().enumerate() {
            pick -= p;
            if pick <= 0.0 {
                cat = PoiCategory::ALL[ci];
                break;
            }
        }
        let (r, c) = (cell / w, cell % w);
        pois.push((
            (c as f64 + rng.gen_range(0.0..1.0)) * config.cell_km,
            (r as f64 + rng.gen_range(0.0..1.0)) * config.cell_km,
            cat,
        ));
    }

    // profiles per street zone
    let profiles: Vec<RegionProfile> = (0..street.zone_count())
        .map(|z| {
            let cells = &street_cells[z];
            let mean = cells.iter().map(|&c| base[c]).sum::<f64>() / cells.len() as f64;
            RegionProfile {
                function_class: classes[z],
                base_level: mean,
                hourly_shape: classes[z].hourly_shape(),
            }
        })
        .collect();

    Ok(CityModel {
        config,
        seed,
        mask,
        stations,
        ladder: vec![districts, int_a, street, int_b, fine],
        pois,
        profiles,
        downtown_center,
        base_density: base,
    })
}

/// Hourly ground-truth fine-grained population for `n_days` weekdays.
/// Pre-noise hourly city totals are normalized to be exactly constant; the
/// per-zone day-level lognormal noise then perturbs them by well under 2%.
pub fn generate_population(city: &CityModel, seed: u64) -> Result<PopCube> {
    let cfg = &city.config;
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let street = city.street_blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_706d_6170);

    // hour normalization so that pre-noise totals match the daily mean
    let mut hour_total = [0.0f64; 24];
    for cell in 0..h * w {
        let z = street.labels[cell];
        if z < 0 {
            continue;
        }
        let shape = &city.profiles[z as usize].hourly_shape;
        for hh in 0..24 {
            hour_total[hh] += city.base_density[cell] * shape[hh];
        }
    }
    let mean_total: f64 = hour_total.iter().sum::<f64>() / 24.0;
    let hour_norm: Vec<f64> = hour_total.iter().map(|t| mean_total / t).collect();

    let day_noise = if cfg.day_noise_sigma > 0.0 {
        Some(LogNormal::new(0.0, cfg.day_noise_sigma).expect("lognormal"))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(cfg.n_days * 24);
    let mut times = Vec::with_capacity(cfg.n_days * 24);
    for day in 0..cfg.n_days {
        let zone_day: Vec<f64> = (0..street.zone_count())
            .map(|_| day_noise.as_ref().map_or(1.0, |d| d.sample(&mut rng)))
            .collect();
        for hour in 0..24 {
            let mut map = GridMap::zeros(h, w, Level::Fine);
            for cell in 0..h * w {
                let z = street.labels[cell];
                if z < 0 {
                    continue;
                }
                let profile = &city.profiles[z as usize];
                map.values[cell] = city.base_density[cell]
                    * profile.hourly_shape[hour]
                    * hour_norm[hour]
                    * zone_day[z as usize];
            }
            frames.push(map);
            times.push(FrameTime { day, hour });
        }
    }
    PopCube::new(frames, times)
}

/// Synthetic raw device records: each cell's population goes to its nearest
/// station, then counts are thinned by the hour's activation factor
/// (binomial when the factor is below one).
pub fn simulate_device_records(
    truth: &PopCube,
    city: &CityModel,
    dropout_profile: &[f64; 24],
    seed: u64,
) -> Result<StationCounts> {
    if dropout_profile.iter().any(|p| *p <= 0.0 || *p > 1.0) {
        return Err(Error::input("dropout factors must lie in (0, 1]"));
    }
    let cfg = &city.config;
    let assignment = nearest_station(
        &city.stations,
        cfg.grid_h,
        cfg.grid_w,
        cfg.cell_km,
        &city.mask,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_636f_7264);
    let mut counts = StationCounts::zeros(city.stations.len(), truth.times.clone());
    for (t, frame) in truth.frames.iter().enumerate() {
        let p = dropout_profile[truth.times[t].hour];
        let mut station_pop = vec![0.0; city.stations.len()];
        for (cell, &s) in assignment.iter().enumerate() {
            if s != usize::MAX {
                station_pop[s] += frame.values[cell];
            }
        }
        for (s, &pop) in station_pop.iter().enumerate() {
            let observed = if p >= 1.0 {
                pop
            } else {
                let n = pop.round().max(0.0) as u64;
                Binomial::new(n, p).expect("binomial").sample(&mut rng) as f64
            };
            counts.set(s, t, observed);
        }
    }
    Ok(counts)
}

/// Hour-by-class device-activity factors: the fraction of people present
/// in a cell whose devices are visible to the network at that hour. Models
/// night-time inactivity at home — people asleep in residential areas are
/// invisible to the stations, a loss that the citywide activation ratio
/// cannot undo because it is not uniform across regions.
#[derive(Debug, Clone)]
pub struct ActivityProfiles {
    pub residential: [f64; 24],
    pub workplace: [f64; 24],
    pub transit: [f64; 24],
    pub mixed: [f64; 24],
    pub suburb: [f64; 24],
}

impl ActivityProfiles {
    pub fn factor(&self, class: FunctionClass, hour: usize) -> f64 {
        match class {
            FunctionClass::Residential => self.residential[hour],
            FunctionClass::Workplace => self.workplace[hour],
            FunctionClass::Transit => self.transit[hour],
            FunctionClass::Mixed => self.mixed[hour],
            FunctionClass::Suburb => self.suburb[hour],
        }
    }
}

impl Default for ActivityProfiles {
    fn default() -> Self {
        // sleepers' devices go quiet roughly 23:00-06:00 where people are
        // at home; workplaces and transit hubs host active devices all day
        let mut residential = [1.0; 24];
        let mut suburb = [1.0; 24];
        let mut mixed = [1.0; 24];
        for h in 0..24 {
            let night = match h {
                0..=4 => 1.0,
                5 => 0.7,
                6 => 0.35,
                7..=21 => 0.0,
                22 => 0.5,
                _ => 0.9,
            };
            residential[h] = 1.0 - 0.75 * night;
            suburb[h] = 1.0 - 0.70 * night;
            mixed[h] = 1.0 - 0.45 * night;
        }
        ActivityProfiles {
            residential,
            workplace: [1.0; 24],
            transit: [1.0; 24],
            mixed,
            suburb,
        }
    }
}

/// Like [`simulate_device_records`], but thins each cell's population by
/// `dropout_profile[hour] * activity.factor(class, hour)` before assigning
/// it to the nearest station, so the observation loss varies across the
/// city with region function, not only with the hour.
pub fn simulate_device_records_with_activity(
    truth: &PopCube,
    city: &CityModel,
    dropout_profile: &[f64; 24],
    activity: &ActivityProfiles,
    seed: u64,
) -> Result<StationCounts> {
    if dropout_profile.iter().any(|p| *p <= 0.0 || *p > 1.0) {
        return Err(Error::input("dropout factors must lie in (0, 1]"));
    }
    let cfg = &city.config;
    let assignment = nearest_station(
        &city.stations,
        cfg.grid_h,
        cfg.grid_w,
        cfg.cell_km,
        &city.mask,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_636f_7264);
    let mut counts = StationCounts::zeros(city.stations.len(), truth.times.clone());
    for (t, frame) in truth.frames.iter().enumerate() {
        let hour = truth.times[t].hour;
        let base = dropout_profile[hour];
        let mut station_obs = vec![0.0; city.stations.len()];
        for (cell, &s) in assignment.iter().enumerate() {
            if s == usize::MAX {
                continue;
            }
            let p = match city.function_class_of_cell(cell) {
                Some(class) => base * activity.factor(class, hour),
                None => base,
            };
            let pop = frame.values[cell];
            let observed = if p >= 1.0 {
                pop
            } else {
                let n = pop.round().max(0.0) as u64;
                Binomial::new(n, p).expect("binomial").sample(&mut rng) as f64
            };
            station_obs[s] += observed;
        }
        for (s, &obs) in station_obs.iter().enumerate() {
            counts.set(s, t, obs);
        }
    }
    Ok(counts)
}
