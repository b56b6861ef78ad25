//! Run orchestration: experiment configs with desk and paper-scale presets,
//! stage execution (`preprocess`, `train-spatial`, `train-temporal`,
//! `baselines`, `eval`) into a locked run directory, an idempotence manifest
//! with artifact checksums, the PCB1 binary cube format, and CSV/PGM export.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{build_pixel_dataset, fit, BaselineHp, BaselineMethod, PixelDataset};
use crate::citygen::{
    generate_city_with, generate_population, simulate_device_records, CityConfig, CityModel,
};
use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, FrameTime, GridMap, Level, PoiCategory, PoiGrid, PopCube};
use crate::metrics::{
    compute_metrics, mean_report, run_cv, write_report_csv, write_report_table, FoldPlan,
    MetricReport, ReportRow,
};
use crate::preprocess::{activation_correct, aggregate, grid_pois, write_gridmap_csv};
use crate::spatial::{SpatialHp, StackedMapper};
use crate::temporal::{train_temporal, TemporalHp, TemporalModel};
use crate::voronoi::voronoi_weights;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small grid and short trainings; runs end-to-end in minutes.
    Desk,
    /// Full-scale settings; recorded in the manifest but never executed by
    /// the pipeline (training would take hours).
    PaperScale,
}

/// One JSON config drives every stage of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_stations: usize,
    pub n_pois: usize,
    pub n_days: usize,
    /// PoI categories fed to the spatial model and baselines.
    pub poi_subset: Vec<PoiCategory>,
    /// Per-hour device observation rates in (0, 1]; `None` observes every
    /// device (no correction needed).
    pub dropout_profile: Option<Vec<f64>>,
    pub spatial: SpatialHp,
    pub temporal: TemporalHp,
    pub baselines: BaselineHp,
    pub n_folds: usize,
    pub periods: Vec<(usize, usize)>,
}

/// Typical diurnal observation-rate profile: fewer devices visible at night.
pub const DEFAULT_DROPOUT: [f64; 24] = [
    0.58, 0.56, 0.55, 0.55, 0.57, 0.62, 0.70, 0.80, 0.88, 0.92, 0.94, 0.95, 0.94, 0.94, 0.93,
    0.92, 0.91, 0.90, 0.88, 0.84, 0.78, 0.72, 0.66, 0.61,
];

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            preset: Preset::Desk,
            grid_h: 32,
            grid_w: 32,
            n_stations: 60,
            n_pois: 2000,
            n_days: 5,
            poi_subset: PoiCategory::ALL.to_vec(),
            dropout_profile: Some(DEFAULT_DROPOUT.to_vec()),
            spatial: SpatialHp {
                iterations: 400,
                batch_size: 8,
                patch: 12,
                stride: 6,
                lr_front: 1e-2,
                lr_out: 1e-3,
                ..SpatialHp::default()
            },
            temporal: TemporalHp {
                hidden: 32,
                iterations: 800,
                ..TemporalHp::default()
            },
            baselines: BaselineHp::default(),
            n_folds: 5,
            periods: crate::metrics::DEFAULT_PERIODS.to_vec(),
        }
    }

    pub fn paper_scale(seed: u64) -> Self {
        ExperimentConfig {
            preset: Preset::PaperScale,
            grid_h: 83,
            grid_w: 114,
            n_stations: 900,
            n_pois: 20_000,
            spatial: SpatialHp {
                iterations: 100_000,
                batch_size: 512,
                ..SpatialHp::default()
            },
            temporal: TemporalHp::default(),
            ..ExperimentConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 16 || self.grid_w < 16 {
            return Err(Error::config("config: grid must be at least 16x16"));
        }
        if self.n_days < 1 {
            return Err(Error::config("config: need at least one day"));
        }
        if self.n_folds < 2 || self.n_folds > self.n_days {
            return Err(Error::config(format!(
                "config: n_folds {} must lie in 2..=n_days ({})",
                self.n_folds, self.n_days
            )));
        }
        if let Some(p) = &self.dropout_profile {
            if p.len() != 24 || p.iter().any(|v| *v <= 0.0 || *v > 1.0) {
                return Err(Error::config(
                    "config: dropout profile needs 24 rates in (0, 1]",
                ));
            }
        }
        crate::metrics::validate_periods(&self.periods)?;
        Ok(())
    }

    pub fn city_config(&self) -> CityConfig {
        CityConfig {
            n_days: self.n_days,
            ..CityConfig::for_grid(self.grid_h, self.grid_w, self.n_stations, self.n_pois)
        }
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// stages

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    TrainSpatial,
    TrainTemporal,
    Baselines,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Preprocess,
        Stage::TrainSpatial,
        Stage::TrainTemporal,
        Stage::Baselines,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::TrainSpatial => "train-spatial",
            Stage::TrainTemporal => "train-temporal",
            Stage::Baselines => "baselines",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage '{s}'")))
    }
}

// ---------------------------------------------------------------------------
// manifest + lock

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: String,
    pub wall_time_s: f64,
    /// artifact path (relative to the run dir) → sha256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub library_version: String,
    pub threads: usize,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: worker_threads(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Option<RunManifest>> {
        let p = Self::path(dir);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    /// Atomic write (temp file + rename) at every stage boundary.
    pub fn save(&self, dir: &Path) -> Result<()> {
        atomic_write(&Self::path(dir), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn is_completed(&self, stage: &str) -> bool {
        self.stages.get(stage).is_some_and(|s| s.status == "completed")
    }

    fn record(
        &mut self,
        dir: &Path,
        stage: &str,
        wall_time_s: f64,
        artifacts: &[PathBuf],
        status: &str,
    ) -> Result<()> {
        let mut map = BTreeMap::new();
        for a in artifacts {
            let rel = a
                .strip_prefix(dir)
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_else(|_| a.to_string_lossy().into_owned());
            map.insert(rel, sha256_file(a)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                status: status.to_string(),
                wall_time_s,
                artifacts: map,
            },
        );
        self.save(dir)
    }
}

/// `POPMAP_THREADS` caps worker threads; defaults to 1 for determinism.
/// All current stages are single-threaded regardless; the value is recorded
/// in the manifest.
pub fn worker_threads() -> usize {
    std::env::var("POPMAP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Exclusive ownership of a run directory; the lock file is removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::state(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

// ---------------------------------------------------------------------------
// PCB1 binary cube format: magic "PCB1", then T, H, W as u64 LE, then T
// frames of H*W f64 LE values. Level and timestamps go to a JSON sidecar.

pub const PCB_MAGIC: [u8; 4] = *b"PCB1";

#[derive(Debug, Serialize, Deserialize)]
struct CubeMeta {
    level: u8,
    times: Vec<FrameTime>,
}

pub fn write_cube(path: &Path, cube: &PopCube) -> Result<()> {
    if cube.is_empty() {
        return Err(Error::input("write_cube: empty cube"));
    }
    let (t, h, w) = (cube.len(), cube.height(), cube.width());
    let mut bytes = Vec::with_capacity(4 + 24 + t * h * w * 8);
    bytes.extend_from_slice(&PCB_MAGIC);
    for dim in [t as u64, h as u64, w as u64] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for f in &cube.frames {
        for v in &f.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)?;
    let meta = CubeMeta {
        level: cube.level().as_u8(),
        times: cube.times.clone(),
    };
    atomic_write(&meta_path(path), serde_json::to_string(&meta)?.as_bytes())
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn read_cube(path: &Path) -> Result<PopCube> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 28 || bytes[..4] != PCB_MAGIC {
        return Err(Error::format(format!(
            "{} is not a PCB1 cube",
            path.display()
        )));
    }
    let dim = |i: usize| {
        u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()) as usize
    };
    let (t, h, w) = (dim(0), dim(1), dim(2));
    if bytes.len() != 28 + t * h * w * 8 {
        return Err(Error::format(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            t * h * w * 8,
            bytes.len() - 28
        )));
    }
    let meta: CubeMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    if meta.times.len() != t {
        return Err(Error::format("cube sidecar timestamp count mismatch"));
    }
    let level = Level::from_u8(meta.level)?;
    let mut frames = Vec::with_capacity(t);
    let mut off = 28;
    for _ in 0..t {
        let mut values = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            values.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        frames.push(GridMap::from_values(h, w, values, level)?);
    }
    PopCube::new(frames, meta.times)
}

// ---------------------------------------------------------------------------
// export

/// One 16-bit binary PGM per frame plus a JSON sidecar with the linear
/// scale; `value ≈ pixel * scale`.
pub fn export_pgm16(cube: &PopCube, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let max = cube
        .frames
        .iter()
        .flat_map(|f| f.values.iter())
        .fold(0.0f64, |a, &v| a.max(v));
    let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
    let mut written = Vec::new();
    for (f, t) in cube.frames.iter().zip(&cube.times) {
        let path = dir.join(format!("{stem}_d{:02}_h{:02}.pgm", t.day, t.hour));
        let mut bytes =
            format!("P5\n{} {}\n65535\n", f.width, f.height).into_bytes();
        for v in &f.values {
            let px = (v / scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&px.to_be_bytes());
        }
        atomic_write(&path, &bytes)?;
        written.push(path);
    }
    let sidecar = dir.join(format!("{stem}.scale.json"));
    atomic_write(
        &sidecar,
        serde_json::to_string_pretty(&serde_json::json!({
            "scale": scale,
            "max_value": max,
            "frames": written.len(),
        }))?
        .as_bytes(),
    )?;
    written.push(sidecar);
    Ok(written)
}

/// One CSV per frame in the standard grid-map format.
pub fn export_csv(cube: &PopCube, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (f, t) in cube.frames.iter().zip(&cube.times) {
        let path = dir.join(format!("{stem}_d{:02}_h{:02}.csv", t.day, t.hour));
        write_gridmap_csv(&path, f, *t)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// run directory layout

fn p_city(dir: &Path) -> PathBuf {
    dir.join("city.json")
}
fn p_truth(dir: &Path) -> PathBuf {
    dir.join("truth_fine.pcb")
}
fn p_observed(dir: &Path) -> PathBuf {
    dir.join("observed_district.pcb")
}
fn p_static(dir: &Path) -> PathBuf {
    dir.join("static_fine.pcb")
}
fn p_smoothed(dir: &Path) -> PathBuf {
    dir.join("smoothed_fine.pcb")
}

fn load_city(dir: &Path) -> Result<CityModel> {
    let p = p_city(dir);
    if !p.exists() {
        return Err(Error::missing_stage(
            "gen artifacts missing — run `popmap gen` into this directory first",
        ));
    }
    CityModel::from_json(&std::fs::read_to_string(p)?)
}

fn require_cube(path: &Path, stage: &str) -> Result<PopCube> {
    if !path.exists() {
        return Err(Error::missing_stage(format!(
            "{stage} artifacts missing — run the {stage} stage first"
        )));
    }
    read_cube(path)
}

// ---------------------------------------------------------------------------
// gen

/// Generates the city and ground-truth cube into `dir`. Idempotent: a rerun
/// with the same config hash is skipped unless `force`.
pub fn run_gen(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let _lock = RunLock::acquire(dir)?;
    let hash = cfg.hash();
    let mut manifest = match RunManifest::load(dir)? {
        Some(m) if m.config_hash == hash && !force => {
            if m.is_completed("gen") {
                return Ok(()); // hash match: no-op
            }
            m
        }
        Some(m) if m.config_hash == hash => m,
        Some(_) if !force => {
            return Err(Error::state(
                "run directory holds artifacts from a different config; pass --force to overwrite",
            ))
        }
        _ => RunManifest::new(hash.clone()),
    };
    manifest.config_hash = hash;
    manifest.stages.clear();

    let start = Instant::now();
    cfg.save(&dir.join("config.json"))?;
    let city = generate_city_with(cfg.city_config(), cfg.seed)?;
    let truth = generate_population(&city, cfg.seed)?;
    atomic_write(&p_city(dir), city.to_json()?.as_bytes())?;
    write_cube(&p_truth(dir), &truth)?;
    manifest.record(
        dir,
        "gen",
        start.elapsed().as_secs_f64(),
        &[dir.join("config.json"), p_city(dir), p_truth(dir)],
        "completed",
    )
}

// ---------------------------------------------------------------------------
// pipeline stages

/// Executes the requested stages in canonical order. Completed stages are
/// skipped unless `force`. Paper-scale configs are recorded in the manifest
/// but their training stages are not executed.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    dir: &Path,
    stages: &[Stage],
    force: bool,
) -> Result<()> {
    cfg.validate()?;
    let _lock = RunLock::acquire(dir)?;
    let hash = cfg.hash();
    let mut manifest = match RunManifest::load(dir)? {
        Some(m) if m.config_hash == hash => m,
        Some(_) => {
            return Err(Error::state(
                "run directory holds artifacts from a different config; rerun `popmap gen --force`",
            ))
        }
        None => {
            return Err(Error::missing_stage(
                "gen artifacts missing — run `popmap gen` into this directory first",
            ))
        }
    };

    let mut ordered: Vec<Stage> = stages.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    for stage in ordered {
        if manifest.is_completed(stage.name()) && !force {
            continue;
        }
        if cfg.preset == Preset::PaperScale && stage != Stage::Preprocess {
            // document the full-scale settings without spending hours
            manifest.record(dir, stage.name(), 0.0, &[], "recorded-not-run")?;
            continue;
        }
        let start = Instant::now();
        let artifacts = match stage {
            Stage::Preprocess => stage_preprocess(cfg, dir)?,
            Stage::TrainSpatial => stage_train_spatial(cfg, dir)?,
            Stage::TrainTemporal => stage_train_temporal(cfg, dir)?,
            Stage::Baselines => stage_baselines(cfg, dir)?,
            Stage::Eval => stage_eval(cfg, dir)?,
        };
        manifest.record(
            dir,
            stage.name(),
            start.elapsed().as_secs_f64(),
            &artifacts,
            "completed",
        )?;
    }
    Ok(())
}

/// Device simulation → activation correction → Voronoi rasterization →
/// district equalization. Produces the observed district-level input cube.
fn stage_preprocess(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let city = load_city(dir)?;
    let truth = require_cube(&p_truth(dir), "gen")?;
    let ccfg = &city.config;

    let observed_fine: PopCube = match &cfg.dropout_profile {
        Some(profile) => {
            let prof: [f64; 24] = profile
                .as_slice()
                .try_into()
                .map_err(|_| Error::config("dropout profile needs 24 entries"))?;
            let records = simulate_device_records(&truth, &city, &prof, cfg.seed)?;
            let corrected = activation_correct(&records)?;
            let wm = voronoi_weights(
                &city.stations,
                ccfg.grid_h,
                ccfg.grid_w,
                ccfg.cell_km,
                &city.mask,
            )?;
            let mut frames = Vec::with_capacity(truth.len());
            for slot in 0..corrected.counts.n_slots {
                frames.push(wm.rasterize(&corrected.counts.slot_counts(slot), Level::Fine)?);
            }
            let activation = serde_json::json!({
                "ratios": corrected.ratios,
                "peak_total": corrected.peak_total,
                "excluded_slots": corrected.excluded_slots,
            });
            atomic_write(
                &dir.join("activation.json"),
                serde_json::to_string_pretty(&activation)?.as_bytes(),
            )?;
            PopCube::new(frames, truth.times.clone())?
        }
        None => truth.clone(),
    };

    // equalize within districts: the coarse input raster
    let district_frames = observed_fine
        .frames
        .iter()
        .map(|f| aggregate(f, city.districts()))
        .collect::<Result<Vec<_>>>()?;
    let observed = PopCube::new(district_frames, truth.times.clone())?;
    write_cube(&p_observed(dir), &observed)?;

    let mut artifacts = vec![p_observed(dir)];
    if cfg.dropout_profile.is_some() {
        artifacts.push(dir.join("activation.json"));
    }
    Ok(artifacts)
}

fn stage_train_spatial(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let city = load_city(dir)?;
    let truth = require_cube(&p_truth(dir), "gen")?;
    let observed = require_cube(&p_observed(dir), "preprocess")?;
    let pois = grid_pois(&city.pois, city.config.grid_h, city.config.grid_w, city.config.cell_km);

    let (mut mapper, _traces) = StackedMapper::train(
        &truth.frames,
        &pois,
        &city.mask,
        &city.ladder,
        &cfg.poi_subset,
        &cfg.spatial,
        cfg.seed,
    )?;
    let bundle = dir.join("spatial");
    mapper.save(&bundle)?;
    let static_cube = mapper.map_cube(&observed, &pois, &city.mask)?;
    write_cube(&p_static(dir), &static_cube)?;
    Ok(vec![bundle.join("spatial.json"), p_static(dir)])
}

/// Cross-fitted static outputs for temporal training: each half of the
/// days is mapped by a stacked mapper trained on the other half's truth,
/// so the temporal model sees out-of-sample mapper outputs like the ones
/// it will smooth at inference. Falls back to a single in-sample mapper
/// when there is only one day.
#[allow(clippy::too_many_arguments)]
pub fn crossfit_static(
    train_truth: &PopCube,
    observed_train: &PopCube,
    pois: &PoiGrid,
    city: &CityModel,
    poi_subset: &[PoiCategory],
    hp: &SpatialHp,
    seed: u64,
) -> Result<PopCube> {
    if train_truth.times != observed_train.times {
        return Err(Error::input("crossfit: cubes are misaligned in time"));
    }
    let days = train_truth.days();
    if days.len() < 2 {
        let (mut mapper, _) = StackedMapper::train(
            &train_truth.frames,
            pois,
            &city.mask,
            &city.ladder,
            poi_subset,
            hp,
            seed,
        )?;
        return mapper.map_cube(observed_train, pois, &city.mask);
    }
    let mid = days.len() / 2;
    let mut frames: Vec<Option<GridMap>> = vec![None; train_truth.len()];
    for held in [&days[..mid], &days[mid..]] {
        let other: Vec<usize> = days.iter().filter(|d| !held.contains(d)).copied().collect();
        let other_truth = train_truth.select_days(&other);
        let (mut mapper, _) = StackedMapper::train(
            &other_truth.frames,
            pois,
            &city.mask,
            &city.ladder,
            poi_subset,
            hp,
            seed,
        )?;
        let mapped = mapper.map_cube(&observed_train.select_days(held), pois, &city.mask)?;
        for (ft, fr) in mapped.times.iter().zip(mapped.frames.into_iter()) {
            let idx = train_truth
                .times
                .iter()
                .position(|t| t == ft)
                .expect("crossfit frame time");
            frames[idx] = Some(fr);
        }
    }
    PopCube::new(
        frames.into_iter().map(|f| f.expect("crossfit coverage")).collect(),
        train_truth.times.clone(),
    )
}

fn stage_train_temporal(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let city = load_city(dir)?;
    let truth = require_cube(&p_truth(dir), "gen")?;
    let observed = require_cube(&p_observed(dir), "preprocess")?;
    let static_cube = require_cube(&p_static(dir), "train-spatial")?;
    let pois = grid_pois(&city.pois, city.config.grid_h, city.config.grid_w, city.config.cell_km);

    let static_train = crossfit_static(
        &truth,
        &observed,
        &pois,
        &city,
        &cfg.poi_subset,
        &cfg.spatial,
        cfg.seed,
    )?;
    let (model, _losses) =
        train_temporal(&static_train, &truth, &city.mask, &cfg.temporal, cfg.seed)?;
    let bundle = dir.join("temporal");
    model.save(&bundle)?;
    let smoothed = smooth_days(&model, &static_cube, &city.mask)?;
    write_cube(&p_smoothed(dir), &smoothed)?;
    Ok(vec![bundle.join("temporal.json"), p_smoothed(dir)])
}

/// Applies a temporal model day by day (24 frames at a time).
pub fn smooth_days(
    model: &TemporalModel,
    static_cube: &PopCube,
    mask: &BoundaryMask,
) -> Result<PopCube> {
    if static_cube.len() % 24 != 0 {
        return Err(Error::input("temporal smoothing needs whole 24-hour days"));
    }
    let mut frames = Vec::with_capacity(static_cube.len());
    for day in static_cube.days() {
        let sub = static_cube.select_days(&[day]);
        let smoothed = model.smooth_cube(&sub, mask)?;
        frames.extend(smoothed.frames);
    }
    PopCube::new(frames, static_cube.times.clone())
}

/// Hold-out fit of the four pixelwise baselines (all days but the last for
/// training, the last for testing), reported in `baselines.csv`.
fn stage_baselines(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let city = load_city(dir)?;
    let truth = require_cube(&p_truth(dir), "gen")?;
    let observed = require_cube(&p_observed(dir), "preprocess")?;
    let pois = grid_pois(&city.pois, city.config.grid_h, city.config.grid_w, city.config.cell_km);

    let days = truth.days();
    let (test_day, train_days) = days.split_last().expect("at least one day");
    let train = build_pixel_dataset(
        &observed.select_days(train_days),
        &truth.select_days(train_days),
        &pois,
        &city.mask,
        true,
    )?;
    let test_truth = truth.select_days(&[*test_day]);
    let test = build_pixel_dataset(
        &observed.select_days(&[*test_day]),
        &test_truth,
        &pois,
        &city.mask,
        true,
    )?;

    let mut rows = Vec::new();
    for method in BaselineMethod::ALL {
        let start = Instant::now();
        let model = fit(method, &train, &cfg.baselines, cfg.seed)?;
        let pred = prediction_cube(&model.predict(&test.features), &test, &test_truth)?;
        let mut rep = compute_metrics(&pred, &test_truth, &city.mask)?;
        rep.scope = method.name().to_string();
        rows.push(ReportRow {
            method: method.name().to_string(),
            level_pair: "district->fine".to_string(),
            fold: "holdout".to_string(),
            metrics: rep,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let csv = dir.join("baselines.csv");
    write_report_csv(&csv, &rows)?;
    Ok(vec![csv])
}

/// Rebuilds a prediction cube from flat per-row predictions using the
/// dataset's (cell, frame) bookkeeping.
pub fn prediction_cube(preds: &[f64], ds: &PixelDataset, template: &PopCube) -> Result<PopCube> {
    if preds.len() != ds.len() {
        return Err(Error::shape("prediction count does not match dataset rows"));
    }
    let mut frames: Vec<GridMap> = template
        .frames
        .iter()
        .map(|f| GridMap::zeros(f.height, f.width, Level::Fine))
        .collect();
    for (i, &p) in preds.iter().enumerate() {
        frames[ds.frames[i]].values[ds.cells[i]] = p;
    }
    PopCube::new(frames, template.times.clone())
}

/// The overall comparison: day-based cross-validation of the stacked
/// mapper, the four baselines and temporal smoothing (time-embedded and
/// flat). Writes `results.csv` (with wall times), `metrics.csv` (the
/// deterministic subset) and a text table.
fn stage_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    // the eval stage expects the full-data models to exist: it enforces
    // pipeline order even though CV retrains per fold
    if !dir.join("spatial").join("spatial.json").exists() {
        return Err(Error::missing_stage(
            "train-spatial artifacts missing — run the train-spatial stage first",
        ));
    }
    if !dir.join("temporal").join("temporal.json").exists() {
        return Err(Error::missing_stage(
            "train-temporal artifacts missing — run the train-temporal stage first",
        ));
    }
    let city = load_city(dir)?;
    let truth = require_cube(&p_truth(dir), "gen")?;
    let observed = require_cube(&p_observed(dir), "preprocess")?;
    let rows = evaluate_methods(cfg, &city, &truth, &observed)?;

    let results = dir.join("results.csv");
    write_report_csv(&results, &rows)?;
    let metrics_csv = dir.join("metrics.csv");
    write_metrics_csv(&metrics_csv, &rows)?;
    let table = dir.join("results.txt");
    write_report_table(&table, "overall comparison (5-fold CV, fine level)", &rows)?;
    Ok(vec![results, metrics_csv, table])
}

/// Cross-validated comparison rows for every method. Exposed for the
/// experiment battery; `stage_eval` is a thin wrapper that persists them.
pub fn evaluate_methods(
    cfg: &ExperimentConfig,
    city: &CityModel,
    truth: &PopCube,
    observed: &PopCube,
) -> Result<Vec<ReportRow>> {
    let pois = grid_pois(&city.pois, city.config.grid_h, city.config.grid_w, city.config.cell_km);
    let plan = FoldPlan::new(&truth.days(), cfg.n_folds, cfg.seed)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut add_cv = |method: &str, reports: Vec<MetricReport>, times: Vec<f64>| {
        let mean = mean_report("mean", &reports);
        for (rep, t) in reports.into_iter().zip(times) {
            rows.push(ReportRow {
                method: method.to_string(),
                level_pair: "district->fine".to_string(),
                fold: rep.scope.clone(),
                metrics: rep,
                wall_time_s: t,
            });
        }
        rows.push(ReportRow {
            method: method.to_string(),
            level_pair: "district->fine".to_string(),
            fold: "mean".to_string(),
            metrics: mean,
            wall_time_s: 0.0,
        });
    };

    // static stacked mapper + temporal smoothing per fold
    let mut static_reports = Vec::new();
    let mut te_reports = Vec::new();
    let mut flat_reports = Vec::new();
    let mut static_times = Vec::new();
    let mut te_times = Vec::new();
    let mut flat_times = Vec::new();
    for fold in 0..plan.n_folds() {
        let (train_days, test_days) = plan.split(fold);
        let train_truth = truth.select_days(&train_days);
        let test_truth = truth.select_days(&test_days);
        let start = Instant::now();
        let (mut mapper, _) = StackedMapper::train(
            &train_truth.frames,
            &pois,
            &city.mask,
            &city.ladder,
            &cfg.poi_subset,
            &cfg.spatial,
            cfg.seed,
        )?;
        let static_test = mapper.map_cube(&observed.select_days(&test_days), &pois, &city.mask)?;
        let mut rep = compute_metrics(&static_test, &test_truth, &city.mask)?;
        rep.scope = format!("fold{fold}");
        static_reports.push(rep);
        static_times.push(start.elapsed().as_secs_f64());

        // temporal models learn on cross-fitted static outputs of the
        // training days (out-of-sample for the half-mappers)
        let static_train = crossfit_static(
            &train_truth,
            &observed.select_days(&train_days),
            &pois,
            city,
            &cfg.poi_subset,
            &cfg.spatial,
            cfg.seed,
        )?;
        for (use_te, reports, times) in [
            (true, &mut te_reports, &mut te_times),
            (false, &mut flat_reports, &mut flat_times),
        ] {
            let t0 = Instant::now();
            let hp = TemporalHp {
                use_time_embedding: use_te,
                ..cfg.temporal.clone()
            };
            let (model, _) = train_temporal(&static_train, &train_truth, &city.mask, &hp, cfg.seed)?;
            let smoothed = smooth_days(&model, &static_test, &city.mask)?;
            let mut rep = compute_metrics(&smoothed, &test_truth, &city.mask)?;
            rep.scope = format!("fold{fold}");
            reports.push(rep);
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    add_cv("static-srcnn", static_reports, static_times);
    add_cv("lstm-te", te_reports, te_times);
    add_cv("lstm-flat", flat_reports, flat_times);

    // pixelwise baselines on the same folds
    for method in BaselineMethod::ALL {
        let mut times = Vec::new();
        let report = run_cv(truth, &city.mask, &plan, |train_days, test_days| {
            let start = Instant::now();
            let train = build_pixel_dataset(
                &observed.select_days(train_days),
                &truth.select_days(train_days),
                &pois,
                &city.mask,
                true,
            )?;
            let test_truth = truth.select_days(test_days);
            let test = build_pixel_dataset(
                &observed.select_days(test_days),
                &test_truth,
                &pois,
                &city.mask,
                true,
            )?;
            let model = fit(method, &train, &cfg.baselines, cfg.seed)?;
            let cube = prediction_cube(&model.predict(&test.features), &test, &test_truth)?;
            times.push(start.elapsed().as_secs_f64());
            Ok(cube)
        })?;
        add_cv(method.name(), report.per_fold, times);
    }
    Ok(rows)
}

/// The timing-free metric CSV; byte-identical across reruns of the same
/// config.
pub fn write_metrics_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("method,level_pair,fold,RMSE,NRMSE,Corr,MAE\n");
    for r in rows {
        let corr = if r.metrics.corr_defined {
            format!("{:.6}", r.metrics.corr)
        } else {
            "NaN".to_string()
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{:.6}\n",
            r.method, r.level_pair, r.fold, r.metrics.rmse, r.metrics.nrmse, corr, r.metrics.mae
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Renders a stored results CSV as a fixed-width text table.
pub fn render_report(csv_path: &Path) -> Result<String> {
    if !csv_path.exists() {
        return Err(Error::missing_stage(format!(
            "{} not found — run the eval stage first",
            csv_path.display()
        )));
    }
    let text = std::fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty results file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let mut out = String::new();
    let fmt_row = |fields: &[&str]| {
        fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if i < 3 {
                    format!("{f:<22}")
                } else {
                    format!("{f:>12}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&fmt_row(&cols));
    out.push('\n');
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(format!("ragged CSV row: {line}")));
        }
        out.push_str(&fmt_row(&fields));
        out.push('\n');
    }
    Ok(out)
}
