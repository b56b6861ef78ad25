//! Static spatial mapping: stacked super-resolution CNN units that refine a
//! coarse zone-mean population raster toward the fine-grained map, with PoI
//! rasters as extra input channels.
//!
//! Each unit is three blocks of batch-norm → convolution → ReLU (the output
//! block drops the ReLU): 64 filters of 9×9, 32 of 1×1, one of 5×5. Units
//! train independently on (coarser level, next level) pairs aggregated from
//! ground truth, and are only composed at inference.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, GridMap, PoiCategory, PoiGrid, PopCube, ZonePartition};
use crate::preprocess::{aggregate, extract_patches, MultiChannelMap, PatchPair};
use crate::tensor::{
    batchnorm2d, conv2d, load_checkpoint, mse_loss, relu, restore_into, save_checkpoint, Adam,
    AdamConfig, BnMode, ParamGroup, RunningStats, Tensor,
};

/// Training hyperparameters for one unit. Defaults follow the reference
/// setup (large-budget); presets scale them down for desk runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialHp {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub stride: usize,
    /// Learning rate of the first two blocks.
    pub lr_front: f64,
    /// Learning rate of the output block.
    pub lr_out: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Cosine-decay the learning rates to zero over the iteration budget;
    /// settles the final weights despite batch-norm gradient noise.
    pub cosine_decay: bool,
    /// Fraction of the iteration budget trained with frozen batch-norm
    /// statistics (recalibrated once at the switch): the tail of training
    /// then optimizes exactly the function used at inference.
    pub freeze_bn_frac: f64,
}

impl Default for SpatialHp {
    fn default() -> Self {
        SpatialHp {
            iterations: 2_000,
            batch_size: 64,
            patch: 38,
            stride: 19,
            lr_front: 1e-4,
            lr_out: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            cosine_decay: true,
            freeze_bn_frac: 0.25,
        }
    }
}

/// Per-channel input standardization plus scalar target standardization,
/// persisted with the trained unit so inference reproduces training scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl ChannelStats {
    fn from_pairs(pairs: &[PatchPair], channels: usize, patch: usize) -> ChannelStats {
        let hw = patch * patch;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let n = (pairs.len() * hw) as f64;
        for p in pairs {
            for c in 0..channels {
                for &v in &p.input[c * hw..(c + 1) * hw] {
                    mean[c] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for p in pairs {
            for c in 0..channels {
                for &v in &p.input[c * hw..(c + 1) * hw] {
                    var[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(1e-9)).collect();
        let (mut tm, mut tv) = (0.0, 0.0);
        for p in pairs {
            for &v in &p.target {
                tm += v;
            }
        }
        tm /= n;
        for p in pairs {
            for &v in &p.target {
                tv += (v - tm) * (v - tm);
            }
        }
        ChannelStats {
            mean,
            std,
            target_mean: tm,
            target_std: (tv / n).sqrt().max(1e-9),
        }
    }

    pub fn standardize_input(&self, data: &mut [f64], hw: usize) {
        for (c, chunk) in data.chunks_mut(hw).enumerate() {
            let c = c % self.mean.len();
            for v in chunk.iter_mut() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn destandardize_input(&self, data: &mut [f64], hw: usize) {
        for (c, chunk) in data.chunks_mut(hw).enumerate() {
            let c = c % self.mean.len();
            for v in chunk.iter_mut() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
    }

    pub fn standardize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_std
    }

    pub fn destandardize_target(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }
}

struct ConvBlock {
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    kernels: Tensor,
    bias: Tensor,
    relu_after: bool,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, k: usize, relu_after: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * k * k;
        ConvBlock {
            gamma: Tensor::param(&[c_in], vec![1.0; c_in]).expect("gamma"),
            beta: Tensor::param(&[c_in], vec![0.0; c_in]).expect("beta"),
            running: RunningStats::new(c_in),
            kernels: Tensor::randn_param(&[c_out, c_in, k, k], (2.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::param(&[c_out], vec![0.0; c_out]).expect("bias"),
            relu_after,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: BnMode, eps: f64, momentum: f64) -> Result<Tensor> {
        let normed = batchnorm2d(x, &self.gamma, &self.beta, mode, &mut self.running, eps, momentum)?;
        let conved = conv2d(&normed, &self.kernels, &self.bias)?;
        Ok(if self.relu_after { relu(&conved) } else { conved })
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.gamma.clone(),
            self.beta.clone(),
            self.kernels.clone(),
            self.bias.clone(),
        ]
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
            (format!("{prefix}.kernels"), self.kernels.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// One super-resolution unit mapping a population raster (plus PoI
/// channels) one step down the zone ladder. Spatial size is preserved.
pub struct SrcnnUnit {
    blocks: Vec<ConvBlock>,
    pub in_channels: usize,
    pub stats: Option<ChannelStats>,
}

impl SrcnnUnit {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        SrcnnUnit {
            blocks: vec![
                ConvBlock::new(in_channels, 64, 9, true, rng),
                ConvBlock::new(64, 32, 1, true, rng),
                ConvBlock::new(32, 1, 5, false, rng),
            ],
            in_channels,
            stats: None,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.stats.is_some()
    }

    /// Forward pass in standardized space. `x` is `[N,C,H,W]` or `[C,H,W]`.
    pub fn forward(&mut self, x: &Tensor, mode: BnMode, hp: &SpatialHp) -> Result<Tensor> {
        let mut cur = x.clone();
        for b in &mut self.blocks {
            cur = b.forward(&cur, mode, hp.bn_eps, hp.bn_momentum)?;
        }
        Ok(cur)
    }

    /// First two blocks and output block, for per-group learning rates.
    pub fn param_groups(&self, hp: &SpatialHp) -> Vec<ParamGroup> {
        let mut front = self.blocks[0].params();
        front.extend(self.blocks[1].params());
        vec![
            ParamGroup {
                params: front,
                lr: hp.lr_front,
            },
            ParamGroup {
                params: self.blocks[2].params(),
                lr: hp.lr_out,
            },
        ]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("block{i}")));
        }
        out
    }

    fn running_stats_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = b.running.mean.len();
            out.push((
                format!("block{i}.running_mean"),
                Tensor::from_vec(&[n], b.running.mean.clone()).expect("running mean"),
            ));
            out.push((
                format!("block{i}.running_var"),
                Tensor::from_vec(&[n], b.running.var.clone()).expect("running var"),
            ));
        }
        out
    }

    /// Predict one full raster: standardize, eval-mode forward,
    /// destandardize, clamp at zero, zero out-of-boundary cells.
    pub fn predict_map(
        &mut self,
        input: &MultiChannelMap,
        mask: &BoundaryMask,
        hp: &SpatialHp,
    ) -> Result<Vec<f64>> {
        let stats = self
            .stats
            .clone()
            .ok_or_else(|| Error::state("srcnn unit is untrained (no standardization stats)"))?;
        if input.channels != self.in_channels {
            return Err(Error::shape(format!(
                "unit expects {} channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let hw = input.height * input.width;
        let mut data = input.data.clone();
        stats.standardize_input(&mut data, hw);
        let x = Tensor::from_vec(&[input.channels, input.height, input.width], data)?;
        let out = self.forward(&x, BnMode::Eval, hp)?;
        let mut vals = out.to_vec();
        for (i, v) in vals.iter_mut().enumerate() {
            *v = if mask.inside[i] {
                stats.destandardize_target(*v).max(0.0)
            } else {
                0.0
            };
        }
        Ok(vals)
    }
}

/// Stacks the population raster with the selected PoI channels in fixed
/// category order; channel 0 is always population.
pub fn build_input(
    pop: &GridMap,
    pois: &PoiGrid,
    selected: &[PoiCategory],
) -> Result<MultiChannelMap> {
    let hw = pop.height * pop.width;
    if pois.counts[0].len() != hw {
        return Err(Error::shape("build_input: PoI raster size mismatch"));
    }
    let mut data = Vec::with_capacity((1 + selected.len()) * hw);
    data.extend_from_slice(&pop.values);
    let mut cats: Vec<PoiCategory> = selected.to_vec();
    cats.sort_by_key(|c| c.index());
    cats.dedup();
    for cat in &cats {
        data.extend_from_slice(&pois.counts[cat.index()]);
    }
    MultiChannelMap::new(1 + cats.len(), pop.height, pop.width, data)
}

/// Aggregated (input level, target level) map pairs for every adjacent pair
/// of the nested ladder; unit k trains on stream k. Ground truth only —
/// never another unit's output.
pub fn make_intermediate_targets(
    fine_frames: &[GridMap],
    ladder: &[ZonePartition],
) -> Result<Vec<Vec<(GridMap, GridMap)>>> {
    if ladder.len() < 2 {
        return Err(Error::partition("ladder needs at least two levels"));
    }
    for i in 1..ladder.len() {
        if !ladder[i].nested_in(&ladder[i - 1]) {
            return Err(Error::partition(format!(
                "ladder level {i} is not nested in level {}",
                i - 1
            )));
        }
    }
    // per frame, per level: aggregated map
    let mut streams: Vec<Vec<(GridMap, GridMap)>> = vec![Vec::new(); ladder.len() - 1];
    for frame in fine_frames {
        let mut maps: Vec<GridMap> = Vec::with_capacity(ladder.len());
        for part in ladder {
            maps.push(aggregate(frame, part)?);
        }
        for k in 0..ladder.len() - 1 {
            streams[k].push((maps[k].clone(), maps[k + 1].clone()));
        }
    }
    Ok(streams)
}

/// Loss trace plus the iteration count actually run.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

/// Trains one unit on patch pairs with MSE and per-group Adam learning
/// rates. Deterministic for a fixed `rng` state. A non-finite loss aborts
/// with diagnostics.
pub fn train_unit(
    unit: &mut SrcnnUnit,
    pairs: &[PatchPair],
    patch: usize,
    hp: &SpatialHp,
    rng: &mut ChaCha8Rng,
) -> Result<TrainTrace> {
    if pairs.is_empty() {
        return Err(Error::input("train_unit: no training pairs"));
    }
    if patch < 9 {
        return Err(Error::config(
            "train_unit: patch must be at least the 9x9 kernel size",
        ));
    }
    let hw = patch * patch;
    let c = unit.in_channels;
    if pairs[0].input.len() != c * hw {
        return Err(Error::shape(format!(
            "train_unit: pair has {} values, expected {} channels x {hw}",
            pairs[0].input.len(),
            c
        )));
    }
    if !(0.0..=1.0).contains(&hp.freeze_bn_frac) {
        return Err(Error::config("train_unit: freeze_bn_frac must be in [0, 1]"));
    }
    let stats = ChannelStats::from_pairs(pairs, c, patch);
    let mut opt = Adam::new(unit.param_groups(hp), AdamConfig::default())?;
    let bsz = hp.batch_size.min(pairs.len());
    let freeze_at = if hp.freeze_bn_frac > 0.0 {
        (hp.iterations as f64 * (1.0 - hp.freeze_bn_frac)).round() as usize
    } else {
        usize::MAX
    };
    let mut mode = BnMode::Train;
    let mut losses = Vec::with_capacity(hp.iterations);
    for iter in 0..hp.iterations {
        if iter == freeze_at {
            recalibrate_running_stats(unit, pairs, &stats, patch, hp)?;
            mode = BnMode::Eval;
        }
        if hp.cosine_decay {
            let frac = iter as f64 / hp.iterations as f64;
            opt.set_lr_scale(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))?;
        }
        let mut xb = Vec::with_capacity(bsz * c * hw);
        let mut yb = Vec::with_capacity(bsz * hw);
        for _ in 0..bsz {
            let p = &pairs[rng.gen_range(0..pairs.len())];
            let mut inp = p.input.clone();
            stats.standardize_input(&mut inp, hw);
            xb.extend_from_slice(&inp);
            yb.extend(p.target.iter().map(|&v| stats.standardize_target(v)));
        }
        let x = Tensor::from_vec(&[bsz, c, patch, patch], xb)?;
        let y = Tensor::from_vec(&[bsz, 1, patch, patch], yb)?;
        let pred = unit.forward(&x, mode, hp)?;
        let loss = mse_loss(&pred, &y)?;
        let lv = loss.item();
        if !lv.is_finite() {
            let batch_mean: f64 = y.data().iter().sum::<f64>() / y.len() as f64;
            return Err(Error::diverged(format!(
                "non-finite loss {lv} at iteration {iter} (lr {}/{}, batch target mean {batch_mean:.6})",
                hp.lr_front, hp.lr_out
            )));
        }
        losses.push(lv);
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;
    }

    if mode == BnMode::Train {
        // Training never froze the stats: replace the stale EMA (collected
        // while weights were moving) with exact full-batch statistics.
        recalibrate_running_stats(unit, pairs, &stats, patch, hp)?;
    }
    unit.stats = Some(stats);
    Ok(TrainTrace { losses })
}

/// Resets every block's running statistics and seeds them with exact
/// statistics over (a sample of) the training pairs under current weights.
fn recalibrate_running_stats(
    unit: &mut SrcnnUnit,
    pairs: &[PatchPair],
    stats: &ChannelStats,
    patch: usize,
    hp: &SpatialHp,
) -> Result<()> {
    let hw = patch * patch;
    let c = unit.in_channels;
    for b in &mut unit.blocks {
        b.running = RunningStats::new(b.running.mean.len());
    }
    let cal = 512.min(pairs.len());
    let mut xb = Vec::with_capacity(cal * c * hw);
    for p in pairs.iter().take(cal) {
        let mut inp = p.input.clone();
        stats.standardize_input(&mut inp, hw);
        xb.extend_from_slice(&inp);
    }
    let x = Tensor::from_vec(&[cal, c, patch, patch], xb)?;
    unit.forward(&x, BnMode::Train, hp)?;
    Ok(())
}

/// Manifest stored beside unit checkpoints in a model bundle directory.
#[derive(Serialize, Deserialize)]
struct SpatialManifest {
    selected: Vec<PoiCategory>,
    hp: SpatialHp,
    seed: u64,
    units: Vec<UnitManifest>,
}

#[derive(Serialize, Deserialize)]
struct UnitManifest {
    in_channels: usize,
    stats: ChannelStats,
}

/// The composed spatial model: a chain of units applied coarse → fine.
pub struct StackedMapper {
    pub units: Vec<SrcnnUnit>,
    pub selected: Vec<PoiCategory>,
    pub hp: SpatialHp,
    pub seed: u64,
}

impl StackedMapper {
    /// Trains one unit per adjacent ladder pair on ground-truth aggregates.
    /// Returns the mapper and per-unit loss traces.
    pub fn train(
        truth_frames: &[GridMap],
        pois: &PoiGrid,
        mask: &BoundaryMask,
        ladder: &[ZonePartition],
        selected: &[PoiCategory],
        hp: &SpatialHp,
        seed: u64,
    ) -> Result<(StackedMapper, Vec<TrainTrace>)> {
        use rand::SeedableRng;
        let streams = make_intermediate_targets(truth_frames, ladder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7372_636e);
        let mut units = Vec::with_capacity(streams.len());
        let mut traces = Vec::with_capacity(streams.len());
        for stream in &streams {
            let mut pairs = Vec::new();
            for (inp, tgt) in stream {
                let mc = build_input(inp, pois, selected)?;
                pairs.extend(extract_patches(&mc, tgt, hp.patch, hp.stride, mask)?);
            }
            let mut unit = SrcnnUnit::new(1 + dedup_categories(selected).len(), &mut rng);
            let trace = train_unit(&mut unit, &pairs, hp.patch, hp, &mut rng)?;
            units.push(unit);
            traces.push(trace);
        }
        Ok((
            StackedMapper {
                units,
                selected: dedup_categories(selected),
                hp: hp.clone(),
                seed,
            },
            traces,
        ))
    }

    /// Applies every unit in sequence to a full-size coarse raster.
    /// Output is non-negative, zero outside the boundary, same dims.
    pub fn map_level(
        &mut self,
        coarse: &GridMap,
        pois: &PoiGrid,
        mask: &BoundaryMask,
    ) -> Result<GridMap> {
        if self.units.iter().any(|u| !u.is_trained()) {
            return Err(Error::state("stacked mapper has untrained units"));
        }
        let hp = self.hp.clone();
        let selected = self.selected.clone();
        let mut cur = coarse.clone();
        let n_units = self.units.len();
        for (i, unit) in self.units.iter_mut().enumerate() {
            let input = build_input(&cur, pois, &selected)?;
            let vals = unit.predict_map(&input, mask, &hp)?;
            let level = if i + 1 == n_units {
                crate::grid::Level::Fine
            } else {
                cur.level
            };
            cur = GridMap::from_values(cur.height, cur.width, vals, level)?;
        }
        Ok(cur)
    }

    /// Maps every frame of a coarse cube to the fine level.
    pub fn map_cube(
        &mut self,
        coarse: &PopCube,
        pois: &PoiGrid,
        mask: &BoundaryMask,
    ) -> Result<PopCube> {
        let frames = coarse
            .frames
            .iter()
            .map(|f| self.map_level(f, pois, mask))
            .collect::<Result<Vec<_>>>()?;
        PopCube::new(frames, coarse.times.clone())
    }

    /// Writes per-unit checkpoints plus a JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut units_meta = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            let mut records = u.named_params();
            records.extend(u.running_stats_records());
            save_checkpoint(&dir.join(format!("unit{i}.ndt")), &records)?;
            units_meta.push(UnitManifest {
                in_channels: u.in_channels,
                stats: u
                    .stats
                    .clone()
                    .ok_or_else(|| Error::state("cannot save untrained unit"))?,
            });
        }
        let manifest = SpatialManifest {
            selected: self.selected.clone(),
            hp: self.hp.clone(),
            seed: self.seed,
            units: units_meta,
        };
        std::fs::write(
            dir.join("spatial.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<StackedMapper> {
        let manifest: SpatialManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("spatial.json"))?)?;
        let mut units = Vec::with_capacity(manifest.units.len());
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, meta) in manifest.units.iter().enumerate() {
            let mut unit = SrcnnUnit::new(meta.in_channels, &mut rng);
            let loaded = load_checkpoint(&dir.join(format!("unit{i}.ndt")))?;
            restore_into(&loaded, &unit.named_params())?;
            for (bi, b) in unit.blocks.iter_mut().enumerate() {
                let mean = loaded
                    .iter()
                    .find(|p| p.name == format!("block{bi}.running_mean"))
                    .ok_or_else(|| Error::format("missing running mean record"))?;
                let var = loaded
                    .iter()
                    .find(|p| p.name == format!("block{bi}.running_var"))
                    .ok_or_else(|| Error::format("missing running var record"))?;
                b.running.mean = mean.data.clone();
                b.running.var = var.data.clone();
                b.running.initialized = true;
            }
            unit.stats = Some(meta.stats.clone());
            units.push(unit);
        }
        Ok(StackedMapper {
            units,
            selected: manifest.selected,
            hp: manifest.hp,
            seed: manifest.seed,
        })
    }
}

fn dedup_categories(selected: &[PoiCategory]) -> Vec<PoiCategory> {
    let mut cats: Vec<PoiCategory> = selected.to_vec();
    cats.sort_by_key(|c| c.index());
    cats.dedup();
    cats
}
