//! Dynamic generation: a single LSTM, shared across all cells, that smooths
//! the 24-hour series produced by the spatial mapper toward the true
//! diurnal pattern. Each step consumes the (per-series mean-scaled) value
//! concatenated with a learned dense embedding of the hour of day; the flat
//! ablation drops the embedding channel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, GridMap, PopCube};
use crate::tensor::{
    concat_last, linear, load_checkpoint, lstm_cell, mse_loss, mul, restore_into,
    save_checkpoint, Adam, AdamConfig, LstmParams, ParamGroup, Tensor,
};

/// Hyperparameters of the temporal model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalHp {
    /// Hour-embedding width; ignored when `use_time_embedding` is false.
    pub embed_width: usize,
    pub hidden: usize,
    /// Optimizer iterations (one mini-batch of series each).
    pub iterations: usize,
    /// Series per mini-batch.
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// The flat-LSTM ablation sets this to false.
    pub use_time_embedding: bool,
}

impl Default for TemporalHp {
    fn default() -> Self {
        TemporalHp {
            embed_width: 8,
            hidden: 64,
            iterations: 400,
            batch_size: 64,
            lr: 1e-2,
            cosine_decay: true,
            use_time_embedding: true,
        }
    }
}

/// Learned projection of one-hot hours into dense vectors. The table is a
/// linear layer `[E, 24]`; `embed_hour(h)` returns its column `h`.
pub struct TimeEmbedding {
    /// `[E, 24]` weight of the linear embedding layer.
    pub table: Tensor,
}

impl TimeEmbedding {
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        TimeEmbedding {
            table: Tensor::randn_param(&[width, 24], (1.0 / 24.0f64).sqrt(), rng),
        }
    }

    /// Identity table (E = 24): embed(h) is the one-hot vector of h.
    pub fn identity() -> Self {
        let mut data = vec![0.0; 24 * 24];
        for h in 0..24 {
            data[h * 24 + h] = 1.0;
        }
        TimeEmbedding {
            table: Tensor::param(&[24, 24], data).expect("identity table"),
        }
    }

    pub fn width(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn one_hot(h: usize) -> Result<Tensor> {
        if h >= 24 {
            return Err(Error::input(format!("hour {h} out of range 0..24")));
        }
        let mut v = vec![0.0; 24];
        v[h] = 1.0;
        Tensor::from_vec(&[24], v)
    }

    /// Dense vector `[E]` for one hour; differentiable into the table.
    pub fn embed_hour(&self, h: usize) -> Result<Tensor> {
        linear(&Self::one_hot(h)?, &self.table, None)
    }

    /// `[B, E]` embedding one (possibly different) hour per row.
    fn embed_rows(&self, hours: &[usize]) -> Result<Tensor> {
        let b = hours.len();
        let mut data = vec![0.0; b * 24];
        for (r, &h) in hours.iter().enumerate() {
            if h >= 24 {
                return Err(Error::input(format!("hour {h} out of range 0..24")));
            }
            data[r * 24 + h] = 1.0;
        }
        let onehot = Tensor::from_vec(&[b, 24], data)?;
        linear(&onehot, &self.table, None)
    }
}

/// One cell's 24-hour series with a mask of known steps; unknown steps are
/// fed to the model as zeros.
#[derive(Debug, Clone)]
pub struct RegionSeries {
    pub row: usize,
    pub col: usize,
    pub values: [f64; 24],
    pub known: [bool; 24],
}

impl RegionSeries {
    pub fn new(row: usize, col: usize, values: [f64; 24], known: [bool; 24]) -> Result<Self> {
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::input("region series values must be non-negative"));
        }
        Ok(RegionSeries {
            row,
            col,
            values,
            known,
        })
    }

    fn masked_values(&self) -> [f64; 24] {
        let mut v = self.values;
        for (x, k) in v.iter_mut().zip(&self.known) {
            if !*k {
                *x = 0.0;
            }
        }
        v
    }
}

/// The shared temporal model: hour embedding (optional), one LSTM layer,
/// and a scalar head. Parameter count is independent of grid size.
pub struct TemporalModel {
    pub embedding: Option<TimeEmbedding>,
    lstm: LstmParams,
    head_w: Tensor,
    head_b: Tensor,
    pub hp: TemporalHp,
    trained: bool,
}

impl TemporalModel {
    pub fn new(hp: &TemporalHp, rng: &mut ChaCha8Rng) -> Self {
        let embedding = hp
            .use_time_embedding
            .then(|| TimeEmbedding::new(hp.embed_width, rng));
        let input_size = 1 + embedding.as_ref().map_or(0, |e| e.width());
        TemporalModel {
            embedding,
            lstm: LstmParams::new(input_size, hp.hidden, rng),
            head_w: Tensor::randn_param(&[1, hp.hidden], (1.0 / hp.hidden as f64).sqrt(), rng),
            head_b: Tensor::param(&[1], vec![0.0]).expect("head bias"),
            hp: hp.clone(),
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.lstm.params();
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        if let Some(e) = &self.embedding {
            out.push(e.table.clone());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.lstm.named_params("lstm");
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        if let Some(e) = &self.embedding {
            out.push(("embed.table".to_string(), e.table.clone()));
        }
        out
    }

    /// Runs the LSTM over 24 steps for a batch of mean-scaled series
    /// `[B, 24]`; returns predictions `[B, 24]` in the scaled space.
    /// `start_hours[r]` is the hour of day of row `r`'s first step, so
    /// windows may start anywhere in the diurnal cycle; the embedding (if
    /// any) receives the true hour, wrapping past midnight.
    fn forward_scaled(&self, series: &Tensor, start_hours: &[usize]) -> Result<Tensor> {
        let shape = series.shape();
        if shape.len() != 2 || shape[1] != 24 {
            return Err(Error::shape(format!(
                "temporal forward expects [B, 24], got {shape:?}"
            )));
        }
        let b = shape[0];
        if start_hours.len() != b {
            return Err(Error::shape(format!(
                "temporal forward: {b} rows but {} start hours",
                start_hours.len()
            )));
        }
        let data = series.to_vec();
        let mut h = Tensor::zeros(&[b, self.hp.hidden]);
        let mut c = Tensor::zeros(&[b, self.hp.hidden]);
        let mut outs: Vec<Tensor> = Vec::with_capacity(24);
        // two laps over the series: the first warms the state up so that
        // every prediction (read from the second lap) conditions on the
        // whole day, not just the hours before it
        for t in 0..48 {
            let step = t % 24;
            let vals: Vec<f64> = (0..b).map(|r| data[r * 24 + step]).collect();
            let vt = Tensor::from_vec(&[b, 1], vals)?;
            let x = match &self.embedding {
                Some(e) => {
                    let hours: Vec<usize> =
                        start_hours.iter().map(|s| (s + step) % 24).collect();
                    let emb = e.embed_rows(&hours)?;
                    concat_last(&[&vt, &emb])?
                }
                None => vt.clone(),
            };
            let (nh, nc) = lstm_cell(&x, &h, &c, &self.lstm)?;
            h = nh;
            c = nc;
            if t < 24 {
                continue;
            }
            // residual head: the model starts near the identity (the
            // input's own shape) and learns a correction on top of it
            let delta = linear(&h, &self.head_w, Some(&self.head_b))?;
            outs.push(crate::tensor::add(&vt, &delta)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        concat_last(&refs)
    }

    /// Smooths one series: unknown steps enter as zeros, predictions are
    /// rescaled by the series mean and clamped at zero.
    pub fn smooth_series(&self, series: &RegionSeries) -> Result<[f64; 24]> {
        if !self.trained {
            return Err(Error::state("temporal model is untrained"));
        }
        let vals = series.masked_values();
        let mean = vals.iter().sum::<f64>() / 24.0;
        if mean <= 0.0 {
            return Ok([0.0; 24]);
        }
        let scaled: Vec<f64> = vals.iter().map(|v| v / mean).collect();
        let x = Tensor::from_vec(&[1, 24], scaled)?;
        let out = self.forward_scaled(&x, &[0])?;
        let mut res = [0.0; 24];
        for (r, o) in res.iter_mut().zip(out.to_vec()) {
            *r = (o * mean).max(0.0);
        }
        Ok(res)
    }

    /// Applies `smooth_series` to every in-boundary cell of a 24-frame
    /// static cube; out-of-boundary cells stay exactly zero.
    pub fn smooth_cube(&self, static_cube: &PopCube, mask: &BoundaryMask) -> Result<PopCube> {
        if static_cube.frames.len() != 24 {
            return Err(Error::input(format!(
                "smooth_cube expects 24 hourly frames, got {}",
                static_cube.frames.len()
            )));
        }
        let (h, w) = (static_cube.frames[0].height, static_cube.frames[0].width);
        let mut out: Vec<GridMap> = static_cube
            .frames
            .iter()
            .map(|f| GridMap::zeros(h, w, f.level))
            .collect();
        for r in 0..h {
            for c in 0..w {
                if !mask.get(r, c) {
                    continue;
                }
                let mut values = [0.0; 24];
                for (t, f) in static_cube.frames.iter().enumerate() {
                    values[t] = f.get(r, c).max(0.0);
                }
                let series = RegionSeries::new(r, c, values, [true; 24])?;
                let smoothed = self.smooth_series(&series)?;
                for (t, v) in smoothed.iter().enumerate() {
                    out[t].set(r, c, *v);
                }
            }
        }
        PopCube::new(out, static_cube.times.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.trained {
            return Err(Error::state("cannot save an untrained temporal model"));
        }
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("temporal.ndt"), &self.named_params())?;
        let manifest = TemporalManifest {
            hp: self.hp.clone(),
            scaling: "per-series-mean".to_string(),
        };
        std::fs::write(
            dir.join("temporal.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TemporalModel> {
        let manifest: TemporalManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("temporal.json"))?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TemporalModel::new(&manifest.hp, &mut rng);
        let loaded = load_checkpoint(&dir.join("temporal.ndt"))?;
        restore_into(&loaded, &model.named_params())?;
        model.trained = true;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TemporalManifest {
    hp: TemporalHp,
    scaling: String,
}

/// Per-cell (input stream, target stream) over the full training span:
/// the cell's hourly values across all days, concatenated in time order.
/// Cells whose stream is entirely zero on either side are dropped.
fn collect_cell_streams(
    static_outputs: &PopCube,
    truth: &PopCube,
    mask: &BoundaryMask,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if static_outputs.times != truth.times {
        return Err(Error::input("train_temporal: cubes are misaligned in time"));
    }
    let (h, w) = (
        static_outputs.frames[0].height,
        static_outputs.frames[0].width,
    );
    if truth.frames[0].height != h || truth.frames[0].width != w {
        return Err(Error::shape("train_temporal: cube shapes differ"));
    }
    if static_outputs.times.len() % 24 != 0 {
        return Err(Error::input("train_temporal: need whole 24-hour days"));
    }
    for day0 in (0..static_outputs.times.len()).step_by(24) {
        if static_outputs.times[day0].hour != 0 {
            return Err(Error::input("train_temporal: days must start at hour 0"));
        }
    }
    let n = static_outputs.times.len();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for t in 0..n {
                x.push(static_outputs.frames[t].get(r, c).max(0.0));
                y.push(truth.frames[t].get(r, c).max(0.0));
            }
            if x.iter().sum::<f64>() <= 0.0 || y.iter().sum::<f64>() <= 0.0 {
                continue;
            }
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Trains the shared model on all cells' series: inputs from the spatial
/// mapper, targets from ground truth, MSE objective, Adam. Deterministic
/// under the seed.
///
/// Training windows are 24 hours long but start at a uniformly random hour
/// of each cell's stream (wrapping circularly), so step position within a
/// window carries no hour-of-day information — only the hour embedding
/// does. Each window's input is scaled by its own mean and the target by
/// its own mean (shape-to-shape learning; the level is reattached at
/// inference from the input mean — scaling the target by the input mean
/// instead makes the loss heavy-tailed wherever the static level is off).
pub fn train_temporal(
    static_outputs: &PopCube,
    truth: &PopCube,
    mask: &BoundaryMask,
    hp: &TemporalHp,
    seed: u64,
) -> Result<(TemporalModel, Vec<f64>)> {
    let streams = collect_cell_streams(static_outputs, truth, mask)?;
    if streams.is_empty() {
        return Err(Error::input("train_temporal: no usable series"));
    }
    let span = streams[0].0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746d_706c);
    let mut model = TemporalModel::new(hp, &mut rng);
    let mut opt = Adam::new(
        vec![ParamGroup {
            params: model.params(),
            lr: hp.lr,
        }],
        AdamConfig::default(),
    )?;
    let bsz = hp.batch_size.min(streams.len());
    let mut losses = Vec::with_capacity(hp.iterations);
    for iter in 0..hp.iterations {
        if hp.cosine_decay {
            let frac = iter as f64 / hp.iterations as f64;
            opt.set_lr_scale(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))?;
        }
        let mut xb = Vec::with_capacity(bsz * 24);
        let mut yb = Vec::with_capacity(bsz * 24);
        let mut hours = Vec::with_capacity(bsz);
        let mut y_means = Vec::with_capacity(bsz);
        let mut tries = 0;
        while hours.len() < bsz && tries < bsz * 50 {
            tries += 1;
            let (xs, ys) = &streams[rng.gen_range(0..streams.len())];
            let start = rng.gen_range(0..span);
            let mut xw = [0.0; 24];
            let mut yw = [0.0; 24];
            for t in 0..24 {
                let idx = (start + t) % span;
                xw[t] = xs[idx];
                yw[t] = ys[idx];
            }
            let x_mean = xw.iter().sum::<f64>() / 24.0;
            let y_mean = yw.iter().sum::<f64>() / 24.0;
            if x_mean <= 0.0 || y_mean <= 0.0 {
                continue;
            }
            xb.extend(xw.iter().map(|v| v / x_mean));
            yb.extend(yw.iter().map(|v| v / y_mean));
            hours.push(start % 24);
            y_means.push(y_mean);
        }
        if hours.is_empty() {
            return Err(Error::input("train_temporal: no usable series"));
        }
        let b = hours.len();
        let x = Tensor::from_vec(&[b, 24], xb)?;
        let y = Tensor::from_vec(&[b, 24], yb)?;
        // weight each series' error by its population level so the scaled
        // objective matches raw-persons RMSE, which high-population cells
        // dominate; normalized to keep the loss magnitude level-free
        let rms = (y_means.iter().map(|m| m * m).sum::<f64>() / b as f64).sqrt();
        let mut wts = Vec::with_capacity(b * 24);
        for m in &y_means {
            wts.extend(std::iter::repeat(m / rms).take(24));
        }
        let weights = Tensor::from_vec(&[b, 24], wts)?;
        let pred = model.forward_scaled(&x, &hours)?;
        let loss = mse_loss(&mul(&pred, &weights)?, &mul(&y, &weights)?)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::diverged(format!(
                "temporal training: non-finite loss at iteration {iter} (lr {})",
                hp.lr
            )));
        }
        losses.push(lv);
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;
    }
    model.trained = true;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FrameTime, Level};

    fn hp_small() -> TemporalHp {
        TemporalHp {
            hidden: 16,
            iterations: 150,
            batch_size: 16,
            ..TemporalHp::default()
        }
    }

    #[test]
    fn one_hot_and_identity_embedding() {
        let oh = TimeEmbedding::one_hot(5).unwrap().to_vec();
        assert_eq!(oh.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(oh[5], 1.0);
        assert!(TimeEmbedding::one_hot(24).is_err());

        let id = TimeEmbedding::identity();
        assert_eq!(id.embed_hour(7).unwrap().to_vec(), oh_vec(7));
    }

    fn oh_vec(h: usize) -> Vec<f64> {
        let mut v = vec![0.0; 24];
        v[h] = 1.0;
        v
    }

    #[test]
    fn embedding_gradient_touches_only_queried_hour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = TimeEmbedding::new(4, &mut rng);
        let e = emb.embed_hour(9).unwrap();
        let target = Tensor::zeros(&[4]);
        let loss = mse_loss(&e, &target).unwrap();
        loss.backward().unwrap();
        let grad = emb.table.grad().unwrap();
        for row in 0..4 {
            for h in 0..24 {
                let g = grad[row * 24 + h];
                if h == 9 {
                    assert!(g != 0.0, "row {row} hour 9 has zero grad");
                } else {
                    assert_eq!(g, 0.0, "row {row} hour {h} unexpectedly updated");
                }
            }
        }
    }

    #[test]
    fn param_count_independent_of_grid_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = TemporalModel::new(&hp_small(), &mut rng);
        // the model never sees the grid; its size is a function of hp only
        let m2 = TemporalModel::new(&hp_small(), &mut rng);
        assert_eq!(m.param_count(), m2.param_count());
        let flat = TemporalModel::new(
            &TemporalHp {
                use_time_embedding: false,
                ..hp_small()
            },
            &mut rng,
        );
        assert!(flat.param_count() < m.param_count());
    }

    fn cube_from_fn(
        days: usize,
        h: usize,
        w: usize,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> PopCube {
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for d in 0..days {
            for hour in 0..24 {
                let mut m = GridMap::zeros(h, w, Level::Fine);
                for r in 0..h {
                    for c in 0..w {
                        m.set(r, c, f(d, hour, r, c));
                    }
                }
                frames.push(m);
                times.push(FrameTime { day: d, hour });
            }
        }
        PopCube::new(frames, times).unwrap()
    }

    #[test]
    fn misaligned_cubes_rejected() {
        let a = cube_from_fn(1, 4, 4, |_, _, _, _| 1.0);
        let mut b = cube_from_fn(1, 4, 4, |_, _, _, _| 1.0);
        b.times[3].hour = 7;
        let mask = BoundaryMask::all_inside(4, 4);
        assert!(train_temporal(&a, &b, &mask, &hp_small(), 1).is_err());
    }

    #[test]
    fn constant_series_learned_to_five_percent() {
        // inputs and targets are per-cell constants; the scaled task is
        // exactly "predict 1 everywhere"
        let cube = cube_from_fn(2, 4, 4, |_, _, r, c| 40.0 + (r * 4 + c) as f64 * 10.0);
        let mask = BoundaryMask::all_inside(4, 4);
        let hp = TemporalHp {
            iterations: 400,
            ..hp_small()
        };
        let (model, _) = train_temporal(&cube, &cube, &mask, &hp, 3).unwrap();
        let series =
            RegionSeries::new(0, 0, [120.0; 24], [true; 24]).unwrap();
        let out = model.smooth_series(&series).unwrap();
        for v in out {
            assert!((v - 120.0).abs() < 0.05 * 120.0, "prediction {v} vs 120");
        }
    }

    #[test]
    fn same_seed_identical_traces() {
        let cube = cube_from_fn(1, 4, 4, |_, h, r, _| 50.0 + (h as f64) + r as f64);
        let mask = BoundaryMask::all_inside(4, 4);
        let run = || {
            train_temporal(&cube, &cube, &mask, &hp_small(), 5)
                .unwrap()
                .1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untrained_model_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = TemporalModel::new(&hp_small(), &mut rng);
        let s = RegionSeries::new(0, 0, [1.0; 24], [true; 24]).unwrap();
        assert!(model.smooth_series(&s).is_err());
    }

    #[test]
    fn smooth_cube_shape_and_boundary_zeros() {
        let diurnal = |h: usize| 1.0 + 0.5 * ((h as f64 / 24.0) * std::f64::consts::TAU).sin();
        let cube = cube_from_fn(1, 6, 6, |_, h, r, c| {
            80.0 * diurnal(h) * (1.0 + 0.1 * (r + c) as f64)
        });
        let mut mask = BoundaryMask::all_inside(6, 6);
        mask.inside[0] = false;
        mask.inside[35] = false;
        let (model, _) = train_temporal(&cube, &cube, &mask, &hp_small(), 7).unwrap();
        let smoothed = model.smooth_cube(&cube, &mask).unwrap();
        assert_eq!(smoothed.frames.len(), 24);
        for f in &smoothed.frames {
            assert_eq!(f.height, 6);
            assert_eq!(f.width, 6);
            assert_eq!(f.values[0], 0.0);
            assert_eq!(f.values[35], 0.0);
            assert!(f.values.iter().all(|v| *v >= 0.0));
        }
        let two_days = cube_from_fn(2, 6, 6, |_, _, _, _| 1.0);
        assert!(model.smooth_cube(&two_days, &mask).is_err());
    }

    #[test]
    fn masked_night_step_predicts_positive_for_residential_shape() {
        // train on residential-like series (high at night, low at noon);
        // a series with hour 23 masked out still gets a positive prediction
        let shape = crate::citygen::FunctionClass::Residential.hourly_shape();
        let cube = cube_from_fn(2, 4, 4, |_, h, r, c| {
            90.0 * shape[h] * (1.0 + 0.05 * (r + c) as f64)
        });
        let mask = BoundaryMask::all_inside(4, 4);
        let hp = TemporalHp {
            iterations: 250,
            ..hp_small()
        };
        let (model, _) = train_temporal(&cube, &cube, &mask, &hp, 8).unwrap();
        let mut values = [0.0; 24];
        let mut known = [true; 24];
        for (t, v) in values.iter_mut().enumerate() {
            *v = 90.0 * shape[t];
        }
        values[23] = 0.0;
        known[23] = false;
        let series = RegionSeries::new(1, 1, values, known).unwrap();
        let out = model.smooth_series(&series).unwrap();
        assert!(out[23] > 0.0, "masked 23:00 prediction {}", out[23]);
        assert_eq!(out.len(), 24);
    }

    #[test]
    fn flat_ablation_trains_without_embedding() {
        let cube = cube_from_fn(1, 4, 4, |_, h, _, _| 60.0 + h as f64);
        let mask = BoundaryMask::all_inside(4, 4);
        let hp = TemporalHp {
            use_time_embedding: false,
            ..hp_small()
        };
        let (model, losses) = train_temporal(&cube, &cube, &mask, &hp, 9).unwrap();
        assert!(model.embedding.is_none());
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let cube = cube_from_fn(1, 4, 4, |_, h, r, _| 70.0 + (h + r) as f64);
        let mask = BoundaryMask::all_inside(4, 4);
        let (model, _) = train_temporal(&cube, &cube, &mask, &hp_small(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = TemporalModel::load(dir.path()).unwrap();
        let s = RegionSeries::new(0, 0, [80.0; 24], [true; 24]).unwrap();
        assert_eq!(model.smooth_series(&s).unwrap(), back.smooth_series(&s).unwrap());
    }
}
