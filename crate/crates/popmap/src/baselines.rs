//! Pixelwise dasymetric regression baselines: each in-boundary cell is one
//! sample whose features are the co-located coarse-level density plus the
//! four PoI counts, and whose target is the fine-level density. Population
//! values may be log(1+x)-transformed, with the inverse applied (and floored
//! at zero) at prediction time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, PoiGrid, PopCube};
use crate::tensor::{linear, mse_loss, relu, Adam, AdamConfig, ParamGroup, Tensor};

pub const N_FEATURES: usize = 5;

/// Flat (features, target) rows: in-boundary cells × frames.
#[derive(Debug, Clone)]
pub struct PixelDataset {
    pub features: Vec<[f64; N_FEATURES]>,
    pub targets: Vec<f64>,
    pub log_transform: bool,
    /// Cell index of each row (row-major grid position).
    pub cells: Vec<usize>,
    /// Frame index of each row.
    pub frames: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl PixelDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn fwd(v: f64, log: bool) -> f64 {
    if log {
        v.max(0.0).ln_1p()
    } else {
        v
    }
}

/// Inverse of the target transform; never negative.
pub fn inverse_target(v: f64, log: bool) -> f64 {
    if log {
        v.exp_m1().max(0.0)
    } else {
        v.max(0.0)
    }
}

/// One row per in-boundary cell per frame: coarse density (optionally
/// log-transformed, like the target) and the four PoI counts.
pub fn build_pixel_dataset(
    coarse: &PopCube,
    fine: &PopCube,
    pois: &PoiGrid,
    mask: &BoundaryMask,
    log_transform: bool,
) -> Result<PixelDataset> {
    if coarse.times != fine.times {
        return Err(Error::input("pixel dataset: cubes are misaligned in time"));
    }
    let (h, w) = (coarse.frames[0].height, coarse.frames[0].width);
    if fine.frames[0].height != h || fine.frames[0].width != w {
        return Err(Error::shape("pixel dataset: cube shapes differ"));
    }
    let mut ds = PixelDataset {
        features: Vec::new(),
        targets: Vec::new(),
        log_transform,
        cells: Vec::new(),
        frames: Vec::new(),
        height: h,
        width: w,
    };
    for (fi, (cf, ff)) in coarse.frames.iter().zip(&fine.frames).enumerate() {
        for cell in 0..h * w {
            if !mask.inside[cell] {
                continue;
            }
            ds.features.push([
                fwd(cf.values[cell], log_transform),
                pois.counts[0][cell],
                pois.counts[1][cell],
                pois.counts[2][cell],
                pois.counts[3][cell],
            ]);
            ds.targets.push(fwd(ff.values[cell], log_transform));
            ds.cells.push(cell);
            ds.frames.push(fi);
        }
    }
    if ds.features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("pixel dataset: non-finite feature"));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    Lasso,
    Tree,
    Forest,
    Mlp,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::Lasso,
        BaselineMethod::Tree,
        BaselineMethod::Forest,
        BaselineMethod::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Lasso => "lasso",
            BaselineMethod::Tree => "tree",
            BaselineMethod::Forest => "forest",
            BaselineMethod::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineHp {
    pub lasso_lambda: f64,
    pub lasso_iterations: usize,
    pub tree_max_depth: usize,
    pub tree_min_leaf: usize,
    pub forest_trees: usize,
    pub forest_min_leaf: usize,
    pub forest_max_depth: usize,
    /// Rows bootstrapped per tree, capped for large datasets.
    pub forest_max_samples: usize,
    pub mlp_hidden: usize,
    pub mlp_iterations: usize,
    pub mlp_batch: usize,
    pub mlp_lr: f64,
}

impl Default for BaselineHp {
    fn default() -> Self {
        BaselineHp {
            lasso_lambda: 0.1,
            lasso_iterations: 200,
            tree_max_depth: 30,
            tree_min_leaf: 1,
            forest_trees: 100,
            forest_min_leaf: 2,
            forest_max_depth: 30,
            forest_max_samples: 50_000,
            mlp_hidden: 64,
            mlp_iterations: 600,
            mlp_batch: 64,
            mlp_lr: 1e-2,
        }
    }
}

/// A fitted baseline. Predictions are returned in the original population
/// scale (inverse transform applied, floored at zero).
pub enum BaselineModel {
    Lasso {
        weights: [f64; N_FEATURES],
        intercept: f64,
        log_transform: bool,
    },
    Tree {
        tree: Tree,
        log_transform: bool,
    },
    Forest {
        trees: Vec<Tree>,
        log_transform: bool,
    },
    Mlp {
        layers: Vec<(Tensor, Tensor)>,
        feat_mean: [f64; N_FEATURES],
        feat_std: [f64; N_FEATURES],
        target_mean: f64,
        target_std: f64,
        log_transform: bool,
    },
}

impl BaselineModel {
    /// Transformed-space prediction for one feature row.
    fn predict_transformed(&self, x: &[f64; N_FEATURES]) -> f64 {
        match self {
            BaselineModel::Lasso {
                weights, intercept, ..
            } => intercept + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
            BaselineModel::Tree { tree, .. } => tree.predict(x),
            BaselineModel::Forest { trees, .. } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            BaselineModel::Mlp {
                layers,
                feat_mean,
                feat_std,
                target_mean,
                target_std,
                ..
            } => {
                let scaled: Vec<f64> = x
                    .iter()
                    .zip(feat_mean.iter().zip(feat_std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect();
                let mut cur = Tensor::from_vec(&[N_FEATURES], scaled).expect("mlp input");
                for (i, (w, b)) in layers.iter().enumerate() {
                    cur = linear(&cur, w, Some(b)).expect("mlp layer");
                    if i + 1 < layers.len() {
                        cur = relu(&cur);
                    }
                }
                cur.item() * target_std + target_mean
            }
        }
    }

    fn log_transform(&self) -> bool {
        match self {
            BaselineModel::Lasso { log_transform, .. }
            | BaselineModel::Tree { log_transform, .. }
            | BaselineModel::Forest { log_transform, .. }
            | BaselineModel::Mlp { log_transform, .. } => *log_transform,
        }
    }

    /// Original-scale (non-negative) predictions for feature rows.
    pub fn predict(&self, features: &[[f64; N_FEATURES]]) -> Vec<f64> {
        let log = self.log_transform();
        features
            .iter()
            .map(|x| inverse_target(self.predict_transformed(x), log))
            .collect()
    }
}

/// Fits one method. Forest and MLP consume the seed; lasso and tree are
/// deterministic regardless.
pub fn fit(
    method: BaselineMethod,
    data: &PixelDataset,
    hp: &BaselineHp,
    seed: u64,
) -> Result<BaselineModel> {
    if data.is_empty() {
        return Err(Error::input("baseline fit: empty dataset"));
    }
    match method {
        BaselineMethod::Lasso => fit_lasso(data, hp),
        BaselineMethod::Tree => {
            let rows: Vec<u32> = (0..data.len() as u32).collect();
            let tree = Tree::fit(
                &data.features,
                &data.targets,
                rows,
                hp.tree_max_depth,
                hp.tree_min_leaf,
                None,
                &mut ChaCha8Rng::seed_from_u64(seed),
            );
            Ok(BaselineModel::Tree {
                tree,
                log_transform: data.log_transform,
            })
        }
        BaselineMethod::Forest => fit_forest(data, hp, seed),
        BaselineMethod::Mlp => fit_mlp(data, hp, seed),
    }
}

// ---------------------------------------------------------------------------
// lasso: cyclic coordinate descent on standardized features

fn fit_lasso(data: &PixelDataset, hp: &BaselineHp) -> Result<BaselineModel> {
    let n = data.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    let mut std = [0.0; N_FEATURES];
    for x in &data.features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for x in &data.features {
        for j in 0..N_FEATURES {
            std[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
    }
    let y_mean = data.targets.iter().sum::<f64>() / n;

    // degenerate (constant) features get zero weight
    let active: Vec<usize> = (0..N_FEATURES).filter(|&j| std[j] > 1e-12).collect();
    let mut beta = [0.0; N_FEATURES]; // on standardized features
    let mut resid: Vec<f64> = data.targets.iter().map(|t| t - y_mean).collect();
    for _ in 0..hp.lasso_iterations {
        let mut max_delta = 0.0f64;
        for &j in &active {
            // rho = (1/n) sum x_ij (resid_i + beta_j x_ij), with x standardized
            let mut rho = 0.0;
            for (i, x) in data.features.iter().enumerate() {
                let xs = (x[j] - mean[j]) / std[j];
                rho += xs * (resid[i] + beta[j] * xs);
            }
            rho /= n;
            let new_b = soft_threshold(rho, hp.lasso_lambda);
            let delta = new_b - beta[j];
            if delta != 0.0 {
                for (i, x) in data.features.iter().enumerate() {
                    let xs = (x[j] - mean[j]) / std[j];
                    resid[i] -= delta * xs;
                }
                beta[j] = new_b;
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < 1e-10 {
            break;
        }
    }
    // fold standardization back into raw-feature weights
    let mut weights = [0.0; N_FEATURES];
    let mut intercept = y_mean;
    for &j in &active {
        weights[j] = beta[j] / std[j];
        intercept -= beta[j] * mean[j] / std[j];
    }
    Ok(BaselineModel::Lasso {
        weights,
        intercept,
        log_transform: data.log_transform,
    })
}

fn soft_threshold(rho: f64, lambda: f64) -> f64 {
    if rho > lambda {
        rho - lambda
    } else if rho < -lambda {
        rho + lambda
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// CART regression tree with variance (SSE) splitting

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

impl Tree {
    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// `feature_sub`: number of random candidate features per split
    /// (forests); `None` considers all features (single tree).
    fn fit(
        features: &[[f64; N_FEATURES]],
        targets: &[f64],
        rows: Vec<u32>,
        max_depth: usize,
        min_leaf: usize,
        feature_sub: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        tree.grow(features, targets, rows, 0, max_depth, min_leaf, feature_sub, rng);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        features: &[[f64; N_FEATURES]],
        targets: &[f64],
        rows: Vec<u32>,
        depth: usize,
        max_depth: usize,
        min_leaf: usize,
        feature_sub: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| targets[r as usize]).sum();
        let mean = sum / n as f64;
        let make_leaf = |tree: &mut Tree| {
            tree.nodes.push(TreeNode::Leaf { value: mean });
            tree.nodes.len() - 1
        };
        if depth >= max_depth || n < 2 * min_leaf {
            return make_leaf(self);
        }

        // candidate features (random subset for forests)
        let mut cand: Vec<usize> = (0..N_FEATURES).collect();
        if let Some(k) = feature_sub {
            for i in 0..k.min(N_FEATURES) {
                let j = rng.gen_range(i..N_FEATURES);
                cand.swap(i, j);
            }
            cand.truncate(k.min(N_FEATURES));
        }

        // best split by SSE reduction via sorted prefix sums
        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, sse)
        let mut order = rows.clone();
        for &f in &cand {
            order.sort_unstable_by(|&a, &b| {
                features[a as usize][f]
                    .partial_cmp(&features[b as usize][f])
                    .unwrap()
            });
            let total_sum: f64 = sum;
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            let total_sq: f64 = rows
                .iter()
                .map(|&r| targets[r as usize] * targets[r as usize])
                .sum();
            for i in 0..n - 1 {
                let t = targets[order[i] as usize];
                left_sum += t;
                left_sq += t * t;
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let xv = features[order[i] as usize][f];
                let xnext = features[order[i + 1] as usize][f];
                if xv == xnext {
                    continue;
                }
                let right_sum = total_sum - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / nl as f64)
                    + (right_sq - right_sum * right_sum / nr as f64);
                if best.map_or(true, |(_, _, b)| sse < b) {
                    best = Some((f, 0.5 * (xv + xnext), sse));
                }
            }
        }
        let Some((feature, threshold, _)) = best else {
            return make_leaf(self);
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&r| features[r as usize][feature] <= threshold);
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(
            features, targets, left_rows, depth + 1, max_depth, min_leaf, feature_sub, rng,
        );
        let right = self.grow(
            features, targets, right_rows, depth + 1, max_depth, min_leaf, feature_sub, rng,
        );
        if let TreeNode::Split {
            left: l, right: r, ..
        } = &mut self.nodes[idx]
        {
            *l = left;
            *r = right;
        }
        idx
    }
}

fn fit_forest(data: &PixelDataset, hp: &BaselineHp, seed: u64) -> Result<BaselineModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x666f_7265);
    let k = (N_FEATURES as f64).sqrt().ceil() as usize;
    let n = data.len();
    let per_tree = hp.forest_max_samples.min(n);
    let trees: Vec<Tree> = (0..hp.forest_trees)
        .map(|_| {
            let rows: Vec<u32> = (0..per_tree).map(|_| rng.gen_range(0..n) as u32).collect();
            Tree::fit(
                &data.features,
                &data.targets,
                rows,
                hp.forest_max_depth,
                hp.forest_min_leaf,
                Some(k),
                &mut rng,
            )
        })
        .collect();
    Ok(BaselineModel::Forest {
        trees,
        log_transform: data.log_transform,
    })
}

// ---------------------------------------------------------------------------
// two-hidden-layer ReLU network on the autodiff engine

fn fit_mlp(data: &PixelDataset, hp: &BaselineHp, seed: u64) -> Result<BaselineModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_70);
    let n = data.len() as f64;
    let mut feat_mean = [0.0; N_FEATURES];
    let mut feat_std = [0.0; N_FEATURES];
    for x in &data.features {
        for (m, v) in feat_mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut feat_mean {
        *m /= n;
    }
    for x in &data.features {
        for j in 0..N_FEATURES {
            feat_std[j] += (x[j] - feat_mean[j]).powi(2);
        }
    }
    for s in &mut feat_std {
        *s = (*s / n).sqrt().max(1e-9);
    }
    let target_mean = data.targets.iter().sum::<f64>() / n;
    let target_std = (data
        .targets
        .iter()
        .map(|t| (t - target_mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        .max(1e-9);

    let h = hp.mlp_hidden;
    let layer = |fi: usize, fo: usize, rng: &mut ChaCha8Rng| {
        (
            Tensor::randn_param(&[fo, fi], (2.0 / fi as f64).sqrt(), rng),
            Tensor::param(&[fo], vec![0.0; fo]).expect("mlp bias"),
        )
    };
    let layers = vec![
        layer(N_FEATURES, h, &mut rng),
        layer(h, h, &mut rng),
        layer(h, 1, &mut rng),
    ];
    let params: Vec<Tensor> = layers
        .iter()
        .flat_map(|(w, b)| [w.clone(), b.clone()])
        .collect();
    let mut opt = Adam::new(
        vec![ParamGroup {
            params,
            lr: hp.mlp_lr,
        }],
        AdamConfig::default(),
    )?;
    let bsz = hp.mlp_batch.min(data.len());
    for iter in 0..hp.mlp_iterations {
        let frac = iter as f64 / hp.mlp_iterations as f64;
        opt.set_lr_scale(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))?;
        let mut xb = Vec::with_capacity(bsz * N_FEATURES);
        let mut yb = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            let i = rng.gen_range(0..data.len());
            for j in 0..N_FEATURES {
                xb.push((data.features[i][j] - feat_mean[j]) / feat_std[j]);
            }
            yb.push((data.targets[i] - target_mean) / target_std);
        }
        let x = Tensor::from_vec(&[bsz, N_FEATURES], xb)?;
        let y = Tensor::from_vec(&[bsz, 1], yb)?;
        let mut cur = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            cur = linear(&cur, w, Some(b))?;
            if i + 1 < layers.len() {
                cur = relu(&cur);
            }
        }
        let loss = mse_loss(&cur, &y)?;
        if !loss.item().is_finite() {
            return Err(Error::diverged(format!(
                "mlp training: non-finite loss at iteration {iter}"
            )));
        }
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;
    }
    Ok(BaselineModel::Mlp {
        layers,
        feat_mean,
        feat_std,
        target_mean,
        target_std,
        log_transform: data.log_transform,
    })
}
