//! Evaluation: RMSE/NRMSE/Pearson/MAE over masked cells, day-based
//! cross-validation folds, period-segmented and PoI-ablation experiment
//! drivers, locality breakdowns, and report files (CSV plus a plain-text
//! table).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::citygen::{CityModel, FunctionClass};
use crate::error::{Error, Result};
use crate::grid::{BoundaryMask, PoiCategory, PoiGrid, PopCube};

/// One evaluated scope: RMSE, NRMSE = RMSE / mean(truth), globally pooled
/// Pearson correlation, and MAE. A constant truth leaves the correlation
/// undefined: `corr` is NaN and `corr_defined` is false.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: String,
    pub rmse: f64,
    pub nrmse: f64,
    pub corr: f64,
    pub corr_defined: bool,
    pub mae: f64,
    /// (cell, frame) pairs that entered the metric.
    pub n: usize,
}

/// RMSE/NRMSE/Corr/MAE over in-boundary cells of every frame, pooled into a
/// single report.
pub fn compute_metrics(pred: &PopCube, truth: &PopCube, mask: &BoundaryMask) -> Result<MetricReport> {
    if pred.times != truth.times {
        return Err(Error::input("compute_metrics: cubes are misaligned in time"));
    }
    if pred.is_empty() {
        return Err(Error::input("compute_metrics: empty cubes"));
    }
    if pred.height() != truth.height()
        || pred.width() != truth.width()
        || pred.height() != mask.height
        || pred.width() != mask.width
    {
        return Err(Error::shape("compute_metrics: shape mismatch"));
    }
    let mut n = 0usize;
    let (mut se, mut ae, mut sp, mut st) = (0.0, 0.0, 0.0, 0.0);
    for (pf, tf) in pred.frames.iter().zip(&truth.frames) {
        for cell in 0..mask.inside.len() {
            if !mask.inside[cell] {
                continue;
            }
            let (p, t) = (pf.values[cell], tf.values[cell]);
            if !p.is_finite() || !t.is_finite() {
                return Err(Error::input("compute_metrics: non-finite value"));
            }
            se += (p - t) * (p - t);
            ae += (p - t).abs();
            sp += p;
            st += t;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::input("compute_metrics: mask selects no cells"));
    }
    let nf = n as f64;
    let (mp, mt) = (sp / nf, st / nf);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (pf, tf) in pred.frames.iter().zip(&truth.frames) {
        for cell in 0..mask.inside.len() {
            if !mask.inside[cell] {
                continue;
            }
            let (dp, dt) = (pf.values[cell] - mp, tf.values[cell] - mt);
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
    }
    let corr_defined = vp > 0.0 && vt > 0.0;
    let corr = if corr_defined {
        (cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0)
    } else {
        f64::NAN
    };
    let rmse = (se / nf).sqrt();
    Ok(MetricReport {
        scope: String::new(),
        rmse,
        nrmse: if mt > 0.0 { rmse / mt } else { f64::NAN },
        corr,
        corr_defined,
        mae: ae / nf,
        n,
    })
}

// ---------------------------------------------------------------------------
// cross-validation over days

/// Disjoint day-sets covering all days; folds are assigned by a seeded
/// shuffle so the plan is deterministic per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn new(days: &[usize], n_folds: usize, seed: u64) -> Result<FoldPlan> {
        if n_folds < 2 {
            return Err(Error::config("fold plan needs at least 2 folds"));
        }
        if days.len() < n_folds {
            return Err(Error::input(format!(
                "fold plan needs at least {n_folds} distinct days, got {}",
                days.len()
            )));
        }
        let uniq: BTreeSet<usize> = days.iter().copied().collect();
        if uniq.len() != days.len() {
            return Err(Error::input("fold plan: duplicate days"));
        }
        let mut shuffled: Vec<usize> = days.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x666f_6c64));
        let mut folds = vec![Vec::new(); n_folds];
        for (i, d) in shuffled.into_iter().enumerate() {
            folds[i % n_folds].push(d);
        }
        for f in &mut folds {
            f.sort_unstable();
        }
        Ok(FoldPlan { folds })
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// (train days, test days) for one fold.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.folds[fold].clone();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, test)
    }
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub per_fold: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// Day-based cross-validation. `run_fold(train_days, test_days)` trains on
/// the train days and returns predictions for exactly the truth frames of
/// the test days (same order); metrics are computed per fold and averaged
/// arithmetically.
pub fn run_cv<F>(
    truth: &PopCube,
    mask: &BoundaryMask,
    plan: &FoldPlan,
    mut run_fold: F,
) -> Result<CvReport>
where
    F: FnMut(&[usize], &[usize]) -> Result<PopCube>,
{
    let mut per_fold = Vec::new();
    for fold in 0..plan.n_folds() {
        let (train_days, test_days) = plan.split(fold);
        let test_truth = truth.select_days(&test_days);
        if test_truth.is_empty() {
            return Err(Error::input(format!(
                "cv fold {fold}: no truth frames for test days {test_days:?}"
            )));
        }
        let pred = run_fold(&train_days, &test_days)?;
        let mut rep = compute_metrics(&pred, &test_truth, mask)?;
        rep.scope = format!("fold{fold}");
        per_fold.push(rep);
    }
    Ok(CvReport {
        mean: mean_report("mean", &per_fold),
        per_fold,
    })
}

/// Arithmetic mean of the reports' metrics; NaN correlations propagate and
/// clear `corr_defined`.
pub fn mean_report(scope: &str, reports: &[MetricReport]) -> MetricReport {
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    MetricReport {
        scope: scope.to_string(),
        rmse: avg(|r| r.rmse),
        nrmse: avg(|r| r.nrmse),
        corr: avg(|r| r.corr),
        corr_defined: reports.iter().all(|r| r.corr_defined),
        mae: avg(|r| r.mae),
        n: reports.iter().map(|r| r.n).sum(),
    }
}

// ---------------------------------------------------------------------------
// period-segmented experiment

/// Runs one model per hour period. `periods` must partition `0..24` as
/// half-open `[start, end)` ranges. `run_period(start, end)` trains and
/// evaluates only on hours of that period and returns predictions for the
/// truth frames whose hour falls inside it.
pub fn run_segmented<F>(
    truth: &PopCube,
    mask: &BoundaryMask,
    periods: &[(usize, usize)],
    mut run_period: F,
) -> Result<Vec<MetricReport>>
where
    F: FnMut(usize, usize) -> Result<PopCube>,
{
    validate_periods(periods)?;
    let mut out = Vec::new();
    for &(start, end) in periods {
        let seg_truth = truth.select_hours(start, end);
        if seg_truth.is_empty() {
            return Err(Error::input(format!(
                "segmented run: no frames in period {start}:00-{end}:00"
            )));
        }
        let pred = run_period(start, end)?;
        let mut rep = compute_metrics(&pred, &seg_truth, mask)?;
        rep.scope = format!("{start:02}:00-{end:02}:00");
        out.push(rep);
    }
    Ok(out)
}

/// The default split: 0:00-7:00, 7:00-17:00, 17:00-24:00.
pub const DEFAULT_PERIODS: [(usize, usize); 3] = [(0, 7), (7, 17), (17, 24)];

pub fn validate_periods(periods: &[(usize, usize)]) -> Result<()> {
    let mut covered = [false; 24];
    for &(start, end) in periods {
        if start >= end || end > 24 {
            return Err(Error::config(format!("bad period {start}..{end}")));
        }
        for h in start..end {
            if covered[h] {
                return Err(Error::config(format!(
                    "periods overlap at hour {h}"
                )));
            }
            covered[h] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::config("periods do not cover all 24 hours"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PoI ablation

/// Stable signature for a PoI subset, e.g. `{}` or `{entertainment,residence}`.
pub fn subset_signature(subset: &[PoiCategory]) -> String {
    let mut idx: Vec<usize> = subset.iter().map(|c| c.index()).collect();
    idx.sort_unstable();
    idx.dedup();
    let names = ["entertainment", "business", "transportation", "residence"];
    format!(
        "{{{}}}",
        idx.iter().map(|&i| names[i]).collect::<Vec<_>>().join(",")
    )
}

/// Trains one model per PoI subset via `run_subset` and reports metrics per
/// subset. The empty subset and the full set are always evaluated, appended
/// if the caller left them out; duplicate subsets are rejected.
pub fn run_poi_ablation<F>(
    truth: &PopCube,
    mask: &BoundaryMask,
    subsets: &[Vec<PoiCategory>],
    mut run_subset: F,
) -> Result<Vec<MetricReport>>
where
    F: FnMut(&[PoiCategory]) -> Result<PopCube>,
{
    let mut all: Vec<Vec<PoiCategory>> = subsets.to_vec();
    for endpoint in [Vec::new(), PoiCategory::ALL.to_vec()] {
        if !all
            .iter()
            .any(|s| subset_signature(s) == subset_signature(&endpoint))
        {
            all.push(endpoint);
        }
    }
    let mut seen = BTreeSet::new();
    for s in &all {
        if !seen.insert(subset_signature(s)) {
            return Err(Error::config(format!(
                "duplicate PoI subset {}",
                subset_signature(s)
            )));
        }
    }
    let mut out = Vec::new();
    for subset in &all {
        let pred = run_subset(subset)?;
        let mut rep = compute_metrics(&pred, truth, mask)?;
        rep.scope = subset_signature(subset);
        out.push(rep);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// locality breakdown

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinReport {
    pub label: String,
    pub count: usize,
    pub rmse: f64,
}

/// Per-bin RMSE curves plus the labels of bins that were empty and omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalityReport {
    pub by_distance: Vec<BinReport>,
    pub by_poi_decile: Vec<BinReport>,
    pub by_function_class: Vec<BinReport>,
    pub omitted_bins: Vec<String>,
    pub global_rmse: f64,
}

const N_DISTANCE_BINS: usize = 8;

/// Bins in-boundary cells by Euclidean grid distance to the downtown
/// center, by local total PoI count decile, and by function class, and
/// reports per-bin RMSE pooled over frames. Per-bin squared errors
/// recombine exactly to the global MSE.
pub fn locality_breakdown(
    pred: &PopCube,
    truth: &PopCube,
    city: &CityModel,
    pois: &PoiGrid,
) -> Result<LocalityReport> {
    if pred.times != truth.times {
        return Err(Error::input("locality breakdown: cubes misaligned in time"));
    }
    let mask = &city.mask;
    let (h, w) = (mask.height, mask.width);
    if pred.height() != h || pred.width() != w {
        return Err(Error::shape("locality breakdown: shape mismatch"));
    }

    // per-cell squared error pooled over frames
    let mut cell_se = vec![0.0; h * w];
    let n_frames = pred.len();
    for (pf, tf) in pred.frames.iter().zip(&truth.frames) {
        for cell in 0..h * w {
            let d = pf.values[cell] - tf.values[cell];
            cell_se[cell] += d * d;
        }
    }
    let cells: Vec<usize> = (0..h * w).filter(|&c| mask.inside[c]).collect();
    let n_total = cells.len() * n_frames;
    let global_sse: f64 = cells.iter().map(|&c| cell_se[c]).sum();
    let global_rmse = (global_sse / n_total as f64).sqrt();
    let mut omitted = Vec::new();

    // distance to downtown, equal-width bins
    let (dr, dc) = city.downtown_center;
    let dist = |cell: usize| {
        let (r, c) = (cell / w, cell % w);
        ((r as f64 - dr as f64).powi(2) + (c as f64 - dc as f64).powi(2)).sqrt()
    };
    let max_dist = cells.iter().map(|&c| dist(c)).fold(0.0, f64::max);
    let bin_width = (max_dist / N_DISTANCE_BINS as f64).max(1e-9);
    let mut by_distance = Vec::new();
    for b in 0..N_DISTANCE_BINS {
        let (lo, hi) = (b as f64 * bin_width, (b + 1) as f64 * bin_width);
        let members: Vec<usize> = cells
            .iter()
            .copied()
            .filter(|&c| {
                let d = dist(c);
                d >= lo && (d < hi || (b == N_DISTANCE_BINS - 1 && d <= hi))
            })
            .collect();
        let label = format!("dist[{lo:.1},{hi:.1})");
        if members.is_empty() {
            omitted.push(label);
            continue;
        }
        by_distance.push(bin_report(label, &members, &cell_se, n_frames));
    }

    // total PoI count deciles (ties broken by cell index for determinism)
    let mut by_poi: Vec<usize> = cells.clone();
    let poi_count = |cell: usize| -> f64 { pois.counts.iter().map(|ch| ch[cell]).sum() };
    by_poi.sort_by(|&a, &b| {
        poi_count(a)
            .partial_cmp(&poi_count(b))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut by_poi_decile = Vec::new();
    for d in 0..10 {
        let lo = d * by_poi.len() / 10;
        let hi = (d + 1) * by_poi.len() / 10;
        let label = format!("poi-decile{d}");
        if lo == hi {
            omitted.push(label);
            continue;
        }
        by_poi_decile.push(bin_report(label, &by_poi[lo..hi], &cell_se, n_frames));
    }

    // function class
    let mut by_function_class = Vec::new();
    for fc in FunctionClass::ALL {
        let members: Vec<usize> = cells
            .iter()
            .copied()
            .filter(|&c| city.function_class_of_cell(c) == Some(fc))
            .collect();
        if members.is_empty() {
            omitted.push(fc.name().to_string());
            continue;
        }
        by_function_class.push(bin_report(fc.name().to_string(), &members, &cell_se, n_frames));
    }

    Ok(LocalityReport {
        by_distance,
        by_poi_decile,
        by_function_class,
        omitted_bins: omitted,
        global_rmse,
    })
}

fn bin_report(label: String, members: &[usize], cell_se: &[f64], n_frames: usize) -> BinReport {
    let sse: f64 = members.iter().map(|&c| cell_se[c]).sum();
    let n = members.len() * n_frames;
    BinReport {
        label,
        count: n,
        rmse: (sse / n as f64).sqrt(),
    }
}

impl LocalityReport {
    /// Recombines one family of bins back to a global RMSE
    /// (squared-error additivity).
    pub fn recombined_rmse(bins: &[BinReport]) -> f64 {
        let sse: f64 = bins.iter().map(|b| b.rmse * b.rmse * b.count as f64).sum();
        let n: usize = bins.iter().map(|b| b.count).sum();
        (sse / n as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// report files

/// One row of the results CSV:
/// `method,level_pair,fold,RMSE,NRMSE,Corr,MAE,wall_time_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub level_pair: String,
    pub fold: String,
    pub metrics: MetricReport,
    pub wall_time_s: f64,
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,level_pair,fold,RMSE,NRMSE,Corr,MAE,wall_time_s")?;
    for r in rows {
        let corr = if r.metrics.corr_defined {
            format!("{:.6}", r.metrics.corr)
        } else {
            "NaN".to_string()
        };
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{},{:.6},{:.3}",
            r.method,
            r.level_pair,
            r.fold,
            r.metrics.rmse,
            r.metrics.nrmse,
            corr,
            r.metrics.mae,
            r.wall_time_s
        )?;
    }
    Ok(())
}

/// Human-readable fixed-width table of the same rows.
pub fn write_report_table(path: &Path, title: &str, rows: &[ReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{title}")?;
    writeln!(
        f,
        "{:<24} {:<20} {:<8} {:>10} {:>8} {:>8} {:>10} {:>8}",
        "method", "level_pair", "fold", "RMSE", "NRMSE", "Corr", "MAE", "time_s"
    )?;
    for r in rows {
        let corr = if r.metrics.corr_defined {
            format!("{:.4}", r.metrics.corr)
        } else {
            "NaN".to_string()
        };
        writeln!(
            f,
            "{:<24} {:<20} {:<8} {:>10.4} {:>8.4} {:>8} {:>10.4} {:>8.2}",
            r.method,
            r.level_pair,
            r.fold,
            r.metrics.rmse,
            r.metrics.nrmse,
            corr,
            r.metrics.mae,
            r.wall_time_s
        )?;
    }
    Ok(())
}
