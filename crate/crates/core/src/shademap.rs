//! Shade-model training, evaluation and map production.
//!
//! Farms are split into train and test blocks (one third of ground-truth
//! pixels by farm, preventing spatial leakage), hyperparameters come from
//! farm-blocked five-fold cross-validation, and the final map averages
//! per-scene predictions over the valid scenes of each pixel before
//! clamping into [0, 100] percent.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::boosting::{gbr_fit, gbr_predict_row, GbrConfig, GbrModel};
use crate::features::{channel_stack, fill_feature_row, N_FEATURES};
use crate::ingest::{validity_mask, SceneData};
use crate::raster::{grid_stats_binned, GridStats, RasterGrid};
use crate::{Error, Result};

/// Train/test farm assignment with cross-validation folds over train farms.
#[derive(Debug, Clone, Serialize)]
pub struct SplitAssignment {
    pub test_farms: BTreeSet<String>,
    pub train_farms: Vec<String>,
    /// Fold id per train farm.
    pub fold_of: BTreeMap<String, usize>,
    pub n_folds: usize,
}

impl SplitAssignment {
    pub fn is_test(&self, farm: &str) -> bool {
        self.test_farms.contains(farm)
    }
}

/// Assign farms to test until the test pixel count first reaches one third
/// of all ground-truth pixels; the remainder trains, in 5 CV folds.
pub fn make_split(farm_pixel_counts: &[(String, u64)], seed: u64, n_folds: usize) -> SplitAssignment {
    let mut order: Vec<usize> = (0..farm_pixel_counts.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let total: u64 = farm_pixel_counts.iter().map(|(_, n)| n).sum();
    let target = (total + 2) / 3; // ceil(total / 3)

    let mut test_farms = BTreeSet::new();
    let mut train_farms = Vec::new();
    let mut cum = 0u64;
    for &i in &order {
        let (ref id, n) = farm_pixel_counts[i];
        if cum < target {
            cum += n;
            test_farms.insert(id.clone());
        } else {
            train_farms.push(id.clone());
        }
    }
    let mut fold_of = BTreeMap::new();
    for (pos, id) in train_farms.iter().enumerate() {
        fold_of.insert(id.clone(), pos % n_folds);
    }
    SplitAssignment {
        test_farms,
        train_farms,
        fold_of,
        n_folds,
    }
}

/// Accuracy report in percentage points, with residual quantiles per 5 pp
/// bin of the reference cover.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub bias: f64,
    pub n: usize,
    pub binned_residuals: Vec<ResidualBin>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub p10: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p90: f64,
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Errors are `pred - truth`, both in percent.
pub fn evaluate(pred_pct: &[f64], truth_pct: &[f64]) -> Result<EvalReport> {
    if pred_pct.is_empty() || pred_pct.len() != truth_pct.len() {
        return Err(Error::EmptyData(format!(
            "evaluate needs matched nonempty pairs, got {} and {}",
            pred_pct.len(),
            truth_pct.len()
        )));
    }
    let n = pred_pct.len();
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut sum = 0.0;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); 20];
    for i in 0..n {
        let e = pred_pct[i] - truth_pct[i];
        abs_sum += e.abs();
        sq_sum += e * e;
        sum += e;
        let b = ((truth_pct[i] / 5.0).floor() as i64).clamp(0, 19) as usize;
        bins[b].push(e);
    }
    let binned_residuals = bins
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(b, mut v)| {
            v.sort_by(|a, x| a.partial_cmp(x).unwrap());
            ResidualBin {
                lo: b as f64 * 5.0,
                hi: (b + 1) as f64 * 5.0,
                n: v.len(),
                p10: nearest_rank(&v, 0.10),
                q1: nearest_rank(&v, 0.25),
                median: nearest_rank(&v, 0.50),
                q3: nearest_rank(&v, 0.75),
                p90: nearest_rank(&v, 0.90),
            }
        })
        .collect();
    Ok(EvalReport {
        mae: abs_sum / n as f64,
        rmse: (sq_sum / n as f64).sqrt(),
        bias: sum / n as f64,
        n,
        binned_residuals,
    })
}

/// Cross-validation summary for the shade model.
#[derive(Debug, Clone, Serialize)]
pub struct ShadeCvSummary {
    pub best_index: usize,
    pub mean_scores_pct: Vec<f64>,
}

/// Select hyperparameters by farm-blocked CV, refit on every train pixel,
/// and report accuracy on the held-out test pixels.
pub fn train_shade_model(
    x: &[f32],
    n_cols: usize,
    y_fraction: &[f64],
    farm_of_row: &[String],
    split: &SplitAssignment,
    grid: &[GbrConfig],
) -> Result<(GbrModel, EvalReport, ShadeCvSummary)> {
    if grid.is_empty() {
        return Err(Error::Argument("empty config grid".into()));
    }
    let n = y_fraction.len();
    if x.len() != n * n_cols || farm_of_row.len() != n {
        return Err(Error::Shape(format!(
            "row mismatch: {} values, {} targets, {} farm tags",
            x.len(),
            n,
            farm_of_row.len()
        )));
    }
    let train_rows: Vec<usize> = (0..n)
        .filter(|&r| split.fold_of.contains_key(&farm_of_row[r]))
        .collect();
    let test_rows: Vec<usize> = (0..n)
        .filter(|&r| split.is_test(&farm_of_row[r]))
        .collect();
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::EmptyData(format!(
            "split left {} train and {} test rows",
            train_rows.len(),
            test_rows.len()
        )));
    }

    let gather = |rows: &[usize]| -> (Vec<f32>, Vec<f64>) {
        let mut xs = Vec::with_capacity(rows.len() * n_cols);
        let mut ys = Vec::with_capacity(rows.len());
        for &r in rows {
            xs.extend_from_slice(&x[r * n_cols..(r + 1) * n_cols]);
            ys.push(y_fraction[r]);
        }
        (xs, ys)
    };

    // Farm-blocked CV: fold membership follows the farm, not the row.
    let mut mean_scores = vec![0.0f64; grid.len()];
    if grid.len() > 1 {
        for fold in 0..split.n_folds {
            let fit_rows: Vec<usize> = train_rows
                .iter()
                .copied()
                .filter(|&r| split.fold_of[&farm_of_row[r]] != fold)
                .collect();
            let val_rows: Vec<usize> = train_rows
                .iter()
                .copied()
                .filter(|&r| split.fold_of[&farm_of_row[r]] == fold)
                .collect();
            if fit_rows.is_empty() || val_rows.is_empty() {
                continue;
            }
            let (xf, yf) = gather(&fit_rows);
            for (ci, config) in grid.iter().enumerate() {
                let model = gbr_fit(&xf, n_cols, &yf, None, config)?;
                let err: f64 = val_rows
                    .par_iter()
                    .map(|&r| {
                        (gbr_predict_row(&model, &x[r * n_cols..(r + 1) * n_cols])
                            - y_fraction[r])
                            .abs()
                    })
                    .sum();
                mean_scores[ci] += 100.0 * err / val_rows.len() as f64 / split.n_folds as f64;
            }
        }
    }
    let best_index = (0..grid.len())
        .min_by(|&a, &b| {
            mean_scores[a]
                .partial_cmp(&mean_scores[b])
                .unwrap()
                .then(a.cmp(&b))
        })
        .unwrap();

    let (xt, yt) = gather(&train_rows);
    let model = gbr_fit(&xt, n_cols, &yt, None, &grid[best_index])?;

    let preds: Vec<f64> = test_rows
        .par_iter()
        .map(|&r| 100.0 * gbr_predict_row(&model, &x[r * n_cols..(r + 1) * n_cols]))
        .collect();
    let truth: Vec<f64> = test_rows.iter().map(|&r| 100.0 * y_fraction[r]).collect();
    let report = evaluate(&preds, &truth)?;
    Ok((
        model,
        report,
        ShadeCvSummary {
            best_index,
            mean_scores_pct: mean_scores,
        },
    ))
}

/// Final shade map with per-pixel provenance counts.
#[derive(Debug, Clone)]
pub struct ShadeMap {
    /// One band, percent cover in [0, 100], nodata outside cocoa or where
    /// no valid scene contributed.
    pub grid: RasterGrid,
    /// Number of valid scenes averaged per pixel.
    pub n_valid_scenes: RasterGrid,
    /// Scene ids that entered the average, in processing order.
    pub provenance: Vec<String>,
}

/// Predict the cocoa-masked shade map of one tile by averaging per-scene
/// predictions over the scenes where each pixel is valid.
pub fn predict_map(
    model: &GbrModel,
    scenes: &[(String, SceneData)],
    cocoa_mask: &RasterGrid,
) -> Result<ShadeMap> {
    if scenes.is_empty() {
        log::warn!("no scenes supplied; tile map is all nodata");
    }
    let (w, h) = (cocoa_mask.width, cocoa_mask.height);
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    let mut provenance = Vec::new();

    let cocoa_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .filter(|&(c, r)| {
            let v = cocoa_mask.get(0, c, r);
            !cocoa_mask.is_nodata(v) && v != 0.0
        })
        .collect();

    for (scene_id, scene) in scenes {
        if scene.bands.width != w || scene.bands.height != h {
            return Err(Error::Alignment(format!(
                "scene {scene_id} is {}x{}, cocoa mask is {w}x{h}",
                scene.bands.width, scene.bands.height
            )));
        }
        let stack = channel_stack(&scene.bands)?;
        let valid = validity_mask(scene)?;
        let preds: Vec<(usize, f64)> = cocoa_pixels
            .par_iter()
            .filter(|&&(c, r)| valid.get(0, c, r) != 0.0)
            .map(|&(c, r)| {
                let mut row = [0.0f32; N_FEATURES];
                fill_feature_row(&stack, c, r, &mut row);
                (r * w + c, gbr_predict_row(model, &row))
            })
            .collect();
        for (idx, p) in preds {
            sum[idx] += p;
            count[idx] += 1;
        }
        provenance.push(scene_id.clone());
    }

    let mut grid = RasterGrid::filled(w, h, 1, cocoa_mask.transform, 0.0);
    grid.nodata = crate::raster::DEFAULT_NODATA;
    grid.crs_label = cocoa_mask.crs_label.clone();
    let mut n_valid = grid.clone();
    {
        let g = grid.band_mut(0);
        let nv = n_valid.band_mut(0);
        for i in 0..w * h {
            if count[i] == 0 {
                g[i] = crate::raster::DEFAULT_NODATA;
                nv[i] = 0.0;
            } else {
                let pct = 100.0 * sum[i] / count[i] as f64;
                g[i] = (pct.clamp(0.0, 100.0)) as f32;
                nv[i] = count[i] as f32;
            }
        }
    }
    Ok(ShadeMap {
        grid,
        n_valid_scenes: n_valid,
        provenance,
    })
}

/// Per-zone statistics (1 pp histogram bins); zones without valid pixels are
/// omitted.
pub fn zonal_stats(map: &RasterGrid, zones: &RasterGrid) -> Result<Vec<(i32, GridStats)>> {
    if zones.width != map.width || zones.height != map.height {
        return Err(Error::Alignment(format!(
            "zone map {}x{} vs shade map {}x{}",
            zones.width, zones.height, map.width, map.height
        )));
    }
    let mut ids: Vec<i32> = zones
        .band(0)
        .iter()
        .filter(|&&z| !zones.is_nodata(z))
        .map(|&z| z as i32)
        .collect();
    ids.sort_unstable();
    ids.dedup();

    let mut out = Vec::new();
    for id in ids {
        let mut mask = RasterGrid::filled(map.width, map.height, 1, map.transform, 0.0);
        {
            let mb = mask.band_mut(0);
            for (i, &z) in zones.band(0).iter().enumerate() {
                if !zones.is_nodata(z) && z as i32 == id {
                    mb[i] = 1.0;
                }
            }
        }
        let stats = grid_stats_binned(map, 0, Some(&mask), 0.0, 100.0, 100)?;
        if stats.n_valid > 0 {
            out.push((id, stats));
        }
    }
    Ok(out)
}

/// Area and fraction of valid pixels at or above each cover threshold.
#[derive(Debug, Clone, Serialize)]
pub struct ExceedanceRow {
    pub threshold_pct: f64,
    pub n_pixels: u64,
    pub area_ha: f64,
    pub fraction: f64,
}

pub fn cover_exceedance(map: &RasterGrid, thresholds: &[f64]) -> Vec<ExceedanceRow> {
    let cell_ha = map.cell_area_ha();
    let valid: Vec<f32> = map
        .band(0)
        .iter()
        .copied()
        .filter(|&v| !map.is_nodata(v))
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let n = valid.iter().filter(|&&v| v as f64 >= t).count() as u64;
            ExceedanceRow {
                threshold_pct: t,
                n_pixels: n,
                area_ha: n as f64 * cell_ha,
                fraction: if valid.is_empty() {
                    0.0
                } else {
                    n as f64 / valid.len() as f64
                },
            }
        })
        .collect()
}
