//! Climate-type discovery and zone classification.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::ward::{cut_tree, ward_linkage};
use crate::boosting::{rf_fit, rf_proximity, rf_votes, ForestModel, ForestTask, RfConfig};
use crate::raster::RasterGrid;
use crate::{Error, Result};

/// Z-score columns; returns (standardized values, means, sds).
pub fn standardize(x: &[f64], n_cols: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if n_cols == 0 || x.len() % n_cols != 0 {
        return Err(Error::Shape(format!(
            "{} values not divisible into {n_cols} columns",
            x.len()
        )));
    }
    let n_rows = x.len() / n_cols;
    let mut means = vec![0.0f64; n_cols];
    let mut sds = vec![0.0f64; n_cols];
    for c in 0..n_cols {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for r in 0..n_rows {
            let v = x[r * n_cols + c];
            s += v;
            s2 += v * v;
        }
        let m = s / n_rows as f64;
        means[c] = m;
        sds[c] = (s2 / n_rows as f64 - m * m).max(0.0).sqrt().max(1e-12);
    }
    let mut out = vec![0.0f64; x.len()];
    for r in 0..n_rows {
        for c in 0..n_cols {
            out[r * n_cols + c] = (x[r * n_cols + c] - means[c]) / sds[c];
        }
    }
    Ok((out, means, sds))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_trees: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            seed: 0,
        }
    }
}

/// Unsupervised climate typing: a forest separates real occurrence rows
/// from column-permuted synthetic rows, the resulting proximity among real
/// rows becomes a dissimilarity, and Ward agglomeration cut at `k` yields
/// cluster labels `1..=k` (by first occurrence).
pub fn cluster_types(
    rows_std: &[f64],
    n_cols: usize,
    k: usize,
    config: &ClusterConfig,
) -> Result<Vec<usize>> {
    let n = rows_std.len() / n_cols;
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k={k} with {n} rows")));
    }

    // Shi-Horvath style contrast: permute each column independently.
    let mut synth = vec![0.0f64; rows_std.len()];
    for c in 0..n_cols {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(c as u64));
        perm.shuffle(&mut rng);
        for r in 0..n {
            synth[r * n_cols + c] = rows_std[perm[r] * n_cols + c];
        }
    }
    let mut x = Vec::with_capacity(2 * rows_std.len());
    let mut y = Vec::with_capacity(2 * n);
    for r in 0..n {
        x.extend_from_slice(&rows_std[r * n_cols..(r + 1) * n_cols]);
        y.push(0.0);
    }
    for r in 0..n {
        x.extend_from_slice(&synth[r * n_cols..(r + 1) * n_cols]);
        y.push(1.0);
    }
    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let model = rf_fit(
        &xf,
        n_cols,
        &y,
        ForestTask::Classification,
        &RfConfig {
            n_trees: config.n_trees,
            seed: config.seed,
            ..Default::default()
        },
    )?;

    // Proximity over the real rows only.
    let real: Vec<f32> = rows_std.iter().map(|&v| v as f32).collect();
    let prox = rf_proximity(&model, &real, n_cols)?;
    let dissim: Vec<f64> = prox.iter().map(|p| 1.0 - p).collect();

    let merges = ward_linkage(&dissim, n)?;
    let labels0 = cut_tree(&merges, n, k)?;
    Ok(labels0.into_iter().map(|l| l + 1).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneConfig {
    pub repeats: usize,
    pub forests_per_repeat: usize,
    pub trees_per_forest: usize,
    pub train_fraction: f64,
    /// Top-two vote-share margin below which a cell is "mixed".
    pub mixed_margin: f64,
    pub seed: u64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            forests_per_repeat: 5,
            trees_per_forest: 100,
            train_fraction: 0.8,
            mixed_margin: 0.1,
            seed: 0,
        }
    }
}

/// Classified zone map with its legend and per-repeat held-out accuracy.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    /// Integer labels: 0 unsuitable, 1..=k climate types, k+1 mixed,
    /// k+2 limitations; nodata where the bioclim stack is invalid.
    pub grid: RasterGrid,
    pub legend: BTreeMap<i32, String>,
    pub heldout_accuracy: Vec<f64>,
    pub k: usize,
}

/// Train the repeated forest classifier on labeled occurrences plus an
/// equal-size background sample (label 0, "unsuitable") and classify every
/// valid cell of the bioclim raster stack.
///
/// Votes pool across every tree of every repeat. A cell is "mixed" when the
/// top-two vote shares differ by less than the margin, and "limitations"
/// when the modal class is unsuitable but the cell contains occurrences.
pub fn classify_zones(
    occ_rows: &[f64],
    occ_labels: &[usize],
    background_rows: &[f64],
    n_cols: usize,
    bioclim_stack: &RasterGrid,
    occ_cells: &BTreeSet<(usize, usize)>,
    config: &ZoneConfig,
) -> Result<ZoneMap> {
    let n_occ = occ_labels.len();
    if occ_rows.len() != n_occ * n_cols {
        return Err(Error::Shape("occurrence rows/labels mismatch".into()));
    }
    let n_bg = background_rows.len() / n_cols;
    if n_occ == 0 || n_bg == 0 {
        return Err(Error::EmptyData(
            "need occurrences and background samples".into(),
        ));
    }
    if bioclim_stack.bands != n_cols {
        return Err(Error::Alignment(format!(
            "bioclim stack has {} bands, training rows have {n_cols}",
            bioclim_stack.bands
        )));
    }
    let k = *occ_labels.iter().max().unwrap();

    // Combined design: occurrences carry their type, background is class 0.
    let mut x = Vec::with_capacity((n_occ + n_bg) * n_cols);
    let mut y = Vec::with_capacity(n_occ + n_bg);
    for r in 0..n_occ {
        x.extend_from_slice(&occ_rows[r * n_cols..(r + 1) * n_cols]);
        y.push(occ_labels[r] as f64);
    }
    for r in 0..n_bg {
        x.extend_from_slice(&background_rows[r * n_cols..(r + 1) * n_cols]);
        y.push(0.0);
    }
    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let n_all = n_occ + n_bg;

    let mut forests: Vec<ForestModel> = Vec::new();
    let mut heldout_accuracy = Vec::with_capacity(config.repeats);
    for rep in 0..config.repeats {
        let mut order: Vec<usize> = (0..n_all).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1000 + rep as u64));
        order.shuffle(&mut rng);
        let n_train = ((n_all as f64) * config.train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n_all - 1);
        let (train_idx, test_idx) = order.split_at(n_train);
        let mut xt = Vec::with_capacity(train_idx.len() * n_cols);
        let mut yt = Vec::with_capacity(train_idx.len());
        for &r in train_idx {
            xt.extend_from_slice(&xf[r * n_cols..(r + 1) * n_cols]);
            yt.push(y[r]);
        }
        let classes_in_train: BTreeSet<i64> = yt.iter().map(|v| *v as i64).collect();
        if classes_in_train.len() < 2 {
            return Err(Error::EmptyData(format!(
                "repeat {rep}: training split lost all but one class"
            )));
        }

        let mut rep_forests = Vec::with_capacity(config.forests_per_repeat);
        for f in 0..config.forests_per_repeat {
            let seed = config
                .seed
                .wrapping_add(((rep * config.forests_per_repeat + f) as u64) << 16);
            rep_forests.push(rf_fit(
                &xt,
                n_cols,
                &yt,
                ForestTask::Classification,
                &RfConfig {
                    n_trees: config.trees_per_forest,
                    seed,
                    ..Default::default()
                },
            )?);
        }

        // Held-out accuracy of this repeat (pooled votes of its forests).
        let mut correct = 0usize;
        for &r in test_idx {
            let row = &xf[r * n_cols..(r + 1) * n_cols];
            let pred = pooled_modal(&rep_forests, row, k);
            if pred == y[r] as usize {
                correct += 1;
            }
        }
        heldout_accuracy.push(correct as f64 / test_idx.len() as f64);
        forests.extend(rep_forests);
    }

    // Classify every valid raster cell from the pooled votes.
    let (w, h) = (bioclim_stack.width, bioclim_stack.height);
    let mut grid = RasterGrid::filled(w, h, 1, bioclim_stack.transform, 0.0);
    grid.nodata = crate::raster::DEFAULT_NODATA;
    grid.crs_label = bioclim_stack.crs_label.clone();
    let plane = w * h;
    use rayon::prelude::*;
    let labels: Vec<f32> = (0..plane)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0f32; n_cols];
            for b in 0..n_cols {
                let v = bioclim_stack.data[b * plane + i];
                if bioclim_stack.is_nodata(v) {
                    return grid.nodata;
                }
                row[b] = v;
            }
            let mut votes = vec![0u64; k + 1];
            for forest in &forests {
                for (ci, v) in rf_votes(forest, &row).into_iter().enumerate() {
                    votes[forest.classes[ci] as usize] += v as u64;
                }
            }
            let total: u64 = votes.iter().sum();
            let mut top = 0usize;
            for c in 1..=k {
                if votes[c] > votes[top] {
                    top = c;
                }
            }
            let mut second = usize::MAX;
            for c in 0..=k {
                if c != top && (second == usize::MAX || votes[c] > votes[second]) {
                    second = c;
                }
            }
            let margin =
                (votes[top] as f64 - votes[second] as f64) / total.max(1) as f64;
            let (col, row_i) = (i % w, i / w);
            if margin < config.mixed_margin {
                (k + 1) as f32 // mixed
            } else if top == 0 && occ_cells.contains(&(col, row_i)) {
                (k + 2) as f32 // limitations
            } else {
                top as f32
            }
        })
        .collect();
    grid.band_mut(0).copy_from_slice(&labels);

    let mut legend = BTreeMap::new();
    legend.insert(0, "unsuitable".to_string());
    for c in 1..=k {
        legend.insert(c as i32, format!("type_{c}"));
    }
    legend.insert((k + 1) as i32, "mixed".to_string());
    legend.insert((k + 2) as i32, "limitations".to_string());

    Ok(ZoneMap {
        grid,
        legend,
        heldout_accuracy,
        k,
    })
}

fn pooled_modal(forests: &[ForestModel], row: &[f32], k: usize) -> usize {
    let mut votes = vec![0u64; k + 1];
    for forest in forests {
        for (ci, v) in rf_votes(forest, row).into_iter().enumerate() {
            votes[forest.classes[ci] as usize] += v as u64;
        }
    }
    let mut top = 0usize;
    for c in 1..=k {
        if votes[c] > votes[top] {
            top = c;
        }
    }
    top
}
