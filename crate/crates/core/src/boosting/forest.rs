//! Bagged random forests with proximity matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::tree::{fit_class_tree, fit_tree_recursive, Dataset, Tree, TreeParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestTask {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy)]
pub struct RfConfig {
    pub n_trees: usize,
    /// `None` grows full-depth trees.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features per node; `None` uses sqrt(p).
    pub feature_subsample: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            feature_subsample: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Trained forest.
#[derive(Debug, Clone)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub task: ForestTask,
    /// Sorted label vocabulary (classification); leaf values are indices
    /// into it.
    pub classes: Vec<i64>,
    /// Out-of-bag row indices per tree.
    pub oob_indices: Vec<Vec<u32>>,
    pub n_features: usize,
}

/// Fit a random forest. For classification, `y` holds integer labels; for
/// regression it holds targets.
pub fn rf_fit(x: &[f32], n_cols: usize, y: &[f64], task: ForestTask, config: &RfConfig) -> Result<ForestModel> {
    let data = Dataset::new(x, n_cols)?;
    let n = data.n_rows;
    if n == 0 || y.len() != n {
        return Err(Error::Argument(format!("{} rows vs {} targets", n, y.len())));
    }
    let classes: Vec<i64> = match task {
        ForestTask::Classification => {
            let mut c: Vec<i64> = y.iter().map(|v| *v as i64).collect();
            c.sort_unstable();
            c.dedup();
            if c.len() == 1 {
                log::warn!("single-class training set; forest degenerates to that class");
            }
            c
        }
        ForestTask::Regression => Vec::new(),
    };
    let labels: Vec<u32> = match task {
        ForestTask::Classification => y
            .iter()
            .map(|v| classes.binary_search(&(*v as i64)).unwrap() as u32)
            .collect(),
        ForestTask::Regression => Vec::new(),
    };

    let k_features = config
        .feature_subsample
        .unwrap_or_else(|| (n_cols as f64).sqrt().round().max(1.0) as usize);
    let max_depth = config.max_depth.unwrap_or(usize::MAX);
    let params = TreeParams {
        max_depth,
        min_samples_leaf: config.min_samples_leaf as f64,
        feature_subsample: Some(k_features),
    };

    // Per-tree seeds derive from the base seed plus the tree index.
    let fits: Vec<(Tree, Vec<u32>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(t as u64));
            let mut weights = vec![0.0f64; n];
            let mut oob = Vec::new();
            if config.bootstrap {
                for _ in 0..n {
                    weights[rng.gen_range(0..n)] += 1.0;
                }
                for (i, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        oob.push(i as u32);
                    }
                }
            } else {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let tree = match task {
                ForestTask::Regression => {
                    fit_tree_recursive(data, y, &weights, params, k_features, &mut rng)
                }
                ForestTask::Classification => fit_class_tree(
                    data,
                    &labels,
                    classes.len(),
                    &weights,
                    &params,
                    k_features,
                    &mut rng,
                ),
            };
            (tree, oob)
        })
        .collect();

    let mut trees = Vec::with_capacity(config.n_trees);
    let mut oob_indices = Vec::with_capacity(config.n_trees);
    for (tree, oob) in fits {
        trees.push(tree);
        oob_indices.push(oob);
    }
    Ok(ForestModel {
        trees,
        task,
        classes,
        oob_indices,
        n_features: n_cols,
    })
}

/// Predict one row: mean over trees for regression, modal vote (lowest
/// label on ties) for classification.
pub fn rf_predict_row(model: &ForestModel, row: &[f32]) -> f64 {
    match model.task {
        ForestTask::Regression => {
            let mut acc = 0.0f64;
            for tree in &model.trees {
                acc += tree.predict_row(row) as f64;
            }
            acc / model.trees.len() as f64
        }
        ForestTask::Classification => {
            let mut votes = vec![0u32; model.classes.len()];
            for tree in &model.trees {
                votes[tree.predict_row(row) as usize] += 1;
            }
            let mut best = 0usize;
            for c in 1..votes.len() {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            model.classes[best] as f64
        }
    }
}

pub fn rf_predict(model: &ForestModel, x: &[f32], n_cols: usize) -> Result<Vec<f64>> {
    if n_cols != model.n_features {
        return Err(Error::Shape(format!(
            "model expects {} features, got {n_cols}",
            model.n_features
        )));
    }
    let data = Dataset::new(x, n_cols)?;
    Ok((0..data.n_rows)
        .into_par_iter()
        .map(|r| rf_predict_row(model, data.row(r)))
        .collect())
}

/// Per-class vote counts across all trees, in `classes` order.
pub fn rf_votes(model: &ForestModel, row: &[f32]) -> Vec<u32> {
    let mut votes = vec![0u32; model.classes.len()];
    for tree in &model.trees {
        votes[tree.predict_row(row) as usize] += 1;
    }
    votes
}

/// Dense symmetric proximity matrix: fraction of trees placing two rows in
/// the same leaf. The diagonal is exactly one.
pub fn rf_proximity(model: &ForestModel, x: &[f32], n_cols: usize) -> Result<Vec<f64>> {
    if n_cols != model.n_features {
        return Err(Error::Shape(format!(
            "model expects {} features, got {n_cols}",
            model.n_features
        )));
    }
    let data = Dataset::new(x, n_cols)?;
    let n = data.n_rows;
    let mut counts = vec![0u32; n * n];
    for tree in &model.trees {
        let leaves: Vec<u32> = (0..n)
            .into_par_iter()
            .map(|r| tree.leaf_index(data.row(r)) as u32)
            .collect();
        // Group rows by leaf, then bump all pairs within a group.
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by_key(|&r| (leaves[r as usize], r));
        let mut start = 0;
        while start < n {
            let leaf = leaves[order[start] as usize];
            let mut end = start;
            while end < n && leaves[order[end] as usize] == leaf {
                end += 1;
            }
            for i in start..end {
                for j in start..end {
                    counts[order[i] as usize * n + order[j] as usize] += 1;
                }
            }
            start = end;
        }
    }
    let t = model.trees.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / t).collect())
}
