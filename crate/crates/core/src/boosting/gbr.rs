//! Gradient-boosted regression.
//!
//! The model is `init + learning_rate * sum(tree outputs)`. The initial
//! value is the weighted median of the targets (consistent with the Huber
//! objective), and each stage fits a tree to the loss's negative gradient:
//! the residual itself where `|residual| <= delta`, else `delta * sign`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree_levelwise, Dataset, SortedColumns, Tree, TreeParams};
use crate::features::FEATURE_ORDER_TAG;
use crate::{Error, Result};

/// Regression objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    /// Quadratic within `delta` of zero, linear beyond: robust to gross
    /// ground-truth errors.
    Huber { delta: f64 },
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for GbrConfig {
    fn default() -> Self {
        Self {
            n_estimators: 2000,
            learning_rate: 0.05,
            max_depth: 6,
            min_samples_leaf: 20,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        }
    }
}

impl GbrConfig {
    /// Lexicographic order used for cross-validation tie-breaks.
    fn cmp_key(&self) -> (usize, u64, usize, usize, u8, u64) {
        let loss_tag = match self.loss {
            Loss::Huber { .. } => 0u8,
            Loss::Squared => 1u8,
        };
        (
            self.n_estimators,
            self.learning_rate.to_bits(),
            self.max_depth,
            self.min_samples_leaf,
            loss_tag,
            match self.loss {
                Loss::Huber { delta } => delta.to_bits(),
                Loss::Squared => 0,
            },
        )
    }
}

/// Trained boosted ensemble.
#[derive(Debug, Clone)]
pub struct GbrModel {
    pub init_value: f64,
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub loss: Loss,
    pub feature_order_tag: String,
    pub n_features: usize,
}

impl GbrModel {
    pub fn n_estimators(&self) -> usize {
        self.trees.len()
    }
}

/// Weighted median: smallest value whose cumulative weight reaches half the
/// total.
fn weighted_median(y: &[f64], w: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap().then(a.cmp(&b)));
    let total: f64 = w.iter().sum();
    let mut cum = 0.0;
    for &i in &idx {
        cum += w[i];
        if cum >= total / 2.0 {
            return y[i];
        }
    }
    y[idx[y.len() - 1]]
}

/// Total loss for reporting and the monotone-descent check.
pub fn huber_loss(pred: &[f64], y: &[f64], w: &[f64], loss: Loss) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let r = y[i] - pred[i];
        acc += w[i]
            * match loss {
                Loss::Squared => 0.5 * r * r,
                Loss::Huber { delta } => {
                    if r.abs() <= delta {
                        0.5 * r * r
                    } else {
                        delta * (r.abs() - 0.5 * delta)
                    }
                }
            };
    }
    acc
}

/// Fit a boosted regression model.
pub fn gbr_fit(
    x: &[f32],
    n_cols: usize,
    y: &[f64],
    weights: Option<&[f64]>,
    config: &GbrConfig,
) -> Result<GbrModel> {
    let data = Dataset::new(x, n_cols)?;
    if data.n_rows == 0 || y.len() != data.n_rows {
        return Err(Error::Argument(format!(
            "{} rows vs {} targets",
            data.n_rows,
            y.len()
        )));
    }
    let unit;
    let w = match weights {
        Some(w) => {
            if w.len() != data.n_rows {
                return Err(Error::Argument("weights length mismatch".into()));
            }
            w
        }
        None => {
            unit = vec![1.0f64; data.n_rows];
            &unit
        }
    };

    let init_value = weighted_median(y, w);
    let mut current: Vec<f64> = vec![init_value; data.n_rows];
    let mut gradient = vec![0.0f64; data.n_rows];
    let mut trees = Vec::with_capacity(config.n_estimators);
    let params = TreeParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf as f64,
        feature_subsample: None,
    };
    let sorted = SortedColumns::build(data);

    for _ in 0..config.n_estimators {
        for i in 0..data.n_rows {
            let r = y[i] - current[i];
            gradient[i] = match config.loss {
                Loss::Squared => r,
                Loss::Huber { delta } => {
                    if r.abs() <= delta {
                        r
                    } else {
                        delta * r.signum()
                    }
                }
            };
        }
        let tree = fit_tree_levelwise(data, &sorted, &gradient, w, params);
        for i in 0..data.n_rows {
            current[i] += config.learning_rate * tree.predict_row(data.row(i)) as f64;
        }
        trees.push(tree);
    }

    Ok(GbrModel {
        init_value,
        trees,
        learning_rate: config.learning_rate,
        loss: config.loss,
        feature_order_tag: FEATURE_ORDER_TAG.to_string(),
        n_features: n_cols,
    })
}

/// Predict one row: init plus scaled tree outputs, accumulated in tree
/// order so that truncating the ensemble telescopes exactly.
pub fn gbr_predict_row(model: &GbrModel, row: &[f32]) -> f64 {
    let mut acc = model.init_value;
    for tree in &model.trees {
        acc += model.learning_rate * tree.predict_row(row) as f64;
    }
    acc
}

/// Predict a batch; output order follows row order.
pub fn gbr_predict(model: &GbrModel, x: &[f32], n_cols: usize) -> Result<Vec<f64>> {
    if n_cols != model.n_features {
        return Err(Error::Shape(format!(
            "model expects {} features, got {n_cols}",
            model.n_features
        )));
    }
    let data = Dataset::new(x, n_cols)?;
    use rayon::prelude::*;
    Ok((0..data.n_rows)
        .into_par_iter()
        .map(|r| gbr_predict_row(model, data.row(r)))
        .collect())
}

/// Cross-validation outcome.
#[derive(Debug, Clone)]
pub struct CvResult {
    pub best: GbrConfig,
    pub best_index: usize,
    /// Mean fold MAE per config, in grid order.
    pub mean_scores: Vec<f64>,
    /// Per-config, per-fold MAE.
    pub fold_scores: Vec<Vec<f64>>,
}

/// K-fold cross-validation over a config grid; score is mean fold MAE and
/// the best config is the argmin with lexicographic tie-break.
pub fn cross_validate(
    x: &[f32],
    n_cols: usize,
    y: &[f64],
    grid: &[GbrConfig],
    k: usize,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Argument("empty config grid".into()));
    }
    let data = Dataset::new(x, n_cols)?;
    let n = data.n_rows;
    if k < 2 || n < k {
        return Err(Error::Argument(format!("need 2 <= k <= rows, got k={k}, rows={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // Round-robin assignment: fold sizes differ by at most one.
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            f[row] = pos % k;
        }
        f
    };

    let mut fold_scores = vec![Vec::with_capacity(k); grid.len()];
    for fold in 0..k {
        let train_rows: Vec<usize> = (0..n).filter(|r| fold_of[*r] != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|r| fold_of[*r] == fold).collect();
        let mut xt = Vec::with_capacity(train_rows.len() * n_cols);
        let mut yt = Vec::with_capacity(train_rows.len());
        for &r in &train_rows {
            xt.extend_from_slice(data.row(r));
            yt.push(y[r]);
        }
        for (ci, config) in grid.iter().enumerate() {
            let model = gbr_fit(&xt, n_cols, &yt, None, config)?;
            let mut abs_err = 0.0;
            for &r in &test_rows {
                abs_err += (gbr_predict_row(&model, data.row(r)) - y[r]).abs();
            }
            fold_scores[ci].push(abs_err / test_rows.len() as f64);
        }
    }

    let mean_scores: Vec<f64> = fold_scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let mut best_index = 0;
    for i in 1..grid.len() {
        let better = mean_scores[i] < mean_scores[best_index]
            || (mean_scores[i] == mean_scores[best_index]
                && grid[i].cmp_key() < grid[best_index].cmp_key());
        if better {
            best_index = i;
        }
    }
    Ok(CvResult {
        best: grid[best_index],
        best_index,
        mean_scores,
        fold_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear_data(n: usize, seed: u64) -> (Vec<f32>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f32 = rng.gen_range(0.0..1.0);
            let b: f32 = rng.gen_range(0.0..1.0);
            let c: f32 = rng.gen_range(0.0..1.0);
            x.extend_from_slice(&[a, b, c]);
            y.push(0.6 * a as f64 + 0.3 * b as f64 + 0.1 * c as f64);
        }
        (x, y)
    }

    #[test]
    fn zero_trees_predicts_weighted_median() {
        let x = vec![0.0f32, 1.0, 2.0];
        let y = vec![3.0f64, 1.0, 2.0];
        let config = GbrConfig {
            n_estimators: 0,
            ..Default::default()
        };
        let model = gbr_fit(&x, 1, &y, None, &config).unwrap();
        // Smallest value whose cumulative weight reaches half of 3.0.
        assert_eq!(model.init_value, 2.0);
        let preds = gbr_predict(&model, &x, 1).unwrap();
        assert!(preds.iter().all(|&p| p == 2.0));

        // Doubling one weight shifts the median accordingly.
        let w = vec![1.0f64, 4.0, 1.0];
        let weighted = gbr_fit(&x, 1, &y, Some(&w), &config).unwrap();
        assert_eq!(weighted.init_value, 1.0);
    }

    #[test]
    fn converges_on_noiseless_linear() {
        let (x, y) = linear_data(300, 2);
        let config = GbrConfig {
            n_estimators: 200,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 1,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        };
        let model = gbr_fit(&x, 3, &y, None, &config).unwrap();
        let preds = gbr_predict(&model, &x, 3).unwrap();
        let mae: f64 =
            preds.iter().zip(&y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64;
        let range = y.iter().cloned().fold(f64::MIN, f64::max)
            - y.iter().cloned().fold(f64::MAX, f64::min);
        assert!(mae < 0.02 * range, "mae {mae} range {range}");
    }

    #[test]
    fn huber_beats_squared_on_outliers() {
        let (x, mut y) = linear_data(400, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut clean = vec![true; y.len()];
        for i in 0..y.len() {
            if rng.gen::<f64>() < 0.10 {
                y[i] += 2.0; // gross outlier
                clean[i] = false;
            }
        }
        let budget = 150;
        let huber = gbr_fit(
            &x,
            3,
            &y,
            None,
            &GbrConfig {
                n_estimators: budget,
                learning_rate: 0.1,
                max_depth: 3,
                min_samples_leaf: 5,
                loss: Loss::Huber { delta: 0.1 },
                seed: 5,
            },
        )
        .unwrap();
        let squared = gbr_fit(
            &x,
            3,
            &y,
            None,
            &GbrConfig {
                n_estimators: budget,
                learning_rate: 0.1,
                max_depth: 3,
                min_samples_leaf: 5,
                loss: Loss::Squared,
                seed: 5,
            },
        )
        .unwrap();
        let (x_ref, y_ref) = linear_data(400, 3); // clean targets, same inputs
        let ph = gbr_predict(&huber, &x_ref, 3).unwrap();
        let ps = gbr_predict(&squared, &x_ref, 3).unwrap();
        let mae = |p: &[f64]| -> f64 {
            let mut s = 0.0;
            let mut n = 0;
            for i in 0..y_ref.len() {
                if clean[i] {
                    s += (p[i] - y_ref[i]).abs();
                    n += 1;
                }
            }
            s / n as f64
        };
        assert!(
            mae(&ph) < mae(&ps),
            "huber {} vs squared {}",
            mae(&ph),
            mae(&ps)
        );
    }

    #[test]
    fn training_loss_non_increasing() {
        let (x, mut y) = linear_data(120, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for v in y.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let config = GbrConfig {
            n_estimators: 50,
            learning_rate: 0.1,
            max_depth: 2,
            min_samples_leaf: 2,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        };
        let model = gbr_fit(&x, 3, &y, None, &config).unwrap();
        let w = vec![1.0; y.len()];
        let data = Dataset::new(&x, 3).unwrap();
        let mut current = vec![model.init_value; y.len()];
        let mut last = huber_loss(&current, &y, &w, config.loss);
        for tree in &model.trees {
            for i in 0..y.len() {
                current[i] += config.learning_rate * tree.predict_row(data.row(i)) as f64;
            }
            let loss = huber_loss(&current, &y, &w, config.loss);
            assert!(loss <= last + 1e-9, "loss rose: {last} -> {loss}");
            last = loss;
        }
    }

    #[test]
    fn telescoping_prediction_identity() {
        let (x, y) = linear_data(80, 5);
        let config = GbrConfig {
            n_estimators: 30,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 2,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        };
        let model = gbr_fit(&x, 3, &y, None, &config).unwrap();
        let data = Dataset::new(&x, 3).unwrap();
        for r in [0usize, 17, 79] {
            let row = data.row(r);
            let mut acc = model.init_value;
            for t in 0..model.trees.len() {
                let direct = {
                    let mut a = model.init_value;
                    for tree in &model.trees[..t] {
                        a += model.learning_rate * tree.predict_row(row) as f64;
                    }
                    a
                };
                assert_eq!(acc, direct);
                acc += model.learning_rate * model.trees[t].predict_row(row) as f64;
            }
        }
    }

    #[test]
    fn single_leaf_model_constant() {
        let x = vec![0.0f32, 1.0, 2.0, 3.0];
        let y = vec![0.3f64; 4];
        let config = GbrConfig {
            n_estimators: 5,
            ..Default::default()
        };
        let model = gbr_fit(&x, 1, &y, None, &config).unwrap();
        let preds = gbr_predict(&model, &x, 1).unwrap();
        assert!(preds.iter().all(|&p| (p - 0.3).abs() < 1e-9));
    }

    #[test]
    fn deep_model_memorizes_training_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let n = 60;
        let x: Vec<f32> = (0..n * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let config = GbrConfig {
            n_estimators: 400,
            learning_rate: 0.5,
            max_depth: 12,
            min_samples_leaf: 1,
            loss: Loss::Squared,
            seed: 0,
        };
        let model = gbr_fit(&x, 2, &y, None, &config).unwrap();
        let preds = gbr_predict(&model, &x, 2).unwrap();
        for i in 0..n {
            assert!((preds[i] - y[i]).abs() < 1e-3, "row {i}: {} vs {}", preds[i], y[i]);
        }
    }

    #[test]
    fn permuting_rows_permutes_predictions() {
        let (x, y) = linear_data(40, 6);
        let config = GbrConfig {
            n_estimators: 20,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 2,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        };
        let model = gbr_fit(&x, 3, &y, None, &config).unwrap();
        let fwd = gbr_predict(&model, &x, 3).unwrap();
        let mut rev = Vec::new();
        for r in (0..40).rev() {
            rev.extend_from_slice(&x[r * 3..(r + 1) * 3]);
        }
        let bwd = gbr_predict(&model, &rev, 3).unwrap();
        for i in 0..40 {
            assert_eq!(fwd[i], bwd[39 - i]);
        }
    }

    #[test]
    fn predict_rejects_column_mismatch() {
        let (x, y) = linear_data(10, 7);
        let model = gbr_fit(
            &x,
            3,
            &y,
            None,
            &GbrConfig {
                n_estimators: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(gbr_predict(&model, &x, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn cv_single_config_is_best() {
        let (x, y) = linear_data(30, 8);
        let grid = [GbrConfig {
            n_estimators: 10,
            learning_rate: 0.1,
            max_depth: 2,
            min_samples_leaf: 1,
            loss: Loss::Squared,
            seed: 0,
        }];
        let cv = cross_validate(&x, 3, &y, &grid, 5, 42).unwrap();
        assert_eq!(cv.best_index, 0);
        assert_eq!(cv.fold_scores[0].len(), 5);
    }

    #[test]
    fn cv_leave_one_out_matches_oracle() {
        let (x, y) = linear_data(5, 9);
        let config = GbrConfig {
            n_estimators: 5,
            learning_rate: 0.2,
            max_depth: 2,
            min_samples_leaf: 1,
            loss: Loss::Squared,
            seed: 0,
        };
        let cv = cross_validate(&x, 3, &y, &[config], 5, 1).unwrap();

        // Hand-rolled leave-one-out: each fold holds exactly one row.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut rng);
        let mut fold_of = vec![0usize; 5];
        for (pos, &row) in order.iter().enumerate() {
            fold_of[row] = pos % 5;
        }
        for fold in 0..5 {
            let test_row = (0..5).find(|r| fold_of[*r] == fold).unwrap();
            let mut xt = Vec::new();
            let mut yt = Vec::new();
            for r in 0..5 {
                if r != test_row {
                    xt.extend_from_slice(&x[r * 3..(r + 1) * 3]);
                    yt.push(y[r]);
                }
            }
            let model = gbr_fit(&xt, 3, &yt, None, &config).unwrap();
            let pred = gbr_predict_row(&model, &x[test_row * 3..(test_row + 1) * 3]);
            let mae = (pred - y[test_row]).abs();
            assert!((cv.fold_scores[0][fold] - mae).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_fold_sizes_differ_by_at_most_one() {
        let (x, y) = linear_data(23, 10);
        let config = GbrConfig {
            n_estimators: 1,
            learning_rate: 0.1,
            max_depth: 1,
            min_samples_leaf: 1,
            loss: Loss::Squared,
            seed: 0,
        };
        // Reconstruct the fold assignment the same way cross_validate does.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut order: Vec<usize> = (0..23).collect();
        order.shuffle(&mut rng);
        let mut sizes = vec![0usize; 5];
        for (pos, _) in order.iter().enumerate() {
            sizes[pos % 5] += 1;
        }
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // And the call itself succeeds.
        cross_validate(&x, 3, &y, &[config], 5, 3).unwrap();
    }

    #[test]
    fn cv_empty_grid_errors() {
        let (x, y) = linear_data(10, 11);
        assert!(cross_validate(&x, 3, &y, &[], 5, 0).is_err());
    }
}
