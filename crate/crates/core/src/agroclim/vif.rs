//! Variance-inflation-factor screening.

use crate::{Error, Result};

/// Iteratively drop the column with the largest VIF until all VIFs are at
/// or below the threshold. Returns surviving column indices (ascending) and
/// the drop sequence. Ties drop the lowest index; a perfectly collinear
/// column has infinite VIF and goes first.
pub fn vif_select(
    x: &[f64],
    n_cols: usize,
    threshold: f64,
) -> Result<(Vec<usize>, Vec<(usize, f64)>)> {
    if n_cols < 2 || x.len() % n_cols != 0 {
        return Err(Error::Argument(format!(
            "need >= 2 columns, got {n_cols} over {} values",
            x.len()
        )));
    }
    let n_rows = x.len() / n_cols;
    if n_rows <= n_cols {
        return Err(Error::Argument(format!(
            "need more rows ({n_rows}) than columns ({n_cols})"
        )));
    }
    for c in 0..n_cols {
        let col: Vec<f64> = (0..n_rows).map(|r| x[r * n_cols + c]).collect();
        let mean = col.iter().sum::<f64>() / n_rows as f64;
        if col.iter().all(|v| (v - mean).abs() < 1e-14 * mean.abs().max(1.0)) {
            return Err(Error::Argument(format!("column {c} is constant")));
        }
    }

    let mut active: Vec<usize> = (0..n_cols).collect();
    let mut dropped = Vec::new();
    while active.len() > 1 {
        let vifs: Vec<f64> = active
            .iter()
            .map(|&j| vif_of(x, n_cols, n_rows, &active, j))
            .collect();
        let mut worst = 0usize;
        for i in 1..vifs.len() {
            // Strictly-greater keeps the lowest index on ties.
            if vifs[i] > vifs[worst] {
                worst = i;
            }
        }
        if vifs[worst] > threshold {
            dropped.push((active[worst], vifs[worst]));
            active.remove(worst);
        } else {
            break;
        }
    }
    Ok((active, dropped))
}

/// VIF of column `j` within the active set: 1 / (1 - R^2) of regressing it
/// (with intercept) on the remaining active columns.
fn vif_of(x: &[f64], n_cols: usize, n_rows: usize, active: &[usize], j: usize) -> f64 {
    let predictors: Vec<usize> = active.iter().copied().filter(|&c| c != j).collect();
    let p = predictors.len() + 1; // intercept

    // Normal equations with a vanishing ridge for numerical solvability on
    // exactly collinear predictors.
    let mut gram = vec![0.0f64; p * p];
    let mut xty = vec![0.0f64; p];
    let mut sy = 0.0f64;
    let mut syy = 0.0f64;
    for r in 0..n_rows {
        let y = x[r * n_cols + j];
        sy += y;
        syy += y * y;
        let mut row = Vec::with_capacity(p);
        row.push(1.0);
        for &c in &predictors {
            row.push(x[r * n_cols + c]);
        }
        for a in 0..p {
            xty[a] += row[a] * y;
            for b in 0..p {
                gram[a * p + b] += row[a] * row[b];
            }
        }
    }
    let trace: f64 = (0..p).map(|a| gram[a * p + a]).sum();
    let ridge = 1e-12 * trace.max(1.0) / p as f64;
    for a in 0..p {
        gram[a * p + a] += ridge;
    }
    let beta = match solve_dense(&mut gram, &mut xty, p) {
        Some(b) => b,
        None => return f64::INFINITY,
    };

    let mut sse = 0.0f64;
    for r in 0..n_rows {
        let y = x[r * n_cols + j];
        let mut pred = beta[0];
        for (k, &c) in predictors.iter().enumerate() {
            pred += beta[k + 1] * x[r * n_cols + c];
        }
        sse += (y - pred) * (y - pred);
    }
    let mean = sy / n_rows as f64;
    let sst = syy - n_rows as f64 * mean * mean;
    if sst <= 0.0 {
        return f64::INFINITY;
    }
    let r2 = 1.0 - sse / sst;
    if r2 >= 1.0 - 1e-12 {
        f64::INFINITY
    } else {
        1.0 / (1.0 - r2)
    }
}

/// In-place Gaussian elimination with partial pivoting.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    Some((0..n).map(|i| b[i] / a[i * n + i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn orthogonal_columns_survive() {
        // Long +/-1 design with exactly orthogonal columns.
        let n = 64;
        let mut x = Vec::with_capacity(n * 3);
        for r in 0..n {
            let a = if r % 2 == 0 { 1.0 } else { -1.0 };
            let b = if (r / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let c = if (r / 4) % 2 == 0 { 1.0 } else { -1.0 };
            x.extend_from_slice(&[a, b, c]);
        }
        let (kept, dropped) = vif_select(&x, 3, 10.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert!(dropped.is_empty());
    }

    #[test]
    fn duplicated_column_dropped_first() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let n = 50;
        let mut x = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            x.extend_from_slice(&[a, a, b]); // columns 0 and 1 identical
        }
        let (kept, dropped) = vif_select(&x, 3, 10.0).unwrap();
        assert_eq!(dropped[0].0, 0); // lowest index of the infinite pair
        assert!(dropped[0].1.is_infinite());
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn constant_column_rejected() {
        let x = vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0, 1.0, 8.0];
        assert!(vif_select(&x, 2, 10.0).is_err());
    }

    #[test]
    fn correlated_gaussians_match_inverse_correlation_oracle() {
        // For standardized data, VIF_j equals the j-th diagonal of the
        // inverse correlation matrix: an independent closed form for p = 3.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..10 {
            let n = 400;
            let mut cols = vec![vec![0.0f64; n]; 3];
            for i in 0..n {
                let z1: f64 = rng.gen_range(-1.0..1.0);
                let z2: f64 = rng.gen_range(-1.0..1.0);
                let z3: f64 = rng.gen_range(-1.0..1.0);
                cols[0][i] = z1;
                cols[1][i] = 0.8 * z1 + 0.6 * z2;
                cols[2][i] = 0.5 * z1 + 0.3 * z2 + 0.8 * z3;
            }
            // Standardize.
            for c in cols.iter_mut() {
                let m = c.iter().sum::<f64>() / n as f64;
                let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
                for v in c.iter_mut() {
                    *v = (*v - m) / sd;
                }
            }
            let mut x = Vec::with_capacity(n * 3);
            for i in 0..n {
                x.extend_from_slice(&[cols[0][i], cols[1][i], cols[2][i]]);
            }

            // Correlation matrix and its inverse.
            let mut rmat = [[0.0f64; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    rmat[a][b] =
                        cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                }
            }
            let det = rmat[0][0] * (rmat[1][1] * rmat[2][2] - rmat[1][2] * rmat[2][1])
                - rmat[0][1] * (rmat[1][0] * rmat[2][2] - rmat[1][2] * rmat[2][0])
                + rmat[0][2] * (rmat[1][0] * rmat[2][1] - rmat[1][1] * rmat[2][0]);
            let vif_oracle = [
                (rmat[1][1] * rmat[2][2] - rmat[1][2] * rmat[2][1]) / det,
                (rmat[0][0] * rmat[2][2] - rmat[0][2] * rmat[2][0]) / det,
                (rmat[0][0] * rmat[1][1] - rmat[0][1] * rmat[1][0]) / det,
            ];

            // The iterative drop loop with oracle VIFs must give the same
            // surviving set at any threshold.
            for threshold in [1.5, 2.0, 5.0, 10.0] {
                let (kept, _) = vif_select(&x, 3, threshold).unwrap();
                let mut oracle_active: Vec<usize> = vec![0, 1, 2];
                loop {
                    if oracle_active.len() == 1 {
                        break;
                    }
                    // Recompute oracle VIFs on the active subset.
                    let vifs: Vec<f64> = if oracle_active.len() == 3 {
                        oracle_active.iter().map(|&j| vif_oracle[j]).collect()
                    } else {
                        // Two columns: VIF = 1 / (1 - r^2).
                        let (a, b) = (oracle_active[0], oracle_active[1]);
                        let r = rmat[a][b];
                        vec![1.0 / (1.0 - r * r); 2]
                    };
                    let mut worst = 0;
                    for i in 1..vifs.len() {
                        if vifs[i] > vifs[worst] {
                            worst = i;
                        }
                    }
                    if vifs[worst] > threshold {
                        oracle_active.remove(worst);
                    } else {
                        break;
                    }
                }
                assert_eq!(kept, oracle_active, "trial {trial} threshold {threshold}");
            }
        }
    }
}
