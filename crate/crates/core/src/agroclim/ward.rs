//! Ward agglomeration via the Lance-Williams update on a dissimilarity
//! matrix.

use crate::{Error, Result};

/// One agglomeration step over current cluster representatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Representative indices at merge time (the union keeps `a`).
    pub a: usize,
    pub b: usize,
    pub cost: f64,
    /// Size of the merged cluster.
    pub size: usize,
}

/// Full Ward linkage of an `n x n` dissimilarity matrix.
///
/// Ties (equal merge costs) resolve to the lexicographically smallest pair.
/// Fed squared Euclidean distances, the merge sequence reproduces greedy
/// minimal-variance agglomeration with costs equal to twice the variance
/// increase.
pub fn ward_linkage(dissim: &[f64], n: usize) -> Result<Vec<Merge>> {
    if n == 0 || dissim.len() != n * n {
        return Err(Error::Shape(format!(
            "dissimilarity matrix of {} values is not {n}x{n}",
            dissim.len()
        )));
    }
    let mut d = dissim.to_vec();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for _ in 1..n {
        // Smallest active pair, lexicographic tie-break.
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let dij = d[i * n + j];
                if best.map_or(true, |(bd, _, _)| dij < bd) {
                    best = Some((dij, i, j));
                }
            }
        }
        let (cost, i, j) = best.expect("at least two active clusters");

        // Lance-Williams Ward update for every other active cluster.
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let denom = ni + nj + nk;
            let updated = ((ni + nk) * d[i * n + k] + (nj + nk) * d[j * n + k] - nk * cost)
                / denom;
            d[i * n + k] = updated;
            d[k * n + i] = updated;
        }
        active[j] = false;
        size[i] += size[j];
        merges.push(Merge {
            a: i,
            b: j,
            cost,
            size: size[i],
        });
    }
    Ok(merges)
}

/// Labels in `0..k` after stopping the agglomeration at `k` clusters.
/// Labels are assigned by first occurrence in point order.
pub fn cut_tree(merges: &[Merge], n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot cut {n} points into {k} clusters")));
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for m in merges.iter().take(n - k) {
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[rb] = ra;
    }
    let mut label_of_root = std::collections::BTreeMap::new();
    let mut labels = Vec::with_capacity(n);
    for p in 0..n {
        let root = find(&mut parent, p);
        let next = label_of_root.len();
        let l = *label_of_root.entry(root).or_insert(next);
        labels.push(l);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn sq_euclid_matrix(points: &[Vec<f64>]) -> Vec<f64> {
        let n = points.len();
        let mut d = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let s: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d[i * n + j] = s;
            }
        }
        d
    }

    /// Greedy minimal-variance agglomeration from raw points.
    fn bruteforce_min_variance(points: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
        let n = points.len();
        let dim = points[0].len();
        let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
        let mut merges = Vec::new();
        for _ in 1..n {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..n {
                let Some(mi) = &members[i] else { continue };
                for j in i + 1..n {
                    let Some(mj) = &members[j] else { continue };
                    let centroid = |m: &Vec<usize>| -> Vec<f64> {
                        let mut c = vec![0.0; dim];
                        for &p in m {
                            for (a, v) in c.iter_mut().zip(&points[p]) {
                                *a += v;
                            }
                        }
                        c.iter().map(|v| v / m.len() as f64).collect()
                    };
                    let ci = centroid(mi);
                    let cj = centroid(mj);
                    let dist2: f64 = ci.iter().zip(&cj).map(|(a, b)| (a - b) * (a - b)).sum();
                    let cost =
                        (mi.len() * mj.len()) as f64 / (mi.len() + mj.len()) as f64 * dist2;
                    if best.map_or(true, |(bc, _, _)| cost < bc) {
                        best = Some((cost, i, j));
                    }
                }
            }
            let (cost, i, j) = best.unwrap();
            let mj = members[j].take().unwrap();
            members[i].as_mut().unwrap().extend(mj);
            merges.push((i, j, cost));
        }
        merges
    }

    #[test]
    fn matches_min_variance_oracle_small() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for trial in 0..20 {
            let n = rng.gen_range(3..=8);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                .collect();
            let merges = ward_linkage(&sq_euclid_matrix(&points), n).unwrap();
            let oracle = bruteforce_min_variance(&points);
            assert_eq!(merges.len(), oracle.len());
            for (m, o) in merges.iter().zip(oracle.iter()) {
                assert_eq!((m.a, m.b), (o.0, o.1), "trial {trial}");
                // Lance-Williams costs are twice the variance increase.
                assert!(
                    (m.cost - 2.0 * o.2).abs() < 1e-9 * (1.0 + m.cost.abs()),
                    "trial {trial}: {} vs {}",
                    m.cost,
                    2.0 * o.2
                );
            }
        }
    }

    #[test]
    fn merge_costs_non_decreasing() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let merges = ward_linkage(&sq_euclid_matrix(&points), 30).unwrap();
        for w in merges.windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-12);
        }
    }

    #[test]
    fn cut_at_n_gives_singletons() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let merges = ward_linkage(&sq_euclid_matrix(&points), 5).unwrap();
        let labels = cut_tree(&merges, 5, 5).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cut_at_two_separates_blobs() {
        let mut points = Vec::new();
        for i in 0..6 {
            points.push(vec![0.1 * i as f64, 0.0]);
        }
        for i in 0..6 {
            points.push(vec![10.0 + 0.1 * i as f64, 0.0]);
        }
        let merges = ward_linkage(&sq_euclid_matrix(&points), 12).unwrap();
        let labels = cut_tree(&merges, 12, 2).unwrap();
        for i in 0..6 {
            assert_eq!(labels[i], labels[0]);
            assert_eq!(labels[6 + i], labels[6]);
        }
        assert_ne!(labels[0], labels[6]);
    }

    #[test]
    fn cut_rejects_bad_k() {
        let points: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let merges = ward_linkage(&sq_euclid_matrix(&points), 4).unwrap();
        assert!(cut_tree(&merges, 4, 0).is_err());
        assert!(cut_tree(&merges, 4, 5).is_err());
    }
}
