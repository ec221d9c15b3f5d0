//! Regression-tree fitting.
//!
//! Two builders produce identical trees on well-conditioned data: a
//! level-wise builder that scans presorted feature columns once per tree
//! level (used by boosting, where hundreds of trees share one dataset), and
//! a recursive builder used when per-node feature subsampling is requested
//! (random forests). Both enumerate exact splits at midpoints of consecutive
//! distinct values and score by weighted squared-error reduction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::{Error, Result};

/// Row-major design matrix view.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub x: &'a [f32],
    pub n_rows: usize,
    pub n_cols: usize,
}

impl<'a> Dataset<'a> {
    pub fn new(x: &'a [f32], n_cols: usize) -> Result<Self> {
        if n_cols == 0 || x.len() % n_cols != 0 {
            return Err(Error::Shape(format!(
                "matrix of {} values is not divisible into {n_cols} columns",
                x.len()
            )));
        }
        Ok(Self {
            x,
            n_rows: x.len() / n_cols,
            n_cols,
        })
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.x[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.x[row * self.n_cols..(row + 1) * self.n_cols]
    }
}

/// One node of a flattened tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    pub leaf_value: f32,
    pub is_leaf: bool,
}

impl TreeNode {
    fn leaf(value: f32) -> Self {
        Self {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            leaf_value: value,
            is_leaf: true,
        }
    }
}

/// Flattened binary tree; node 0 is the root, internal nodes route
/// `x[feature] <= threshold` to `left`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f32]) -> f32 {
        self.nodes[self.leaf_index(row)].leaf_value
    }

    /// Index of the leaf a row lands in (used for proximity).
    pub fn leaf_index(&self, row: &[f32]) -> usize {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf {
                return i;
            }
            i = if row[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            let n = &nodes[i];
            if n.is_leaf {
                0
            } else {
                1 + walk(nodes, n.left as usize).max(walk(nodes, n.right as usize))
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Stopping and subsampling parameters for a single tree.
#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum total weight per child (row count under unit weights).
    pub min_samples_leaf: f64,
    /// Features drawn per node; `None` searches all columns.
    pub feature_subsample: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 6,
            min_samples_leaf: 1.0,
            feature_subsample: None,
        }
    }
}

/// Fit one weighted regression tree. Rows with zero weight are excluded
/// entirely, so doubling a row's weight and duplicating the row produce the
/// same tree.
pub fn fit_tree(
    data: Dataset,
    y: &[f64],
    weights: &[f64],
    params: TreeParams,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<Tree> {
    if data.n_rows == 0 || y.len() != data.n_rows || weights.len() != data.n_rows {
        return Err(Error::Argument(format!(
            "rows {}, targets {}, weights {} must match and be nonzero",
            data.n_rows,
            y.len(),
            weights.len()
        )));
    }
    if let Some(k) = params.feature_subsample {
        let mut local;
        let rng = match rng {
            Some(r) => r,
            None => {
                local = ChaCha20Rng::seed_from_u64(0);
                &mut local
            }
        };
        return Ok(fit_tree_recursive(data, y, weights, params, k.max(1), rng));
    }
    let sorted = SortedColumns::build(data);
    Ok(fit_tree_levelwise(data, &sorted, y, weights, params))
}

/// Per-column row orderings by (value, row index), with the sorted values
/// cached so level scans stream memory sequentially instead of gathering
/// from the row-major matrix.
pub(crate) struct SortedColumns {
    order: Vec<u32>,
    values: Vec<f32>,
    n_rows: usize,
}

impl SortedColumns {
    pub(crate) fn build(data: Dataset) -> Self {
        let n = data.n_rows;
        let mut order = vec![0u32; n * data.n_cols];
        let mut values = vec![0.0f32; n * data.n_cols];
        order
            .par_chunks_mut(n)
            .zip(values.par_chunks_mut(n))
            .enumerate()
            .for_each(|(col, (chunk, vals))| {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = i as u32;
                }
                chunk.sort_unstable_by(|&a, &b| {
                    let va = data.value(a as usize, col);
                    let vb = data.value(b as usize, col);
                    va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
                });
                for (v, &row) in vals.iter_mut().zip(chunk.iter()) {
                    *v = data.value(row as usize, col);
                }
            });
        Self {
            order,
            values,
            n_rows: n,
        }
    }

    #[inline]
    fn column(&self, col: usize) -> (&[u32], &[f32]) {
        let r = col * self.n_rows..(col + 1) * self.n_rows;
        (&self.order[r.clone()], &self.values[r])
    }
}

#[derive(Clone, Copy)]
struct NodeStats {
    w: f64,
    wy: f64,
    wyy: f64,
}

impl NodeStats {
    fn zero() -> Self {
        Self { w: 0.0, wy: 0.0, wyy: 0.0 }
    }

    fn add(&mut self, w: f64, y: f64) {
        self.w += w;
        self.wy += w * y;
        self.wyy += w * y * y;
    }

    fn mean(&self) -> f64 {
        self.wy / self.w
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: u32,
    threshold: f32,
}

/// Midpoint threshold that is guaranteed to route `prev` left and `next`
/// right even after f32 rounding.
#[inline]
fn midpoint(prev: f32, next: f32) -> f32 {
    let mid = ((prev as f64 + next as f64) * 0.5) as f32;
    if mid >= next {
        prev
    } else {
        mid
    }
}

/// Spurious-gain guard: pure nodes must stay leaves despite rounding noise.
#[inline]
fn min_gain(stats: &NodeStats) -> f64 {
    1e-12 * stats.wyy.abs()
}

pub(crate) fn fit_tree_levelwise(
    data: Dataset,
    sorted: &SortedColumns,
    y: &[f64],
    weights: &[f64],
    params: TreeParams,
) -> Tree {
    const INACTIVE: u32 = u32::MAX;
    let n = data.n_rows;

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut node_of: Vec<u32> = vec![INACTIVE; n];
    let mut root = NodeStats::zero();
    for i in 0..n {
        if weights[i] > 0.0 {
            node_of[i] = 0;
            root.add(weights[i], y[i]);
        }
    }
    nodes.push(TreeNode::leaf(0.0));
    if root.w <= 0.0 {
        nodes[0].leaf_value = 0.0;
        return Tree { nodes };
    }

    // level: (node id, stats); slot_of maps node id -> level slot.
    let mut level: Vec<(u32, NodeStats)> = vec![(0, root)];
    let mut depth = 0usize;

    while !level.is_empty() {
        let n_slots = level.len();
        let mut slot_of: Vec<u32> = vec![INACTIVE; nodes.len()];
        for (slot, &(id, _)) in level.iter().enumerate() {
            slot_of[id as usize] = slot as u32;
        }

        let best: Vec<Option<Candidate>> = if depth >= params.max_depth {
            vec![None; n_slots]
        } else {
            let per_feature: Vec<Vec<Option<Candidate>>> = (0..data.n_cols)
                .into_par_iter()
                .map(|col| {
                    let (order, values) = sorted.column(col);
                    scan_feature(
                        order,
                        values,
                        col as u32,
                        y,
                        weights,
                        &node_of,
                        &slot_of,
                        &level,
                        params.min_samples_leaf,
                    )
                })
                .collect();
            // Sequential reduce in feature order: lowest index wins ties.
            let mut best = vec![None; n_slots];
            for feats in per_feature {
                for (slot, cand) in feats.into_iter().enumerate() {
                    if let Some(c) = cand {
                        let better = match best[slot] {
                            None => true,
                            Some(Candidate { gain, .. }) => c.gain > gain,
                        };
                        if better {
                            best[slot] = Some(c);
                        }
                    }
                }
            }
            best
        };

        // Finalize splits and set up the next level.
        let mut next_level: Vec<(u32, NodeStats)> = Vec::new();
        let mut child_slots: Vec<Option<(u32, u32, usize, usize)>> = vec![None; n_slots];
        for (slot, &(id, stats)) in level.iter().enumerate() {
            match best[slot] {
                Some(c) if c.gain > min_gain(&stats) => {
                    let left = nodes.len() as u32;
                    let right = left + 1;
                    nodes.push(TreeNode::leaf(0.0));
                    nodes.push(TreeNode::leaf(0.0));
                    nodes[id as usize] = TreeNode {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                        leaf_value: 0.0,
                        is_leaf: false,
                    };
                    let li = next_level.len();
                    next_level.push((left, NodeStats::zero()));
                    next_level.push((right, NodeStats::zero()));
                    child_slots[slot] = Some((left, right, li, li + 1));
                }
                _ => {
                    nodes[id as usize] = TreeNode::leaf(stats.mean() as f32);
                }
            }
        }

        // Route rows to children and accumulate child stats in row order.
        if !next_level.is_empty() {
            for row in 0..n {
                let nid = node_of[row];
                if nid == INACTIVE {
                    continue;
                }
                let Some(slot) = slot_of.get(nid as usize).copied() else { continue };
                if slot == INACTIVE {
                    continue;
                }
                if let Some((l, r, ls, rs)) = child_slots[slot as usize] {
                    let node = nodes[nid as usize];
                    let goes_left = data.value(row, node.feature as usize) <= node.threshold;
                    let (child, cslot) = if goes_left { (l, ls) } else { (r, rs) };
                    node_of[row] = child;
                    next_level[cslot].1.add(weights[row], y[row]);
                }
            }
        }
        level = next_level;
        depth += 1;
    }

    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn scan_feature(
    order: &[u32],
    values: &[f32],
    feature: u32,
    y: &[f64],
    weights: &[f64],
    node_of: &[u32],
    slot_of: &[u32],
    level: &[(u32, NodeStats)],
    min_weight: f64,
) -> Vec<Option<Candidate>> {
    let n_slots = level.len();
    let mut best: Vec<Option<Candidate>> = vec![None; n_slots];
    let mut left: Vec<NodeStats> = vec![NodeStats::zero(); n_slots];
    let mut last_val: Vec<f32> = vec![0.0; n_slots];

    for (k, &row_u) in order.iter().enumerate() {
        let row = row_u as usize;
        let nid = node_of[row];
        if nid == u32::MAX {
            continue;
        }
        let slot = slot_of[nid as usize];
        if slot == u32::MAX {
            continue;
        }
        let s = slot as usize;
        let v = values[k];
        let l = &mut left[s];
        if l.w > 0.0 && v > last_val[s] {
            let total = &level[s].1;
            let rw = total.w - l.w;
            if l.w >= min_weight && rw >= min_weight {
                let rwy = total.wy - l.wy;
                let gain = l.wy * l.wy / l.w + rwy * rwy / rw - total.wy * total.wy / total.w;
                let better = match best[s] {
                    None => gain > 0.0,
                    Some(c) => gain > c.gain,
                };
                if better {
                    best[s] = Some(Candidate {
                        gain,
                        feature,
                        threshold: midpoint(last_val[s], v),
                    });
                }
            }
        }
        l.add(weights[row], y[row]);
        last_val[s] = v;
    }
    best
}

/// Recursive builder with per-node feature subsampling.
pub(crate) fn fit_tree_recursive(
    data: Dataset,
    y: &[f64],
    weights: &[f64],
    params: TreeParams,
    k_features: usize,
    rng: &mut ChaCha20Rng,
) -> Tree {
    let rows: Vec<u32> = (0..data.n_rows as u32)
        .filter(|&r| weights[r as usize] > 0.0)
        .collect();
    let mut nodes = vec![TreeNode::leaf(0.0)];
    let mut scratch: Vec<u32> = (0..data.n_cols as u32).collect();
    if rows.is_empty() {
        return Tree { nodes };
    }
    split_recursive(
        data, y, weights, &params, k_features, rng, &mut nodes, 0, rows, 0, &mut scratch,
    );
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn split_recursive(
    data: Dataset,
    y: &[f64],
    weights: &[f64],
    params: &TreeParams,
    k_features: usize,
    rng: &mut ChaCha20Rng,
    nodes: &mut Vec<TreeNode>,
    node_id: usize,
    rows: Vec<u32>,
    depth: usize,
    scratch: &mut Vec<u32>,
) {
    let mut stats = NodeStats::zero();
    for &r in &rows {
        stats.add(weights[r as usize], y[r as usize]);
    }

    let mut best: Option<Candidate> = None;
    if depth < params.max_depth && rows.len() > 1 {
        // Sample the per-node feature subset, then search in index order so
        // the lowest feature index wins ties.
        let k = k_features.min(data.n_cols);
        let (chosen, _) = scratch.partial_shuffle(rng, k);
        let mut features: Vec<u32> = chosen.to_vec();
        features.sort_unstable();

        let mut pairs: Vec<(f32, u32)> = Vec::with_capacity(rows.len());
        for &feature in &features {
            pairs.clear();
            pairs.extend(
                rows.iter()
                    .map(|&r| (data.value(r as usize, feature as usize), r)),
            );
            pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut left = NodeStats::zero();
            let mut last_val = 0.0f32;
            for &(v, r) in pairs.iter() {
                if left.w > 0.0 && v > last_val {
                    let rw = stats.w - left.w;
                    if left.w >= params.min_samples_leaf && rw >= params.min_samples_leaf {
                        let rwy = stats.wy - left.wy;
                        let gain = left.wy * left.wy / left.w + rwy * rwy / rw
                            - stats.wy * stats.wy / stats.w;
                        let better = match best {
                            None => gain > 0.0,
                            Some(c) => gain > c.gain,
                        };
                        if better {
                            best = Some(Candidate {
                                gain,
                                feature,
                                threshold: midpoint(last_val, v),
                            });
                        }
                    }
                }
                left.add(weights[r as usize], y[r as usize]);
                last_val = v;
            }
        }
    }

    match best {
        Some(c) if c.gain > min_gain(&stats) => {
            let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
            for &r in &rows {
                if data.value(r as usize, c.feature as usize) <= c.threshold {
                    lrows.push(r);
                } else {
                    rrows.push(r);
                }
            }
            let left = nodes.len();
            nodes.push(TreeNode::leaf(0.0));
            let right = nodes.len();
            nodes.push(TreeNode::leaf(0.0));
            nodes[node_id] = TreeNode {
                feature: c.feature,
                threshold: c.threshold,
                left: left as u32,
                right: right as u32,
                leaf_value: 0.0,
                is_leaf: false,
            };
            split_recursive(
                data, y, weights, params, k_features, rng, nodes, left, lrows, depth + 1, scratch,
            );
            split_recursive(
                data, y, weights, params, k_features, rng, nodes, right, rrows, depth + 1, scratch,
            );
        }
        _ => {
            nodes[node_id] = TreeNode::leaf(stats.mean() as f32);
        }
    }
}

/// Recursive classification tree: split quality is the weighted Gini
/// reduction (via the sum-of-squares identity), leaves predict the modal
/// class (lowest class index on ties). `leaf_value` stores the class index.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_class_tree(
    data: Dataset,
    labels: &[u32],
    n_classes: usize,
    weights: &[f64],
    params: &TreeParams,
    k_features: usize,
    rng: &mut ChaCha20Rng,
) -> Tree {
    let rows: Vec<u32> = (0..data.n_rows as u32)
        .filter(|&r| weights[r as usize] > 0.0)
        .collect();
    let mut nodes = vec![TreeNode::leaf(0.0)];
    let mut scratch: Vec<u32> = (0..data.n_cols as u32).collect();
    if !rows.is_empty() {
        split_class(
            data, labels, n_classes, weights, params, k_features, rng, &mut nodes, 0, rows, 0,
            &mut scratch,
        );
    }
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn split_class(
    data: Dataset,
    labels: &[u32],
    n_classes: usize,
    weights: &[f64],
    params: &TreeParams,
    k_features: usize,
    rng: &mut ChaCha20Rng,
    nodes: &mut Vec<TreeNode>,
    node_id: usize,
    rows: Vec<u32>,
    depth: usize,
    scratch: &mut Vec<u32>,
) {
    let mut class_w = vec![0.0f64; n_classes];
    let mut total_w = 0.0f64;
    for &r in &rows {
        class_w[labels[r as usize] as usize] += weights[r as usize];
        total_w += weights[r as usize];
    }
    let modal = class_w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32)
        .unwrap_or(0);
    let purity: f64 = class_w.iter().map(|w| w * w).sum::<f64>() / total_w;
    let pure = class_w.iter().filter(|&&w| w > 0.0).count() <= 1;

    let mut best: Option<Candidate> = None;
    if depth < params.max_depth && rows.len() > 1 && !pure {
        let k = k_features.min(data.n_cols);
        let (chosen, _) = scratch.partial_shuffle(rng, k);
        let mut features: Vec<u32> = chosen.to_vec();
        features.sort_unstable();

        let mut pairs: Vec<(f32, u32)> = Vec::with_capacity(rows.len());
        let mut left_w = vec![0.0f64; n_classes];
        for &feature in &features {
            pairs.clear();
            pairs.extend(
                rows.iter()
                    .map(|&r| (data.value(r as usize, feature as usize), r)),
            );
            pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            left_w.iter_mut().for_each(|w| *w = 0.0);
            let mut lw = 0.0f64;
            let mut last_val = 0.0f32;
            for &(v, r) in pairs.iter() {
                if lw > 0.0 && v > last_val {
                    let rw = total_w - lw;
                    if lw >= params.min_samples_leaf && rw >= params.min_samples_leaf {
                        let lsq: f64 = left_w.iter().map(|w| w * w).sum();
                        let rsq: f64 = left_w
                            .iter()
                            .zip(class_w.iter())
                            .map(|(l, t)| (t - l) * (t - l))
                            .sum();
                        let gain = lsq / lw + rsq / rw - purity;
                        let better = match best {
                            None => gain > 1e-12 * total_w.max(1.0),
                            Some(c) => gain > c.gain,
                        };
                        if better {
                            best = Some(Candidate {
                                gain,
                                feature,
                                threshold: midpoint(last_val, v),
                            });
                        }
                    }
                }
                left_w[labels[r as usize] as usize] += weights[r as usize];
                lw += weights[r as usize];
                last_val = v;
            }
        }
    }

    match best {
        Some(c) => {
            let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
            for &r in &rows {
                if data.value(r as usize, c.feature as usize) <= c.threshold {
                    lrows.push(r);
                } else {
                    rrows.push(r);
                }
            }
            let left = nodes.len();
            nodes.push(TreeNode::leaf(0.0));
            let right = nodes.len();
            nodes.push(TreeNode::leaf(0.0));
            nodes[node_id] = TreeNode {
                feature: c.feature,
                threshold: c.threshold,
                left: left as u32,
                right: right as u32,
                leaf_value: 0.0,
                is_leaf: false,
            };
            split_class(
                data, labels, n_classes, weights, params, k_features, rng, nodes, left, lrows,
                depth + 1, scratch,
            );
            split_class(
                data, labels, n_classes, weights, params, k_features, rng, nodes, right, rrows,
                depth + 1, scratch,
            );
        }
        None => {
            nodes[node_id] = TreeNode::leaf(modal as f32);
        }
    }
}
