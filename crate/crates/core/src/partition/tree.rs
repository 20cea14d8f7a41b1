//! Axis-aligned trees used as partitions, and an in-repo CART grower for
//! bagged and boosted ensembles. Only the routing structure is kept; leaf
//! values are discarded once the ensemble is built.

use ndarray::{Array1, ArrayView1};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Partition, PartitionEnsemble};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        cell: usize,
    },
}

/// A rooted binary tree stored as a node array with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    n_cells: usize,
}

impl Tree {
    /// Nodes must already be validated: root at 0, every node reachable
    /// exactly once, leaf cells `0..C` without gaps.
    pub(crate) fn from_validated(nodes: Vec<Node>, n_cells: usize) -> Self {
        Tree { nodes, n_cells }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.len() - self.n_cells
    }

    pub fn assign(&self, x: ArrayView1<'_, f64>) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { cell } => return cell,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub(crate) fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartParams {
    pub max_leaves: usize,
    pub min_leaf: usize,
    /// Fraction of features examined at each split, in (0, 1].
    pub feature_subsample: f64,
}

impl Default for CartParams {
    fn default() -> Self {
        CartParams {
            max_leaves: 16,
            min_leaf: 5,
            feature_subsample: 1.0,
        }
    }
}

impl CartParams {
    fn validate(&self) -> Result<()> {
        if self.max_leaves < 2 {
            return Err(Error::invalid("max_leaves must be at least 2"));
        }
        if self.min_leaf < 1 {
            return Err(Error::invalid("min_leaf must be at least 1"));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(Error::invalid("feature_subsample must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
}

enum Grow {
    Leaf { rows: Vec<usize>, best: Option<Split> },
    Internal { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Best split of `rows` over `features` by sum-of-squares reduction.
/// Candidates are midpoints of consecutive distinct values; the first best
/// (lowest feature, then lowest threshold) wins ties.
fn best_split(
    x: ndarray::ArrayView2<'_, f64>,
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let total: f64 = rows.iter().map(|&i| y[i] - mean).sum();
    let base = total * total / n as f64;
    let mut best: Option<Split> = None;
    let mut order = rows.to_vec();
    for &j in features {
        order.sort_by(|&a, &b| x[[a, j]].total_cmp(&x[[b, j]]));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]] - mean;
            let n_left = k + 1;
            let (lo, hi) = (x[[order[k], j]], x[[order[k + 1], j]]);
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64
                + right_sum * right_sum / (n - n_left) as f64
                - base;
            if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split {
                    feature: j,
                    threshold,
                    gain,
                    n_left,
                });
            }
        }
    }
    best
}

/// Grow a regression tree best-first on `ds` until `max_leaves` leaves or
/// no split reduces the squared error.
pub fn train_cart(ds: &Dataset, params: &CartParams, seed: u64) -> Result<Partition> {
    let y = ds.targets().to_vec();
    train_cart_on(ds, &y, None, params, seed)
}

fn train_cart_on(
    ds: &Dataset,
    y: &[f64],
    rows: Option<Vec<usize>>,
    params: &CartParams,
    seed: u64,
) -> Result<Partition> {
    params.validate()?;
    let x = ds.features();
    let d = ds.n_features();
    let rows = rows.unwrap_or_else(|| (0..ds.n_samples()).collect());
    if rows.len() < 2 * params.min_leaf {
        return Err(Error::invalid(format!(
            "{} training rows cannot support two leaves of {}",
            rows.len(),
            params.min_leaf
        )));
    }
    let n_try = ((params.feature_subsample * d as f64).ceil() as usize).clamp(1, d);
    let mut r = rng::labeled(seed, "cart-features");
    let mut draw_features = || -> Vec<usize> {
        if n_try == d {
            (0..d).collect()
        } else {
            let mut f = index::sample(&mut r, d, n_try).into_vec();
            f.sort_unstable();
            f
        }
    };

    let best = best_split(x, y, &rows, &draw_features(), params.min_leaf);
    let mut nodes = vec![Grow::Leaf { rows, best }];
    let mut n_leaves = 1;
    while n_leaves < params.max_leaves {
        let pick = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, g)| match g {
                Grow::Leaf { best: Some(s), .. } => Some((i, s.gain)),
                _ => None,
            })
            .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            });
        let Some((at, _)) = pick else { break };
        let Grow::Leaf { rows, best: Some(split) } =
            std::mem::replace(&mut nodes[at], Grow::Leaf { rows: Vec::new(), best: None })
        else {
            unreachable!()
        };
        let mut sorted = rows;
        sorted.sort_by(|&a, &b| {
            x[[a, split.feature]]
                .total_cmp(&x[[b, split.feature]])
                .then(a.cmp(&b))
        });
        let right_rows = sorted.split_off(split.n_left);
        let left_rows = sorted;
        debug_assert!(left_rows.iter().all(|&i| x[[i, split.feature]] <= split.threshold));
        let left = nodes.len();
        let left_best = best_split(x, y, &left_rows, &draw_features(), params.min_leaf);
        nodes.push(Grow::Leaf {
            rows: left_rows,
            best: left_best,
        });
        let right_best = best_split(x, y, &right_rows, &draw_features(), params.min_leaf);
        nodes.push(Grow::Leaf {
            rows: right_rows,
            best: right_best,
        });
        nodes[at] = Grow::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right: left + 1,
        };
        n_leaves += 1;
    }
    Ok(Partition::Tree(finalize(&nodes)))
}

/// Renumber nodes in depth-first (left first) order and number leaves as
/// cells in the same order.
fn finalize(grow: &[Grow]) -> Tree {
    let mut nodes = Vec::with_capacity(grow.len());
    let mut n_cells = 0;
    fn visit(grow: &[Grow], at: usize, nodes: &mut Vec<Node>, n_cells: &mut usize) -> usize {
        let id = nodes.len();
        match grow[at] {
            Grow::Leaf { .. } => {
                nodes.push(Node::Leaf { cell: *n_cells });
                *n_cells += 1;
            }
            Grow::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                nodes.push(Node::Leaf { cell: usize::MAX });
                let l = visit(grow, left, nodes, n_cells);
                let r = visit(grow, right, nodes, n_cells);
                nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left: l,
                    right: r,
                };
            }
        }
        id
    }
    visit(grow, 0, &mut nodes, &mut n_cells);
    Tree::from_validated(nodes, n_cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    /// Each tree on an N-draw bootstrap resample.
    Bagged,
    /// Each tree on the residuals of the running constant-leaf prediction.
    Boosted,
}

/// Build `P` tree partitions. Per-tree seeds are derived by counter, so the
/// result depends only on `seed`.
pub fn make_forest(
    ds: &Dataset,
    n_trees: usize,
    params: &CartParams,
    mode: ForestMode,
    learn_rate: f64,
    seed: u64,
) -> Result<PartitionEnsemble> {
    if n_trees == 0 {
        return Err(Error::invalid("need at least one tree"));
    }
    let n = ds.n_samples();
    let y = ds.targets().to_owned();
    let mut parts = Vec::with_capacity(n_trees);
    match mode {
        ForestMode::Bagged => {
            for p in 0..n_trees {
                let mut r = rng::stream(rng::derive_indexed(seed, "bootstrap", p as u64));
                let rows: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..n)).collect();
                let tree_seed = rng::derive_indexed(seed, "tree", p as u64);
                parts.push(train_cart_on(ds, y.as_slice().unwrap(), Some(rows), params, tree_seed)?);
            }
        }
        ForestMode::Boosted => {
            if !(0.0..=1.0).contains(&learn_rate) {
                return Err(Error::invalid("learn_rate must lie in [0, 1]"));
            }
            let mean = ds.target_mean();
            let mut fitted = Array1::from_elem(n, mean);
            for p in 0..n_trees {
                let residual: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
                let tree_seed = rng::derive_indexed(seed, "tree", p as u64);
                let part = train_cart_on(ds, &residual, None, params, tree_seed)?;
                let mut sums = vec![0.0; part.n_cells()];
                let mut counts = vec![0usize; part.n_cells()];
                let cells: Vec<usize> = ds.features().outer_iter().map(|x| part.assign(x)).collect();
                for (i, &c) in cells.iter().enumerate() {
                    sums[c] += residual[i];
                    counts[c] += 1;
                }
                for (i, &c) in cells.iter().enumerate() {
                    fitted[i] += learn_rate * sums[c] / counts[c].max(1) as f64;
                }
                parts.push(part);
            }
        }
    }
    PartitionEnsemble::new(parts, ds.n_features())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_subspace, TaskKind};
    use ndarray::{array, Array2};

    fn tree_of(p: &Partition) -> &Tree {
        match p {
            Partition::Tree(t) => t,
            _ => panic!("expected a tree"),
        }
    }

    /// Exhaustive search over every feature and every midpoint, independent
    /// of the sorted-prefix implementation.
    fn brute_force_split(x: &Array2<f64>, y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
        let sse = |idx: &[usize]| {
            let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
            idx.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let all: Vec<usize> = (0..y.len()).collect();
        let parent = sse(&all);
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..x.ncols() {
            let mut vals: Vec<f64> = x.column(j).to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[[i, j]] <= t);
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let gain = parent - sse(&l) - sse(&r);
                if gain > 1e-12 && best.is_none_or(|b| gain > b.2 + 1e-12) {
                    best = Some((j, t, gain));
                }
            }
        }
        best
    }

    #[test]
    fn sign_split_matches_exhaustive_search() {
        let x = array![
            [-2.0, 0.3],
            [-1.5, -0.7],
            [-0.5, 0.9],
            [0.5, 0.1],
            [1.0, -0.2],
            [2.5, 0.4]
        ];
        let y = vec![-1.0, -1.1, -0.9, 1.0, 1.2, 0.8];
        let ds = Dataset::unnamed(x.clone(), Array1::from(y.clone()), TaskKind::Regression).unwrap();
        let params = CartParams {
            max_leaves: 2,
            min_leaf: 1,
            feature_subsample: 1.0,
        };
        let t = train_cart(&ds, &params, 0).unwrap();
        let tree = tree_of(&t);
        let (j, thr, _) = brute_force_split(&x, &y, 1).unwrap();
        assert_eq!(j, 0);
        assert_eq!(thr, 0.0);
        match tree.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, j);
                assert_eq!(threshold, thr);
            }
            _ => panic!("root should split"),
        }
        assert_eq!(tree.n_cells(), 2);
        assert_eq!(tree.n_splits(), 1);
    }

    #[test]
    fn constant_targets_give_a_single_leaf() {
        let (train, _) = synth_subspace(40, 50, 0.0, 1).unwrap();
        let ds = Dataset::unnamed(train.features().to_owned(), Array1::from_elem(40, 3.5), TaskKind::Regression).unwrap();
        let t = train_cart(&ds, &CartParams::default(), 0).unwrap();
        assert_eq!(t.n_cells(), 1);
    }

    #[test]
    fn respects_leaf_budget_and_minimum() {
        let (train, _) = synth_subspace(200, 210, 0.1, 2).unwrap();
        for max_leaves in [2, 5, 12] {
            let params = CartParams {
                max_leaves,
                min_leaf: 7,
                feature_subsample: 1.0,
            };
            let p = train_cart(&train, &params, 1).unwrap();
            assert!(p.n_cells() <= max_leaves);
            let mut counts = vec![0; p.n_cells()];
            for x in train.features().outer_iter() {
                counts[p.assign(x)] += 1;
            }
            assert!(counts.iter().all(|&c| c >= 7), "{counts:?}");
        }
        let params = CartParams {
            max_leaves: 2,
            ..CartParams::default()
        };
        assert!(tree_of(&train_cart(&train, &params, 0).unwrap()).n_splits() <= 1);
    }

    #[test]
    fn rejects_tiny_data() {
        let ds = Dataset::unnamed(array![[0.0], [1.0], [2.0]], array![0.0, 1.0, 2.0], TaskKind::Regression).unwrap();
        let params = CartParams {
            max_leaves: 4,
            min_leaf: 2,
            feature_subsample: 1.0,
        };
        assert!(train_cart(&ds, &params, 0).is_err());
    }

    #[test]
    fn stump_routing() {
        let tree = Tree::from_validated(
            vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { cell: 0 },
                Node::Leaf { cell: 1 },
            ],
            2,
        );
        assert_eq!(tree.assign(array![-1.0, 5.0].view()), 0);
        assert_eq!(tree.assign(array![0.0, 5.0].view()), 0);
        assert_eq!(tree.assign(array![0.1, 5.0].view()), 1);
    }

    #[test]
    fn forests_are_deterministic() {
        let (train, _) = synth_subspace(150, 160, 0.1, 3).unwrap();
        let params = CartParams {
            max_leaves: 8,
            min_leaf: 3,
            feature_subsample: 0.5,
        };
        for mode in [ForestMode::Bagged, ForestMode::Boosted] {
            let a = make_forest(&train, 10, &params, mode, 0.3, 9).unwrap();
            let b = make_forest(&train, 10, &params, mode, 0.3, 9).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.n_partitions(), 10);
        }
        let bagged = make_forest(&train, 10, &params, ForestMode::Bagged, 0.0, 9).unwrap();
        assert!(bagged.partitions().windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn zero_learning_rate_repeats_the_first_tree() {
        let (train, _) = synth_subspace(120, 130, 0.1, 4).unwrap();
        let params = CartParams {
            max_leaves: 6,
            min_leaf: 4,
            feature_subsample: 1.0,
        };
        let pe = make_forest(&train, 5, &params, ForestMode::Boosted, 0.0, 2).unwrap();
        let first = &pe.partitions()[0];
        assert!(pe.partitions().iter().all(|p| p == first));
        let moving = make_forest(&train, 5, &params, ForestMode::Boosted, 0.5, 2).unwrap();
        assert!(moving.partitions().iter().skip(1).any(|p| p != &moving.partitions()[0]));
    }
}
