//! Partition ensembles: the fixed cell structures the leaf models live on.
//!
//! A [`Partition`] maps every point of `R^d` to exactly one of its cells,
//! either by nearest Voronoi center or by descending an axis-aligned tree
//! (`x[feature] <= threshold` goes left). A [`PartitionEnsemble`] stacks
//! `P` partitions and numbers their cells with flat indices
//! `offset[p] + c`.

mod design;
mod schema;
mod tree;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::rng;

pub use design::{design_matrix, design_matrix_with, DesignMatrix};
pub use schema::{export_json, import_trees, parse_json, to_json, PartitionFile, ROUTING_RULE};
pub use tree::{make_forest, train_cart, CartParams, ForestMode, Node, Tree};

#[derive(Debug, Clone, PartialEq)]
pub enum Partition {
    Voronoi { centers: Array2<f64> },
    Tree(Tree),
}

impl Partition {
    pub fn voronoi(centers: Array2<f64>) -> Result<Self> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(Error::invalid("Voronoi partition needs at least one center"));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Voronoi centers must be finite"));
        }
        Ok(Partition::Voronoi { centers })
    }

    pub fn n_cells(&self) -> usize {
        match self {
            Partition::Voronoi { centers } => centers.nrows(),
            Partition::Tree(t) => t.n_cells(),
        }
    }

    /// Cell of `x`. Voronoi ties go to the lowest center index.
    pub fn assign(&self, x: ArrayView1<'_, f64>) -> usize {
        match self {
            Partition::Voronoi { centers } => {
                let mut best = 0;
                let mut best_dist = f64::INFINITY;
                for (k, c) in centers.outer_iter().enumerate() {
                    let dist: f64 = c.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_dist {
                        best_dist = dist;
                        best = k;
                    }
                }
                best
            }
            Partition::Tree(t) => t.assign(x),
        }
    }

    /// Largest feature index this partition reads, plus one.
    fn min_features(&self) -> usize {
        match self {
            Partition::Voronoi { centers } => centers.ncols(),
            Partition::Tree(t) => t.max_feature().map_or(0, |j| j + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEnsemble {
    partitions: Vec<Partition>,
    n_features: usize,
    offsets: Vec<usize>,
}

impl PartitionEnsemble {
    pub fn new(partitions: Vec<Partition>, n_features: usize) -> Result<Self> {
        if partitions.is_empty() {
            return Err(Error::invalid("ensemble needs at least one partition"));
        }
        let mut offsets = Vec::with_capacity(partitions.len());
        let mut total = 0;
        for (p, part) in partitions.iter().enumerate() {
            if let Partition::Voronoi { centers } = part {
                check_dim("Voronoi center width", n_features, centers.ncols())?;
            } else if part.min_features() > n_features {
                return Err(Error::invalid(format!(
                    "partition {p} splits on feature {} but d = {n_features}",
                    part.min_features() - 1
                )));
            }
            offsets.push(total);
            total += part.n_cells();
        }
        Ok(PartitionEnsemble {
            partitions,
            n_features,
            offsets,
        })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn n_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn total_cells(&self) -> usize {
        self.offsets.last().unwrap() + self.partitions.last().unwrap().n_cells()
    }

    pub fn cell_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        self.partitions.iter().map(Partition::n_cells).collect()
    }

    pub fn flat_index(&self, p: usize, c: usize) -> usize {
        self.offsets[p] + c
    }

    /// Flat cell index of `x` in every partition, in partition order.
    pub fn assign_flat(&self, x: ArrayView1<'_, f64>, out: &mut Vec<usize>) {
        out.clear();
        out.extend(
            self.partitions
                .iter()
                .zip(&self.offsets)
                .map(|(part, off)| off + part.assign(x)),
        );
    }

    /// Per-partition training cell occupancy.
    pub fn occupancy(&self, x: ArrayView2<'_, f64>) -> Vec<Vec<usize>> {
        let mut counts: Vec<Vec<usize>> =
            self.partitions.iter().map(|p| vec![0; p.n_cells()]).collect();
        for row in x.outer_iter() {
            for (p, part) in self.partitions.iter().enumerate() {
                counts[p][part.assign(row)] += 1;
            }
        }
        counts
    }
}

/// Random Voronoi ensemble: each partition takes `cells_per_partition`
/// distinct rows of `ds`, drawn without replacement, as its centers.
pub fn make_voronoi(
    ds: &Dataset,
    n_partitions: usize,
    cells_per_partition: usize,
    seed: u64,
) -> Result<PartitionEnsemble> {
    let x = ds.features();
    let n = x.nrows();
    if n_partitions == 0 || cells_per_partition == 0 {
        return Err(Error::invalid("need at least one partition and one cell"));
    }
    if cells_per_partition > n {
        return Err(Error::invalid(format!(
            "{cells_per_partition} cells requested but only {n} points"
        )));
    }
    let mut partitions = Vec::with_capacity(n_partitions);
    for p in 0..n_partitions {
        let mut r = rng::stream(rng::derive_indexed(seed, "voronoi", p as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut chosen: Vec<usize> = Vec::with_capacity(cells_per_partition);
        for &i in &order {
            if chosen.len() == cells_per_partition {
                break;
            }
            if chosen.iter().all(|&k| x.row(k) != x.row(i)) {
                chosen.push(i);
            }
        }
        if chosen.len() < cells_per_partition {
            return Err(Error::invalid(format!(
                "only {} distinct points available for {cells_per_partition} centers",
                chosen.len()
            )));
        }
        partitions.push(Partition::voronoi(x.select(ndarray::Axis(0), &chosen))?);
    }
    PartitionEnsemble::new(partitions, ds.n_features())
}
