use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::PartitionEnsemble;
use crate::dataset::Dataset;
use crate::error::{check_dim, Result};

/// Sparse design matrix in compressed row form.
///
/// For an ensemble over `d` features, flat cell `k` owns the column block
/// `[k(d+1), k(d+1)+d]`: the first `d` columns hold the point's features and
/// the last holds the constant 1. Each row activates one block per
/// partition, so `Z theta` evaluates the ensemble with parameters stacked as
/// `(w_k, b_k)` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    block_width: Option<usize>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl DesignMatrix {
    /// Arbitrary dense matrix, stored sparsely. Used for tests and generic
    /// least-squares problems.
    pub fn from_dense(m: ArrayView2<'_, f64>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in m.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        DesignMatrix {
            n_rows: m.nrows(),
            n_cols: m.ncols(),
            block_width: None,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `d + 1` for ensemble design matrices; `None` for generic ones, whose
    /// columns are all treated as weights.
    pub fn block_width(&self) -> Option<usize> {
        self.block_width
    }

    /// Whether column `j` is a cell's bias column.
    pub fn is_bias_column(&self, j: usize) -> bool {
        self.block_width.is_some_and(|b| j % b == b - 1)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values stored for row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// `Z v`.
    pub fn matvec(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        debug_assert_eq!(v.len(), self.n_cols);
        Array1::from_iter((0..self.n_rows).map(|i| {
            let (idx, val) = self.row(i);
            idx.iter().zip(val).map(|(&j, &z)| z * v[j]).sum::<f64>()
        }))
    }

    /// `Z^T r`.
    pub fn tmatvec(&self, r: ArrayView1<'_, f64>) -> Array1<f64> {
        debug_assert_eq!(r.len(), self.n_rows);
        let mut out = Array1::zeros(self.n_cols);
        for i in 0..self.n_rows {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (&j, &z) in idx.iter().zip(val) {
                out[j] += z * ri;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_rows, self.n_cols));
        for i in 0..self.n_rows {
            let (idx, val) = self.row(i);
            for (&j, &z) in idx.iter().zip(val) {
                m[[i, j]] += z;
            }
        }
        m
    }
}

/// Design matrix routing each row of `routing` through `pe` and filling the
/// active blocks with the matching row of `values`. The two inputs differ
/// when partitions route on raw features but the leaf models see
/// standardized ones.
pub fn design_matrix_with(
    pe: &PartitionEnsemble,
    routing: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
) -> Result<DesignMatrix> {
    let d = pe.n_features();
    check_dim("design matrix routing features", d, routing.ncols())?;
    check_dim("design matrix value features", d, values.ncols())?;
    check_dim("design matrix rows", routing.nrows(), values.nrows())?;
    let n = routing.nrows();
    let block = d + 1;
    let per_row = pe.n_partitions() * block;
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n * per_row);
    let mut vals = Vec::with_capacity(n * per_row);
    indptr.push(0);
    let mut cells = Vec::with_capacity(pe.n_partitions());
    for (route, x) in routing.outer_iter().zip(values.outer_iter()) {
        pe.assign_flat(route, &mut cells);
        for &k in &cells {
            let base = k * block;
            for (i, &v) in x.iter().enumerate() {
                indices.push(base + i);
                vals.push(v);
            }
            indices.push(base + d);
            vals.push(1.0);
        }
        indptr.push(indices.len());
    }
    Ok(DesignMatrix {
        n_rows: n,
        n_cols: pe.total_cells() * block,
        block_width: Some(block),
        indptr,
        indices,
        values: vals,
    })
}

pub fn design_matrix(pe: &PartitionEnsemble, ds: &Dataset) -> Result<DesignMatrix> {
    design_matrix_with(pe, ds.features(), ds.features())
}
