//! Proximal operators for the group, nuclear-norm and dirty-model
//! penalties on the weight matrix `W` (features x cells).
//!
//! Biases are never penalized and pass through every operator unchanged.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::solver::Proximal;

/// Weight matrix view `W[i, k] = theta[k (d + 1) + i]` of a stacked
/// single-task parameter vector.
pub fn weight_view(theta: ArrayView1<'_, f64>, d: usize) -> Result<ArrayView2<'_, f64>> {
    let cells = cell_count(theta.len(), d)?;
    let blocks = theta
        .into_shape_with_order((cells, d + 1))
        .map_err(|e| Error::invalid(format!("parameter vector is not contiguous: {e}")))?;
    Ok(blocks.slice_move(s![.., ..d]).reversed_axes())
}

pub fn weight_view_mut(theta: &mut Array1<f64>, d: usize) -> Result<ArrayViewMut2<'_, f64>> {
    let cells = cell_count(theta.len(), d)?;
    let blocks = theta
        .view_mut()
        .into_shape_with_order((cells, d + 1))
        .map_err(|e| Error::invalid(format!("parameter vector is not contiguous: {e}")))?;
    Ok(blocks.slice_move(s![.., ..d]).reversed_axes())
}

/// Bias of every cell.
pub fn biases(theta: ArrayView1<'_, f64>, d: usize) -> Result<Array1<f64>> {
    cell_count(theta.len(), d)?;
    Ok(theta.slice(s![d..;d + 1]).to_owned())
}

fn cell_count(len: usize, d: usize) -> Result<usize> {
    if d == 0 || len % (d + 1) != 0 {
        return Err(Error::invalid(format!(
            "parameter length {len} is not a multiple of d + 1 = {}",
            d + 1
        )));
    }
    Ok(len / (d + 1))
}

/// Thin SVD `W = U diag(sigma) V'` with `r = min(d, C)` and singular values
/// in nonincreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub u: Array2<f64>,
    pub singular_values: Array1<f64>,
    pub v: Array2<f64>,
}

impl SpectralDecomposition {
    pub fn compute(w: ArrayView2<'_, f64>) -> Result<Self> {
        let (d, c) = w.dim();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Svd("matrix has non-finite entries".into()));
        }
        if d == 0 || c == 0 {
            return Ok(SpectralDecomposition {
                u: Array2::zeros((d, 0)),
                singular_values: Array1::zeros(0),
                v: Array2::zeros((c, 0)),
            });
        }
        if d >= c {
            let (u, sigma, v) = jacobi_svd(w.to_owned())?;
            Ok(SpectralDecomposition { u, singular_values: sigma, v })
        } else {
            let (v, sigma, u) = jacobi_svd(w.t().to_owned())?;
            Ok(SpectralDecomposition { u, singular_values: sigma, v })
        }
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U diag(sigma) V'` with the given singular values.
    pub fn reconstruct_with(&self, sigma: ArrayView1<'_, f64>) -> Array2<f64> {
        let scaled = &self.u * &sigma.insert_axis(Axis(0));
        scaled.dot(&self.v.t())
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.reconstruct_with(self.singular_values.view())
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided Jacobi SVD of a tall matrix `a` (m x n, m >= n): returns
/// `U` (m x n) with orthonormal columns, singular values in nonincreasing
/// order, and `V` (n x n) orthogonal with `a = U diag(s) V'`.
fn jacobi_svd(mut a: Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    // Work on a unit-scaled copy so tiny or huge entries neither underflow nor overflow.
    let scale = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale > 0.0 {
        a.mapv_inplace(|v| v / scale);
    }
    let mut v = Array2::<f64>::eye(n);
    let tol = f64::EPSILON * m as f64;
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (ap, aq) = (a.column(p), a.column(q));
                let alpha = ap.dot(&ap);
                let beta = aq.dot(&aq);
                let gamma = ap.dot(&aq);
                if gamma == 0.0 || gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_columns(&mut a, p, q, cs, sn);
                rotate_columns(&mut v, p, q, cs, sn);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Svd("Jacobi sweeps did not converge".into()));
    }

    let norms: Vec<f64> = a.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let largest = norms[order[0]];
    let cutoff = largest * f64::EPSILON * (m.max(n) as f64);
    let mut u = Array2::<f64>::zeros((m, n));
    let mut sigma = Array1::<f64>::zeros(n);
    let mut v_sorted = Array2::<f64>::zeros((n, n));
    let mut filled = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        v_sorted.column_mut(k).assign(&v.column(j));
        if norms[j] > cutoff && norms[j] > 0.0 {
            sigma[k] = norms[j] * scale;
            u.column_mut(k).assign(&(&a.column(j) / norms[j]));
            filled.push(k);
        }
    }
    // Complete U with an orthonormal basis for the null directions.
    let mut candidate = 0;
    for k in 0..n {
        if filled.contains(&k) {
            continue;
        }
        loop {
            if candidate >= m {
                return Err(Error::Svd("could not complete the left basis".into()));
            }
            let mut e = Array1::<f64>::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            for &f in &filled {
                let col = u.column(f);
                let proj = col.dot(&e);
                e.scaled_add(-proj, &col);
            }
            let norm = e.dot(&e).sqrt();
            if norm > 0.5 {
                u.column_mut(k).assign(&(e / norm));
                filled.push(k);
                break;
            }
        }
    }
    Ok((u, sigma, v_sorted))
}

fn rotate_columns(a: &mut Array2<f64>, p: usize, q: usize, cs: f64, sn: f64) {
    for mut row in a.rows_mut() {
        let (x, y) = (row[p], row[q]);
        row[p] = cs * x - sn * y;
        row[q] = sn * x + cs * y;
    }
}

/// Row-wise group shrinkage: `row * max(0, 1 - tau lambda / |row|)`.
pub fn prox_l21(w: ArrayView2<'_, f64>, tau: f64, lambda: f64) -> Array2<f64> {
    let mut out = w.to_owned();
    shrink_rows(out.view_mut(), tau * lambda);
    out
}

fn shrink_rows(mut w: ArrayViewMut2<'_, f64>, threshold: f64) {
    if threshold == 0.0 {
        return;
    }
    for mut row in w.rows_mut() {
        let norm = row.dot(&row).sqrt();
        let scale = if norm > threshold { 1.0 - threshold / norm } else { 0.0 };
        row.mapv_inplace(|v| v * scale);
    }
}

/// Singular value soft-thresholding by `tau lambda`.
pub fn prox_nuclear(w: ArrayView2<'_, f64>, tau: f64, lambda: f64) -> Result<Array2<f64>> {
    let threshold = tau * lambda;
    let svd = SpectralDecomposition::compute(w)?;
    if threshold == 0.0 {
        return Ok(svd.reconstruct());
    }
    let shrunk = svd.singular_values.mapv(|s| (s - threshold).max(0.0));
    Ok(svd.reconstruct_with(shrunk.view()))
}

/// Prox of `lambda_C |C|_{2,1} + sum_t gamma_t lambda_T |T_t|_{2,1}`.
/// The task matrices' columns must tile the columns of `cmat` in order.
pub fn prox_dirty_lasso(
    cmat: ArrayView2<'_, f64>,
    tmats: &[ArrayView2<'_, f64>],
    tau: f64,
    lambda_c: f64,
    lambda_t: f64,
    task_weights: &[f64],
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    check_dim("task weights", tmats.len(), task_weights.len())?;
    let mut cols = 0;
    for t in tmats {
        check_dim("task matrix rows", cmat.nrows(), t.nrows())?;
        cols += t.ncols();
    }
    if cols != cmat.ncols() {
        return Err(Error::invalid(format!(
            "task matrices cover {cols} columns but the common matrix has {}",
            cmat.ncols()
        )));
    }
    let c = prox_l21(cmat, tau, lambda_c);
    let ts = tmats
        .iter()
        .zip(task_weights)
        .map(|(t, &g)| prox_l21(*t, tau, g * lambda_t))
        .collect();
    Ok((c, ts))
}

/// Sum of row norms.
pub fn l21_norm(w: ArrayView2<'_, f64>) -> f64 {
    w.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
}

/// Sum of singular values.
pub fn nuclear_norm(w: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(SpectralDecomposition::compute(w)?.singular_values.sum())
}

/// Non-smooth penalty selection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxConfig {
    #[default]
    None,
    L21 { lambda: f64 },
    Nuclear { lambda: f64 },
    DirtyLasso { lambda_c: f64, lambda_t: f64, task_weights: Vec<f64> },
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be nonnegative, got {v}")))
            }
        };
        match self {
            ProxConfig::None => Ok(()),
            ProxConfig::L21 { lambda } | ProxConfig::Nuclear { lambda } => check("lambda", *lambda),
            ProxConfig::DirtyLasso { lambda_c, lambda_t, task_weights } => {
                check("lambda_c", *lambda_c)?;
                check("lambda_t", *lambda_t)?;
                if task_weights.is_empty() {
                    return Err(Error::invalid("dirty lasso needs at least one task weight"));
                }
                task_weights.iter().try_for_each(|&g| check("task weight", g))
            }
        }
    }

    pub fn is_multitask(&self) -> bool {
        matches!(self, ProxConfig::DirtyLasso { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProxConfig::None => "none",
            ProxConfig::L21 { .. } => "l21",
            ProxConfig::Nuclear { .. } => "nuclear",
            ProxConfig::DirtyLasso { .. } => "dirty_lasso",
        }
    }
}

/// Single-task penalty on the weight block of a stacked parameter vector.
#[derive(Debug, Clone)]
pub struct WeightProx {
    config: ProxConfig,
    n_features: usize,
}

impl WeightProx {
    pub fn new(config: ProxConfig, n_features: usize) -> Result<Self> {
        config.validate()?;
        if config.is_multitask() {
            return Err(Error::invalid("dirty lasso needs a multitask layout"));
        }
        if n_features == 0 {
            return Err(Error::invalid("weight prox needs at least one feature"));
        }
        Ok(WeightProx { config, n_features })
    }

    pub fn config(&self) -> &ProxConfig {
        &self.config
    }

    /// Penalty value on a stacked vector, propagating SVD failures.
    pub fn penalty_value(&self, theta: ArrayView1<'_, f64>) -> Result<f64> {
        let w = weight_view(theta, self.n_features)?;
        match &self.config {
            ProxConfig::None => Ok(0.0),
            ProxConfig::L21 { lambda } => Ok(lambda * l21_norm(w)),
            ProxConfig::Nuclear { lambda } => Ok(lambda * nuclear_norm(w)?),
            ProxConfig::DirtyLasso { .. } => unreachable!("rejected in new"),
        }
    }
}

impl Proximal for WeightProx {
    fn prox(&self, v: ArrayView1<'_, f64>, step: f64) -> Result<Array1<f64>> {
        let mut out = v.to_owned();
        let d = self.n_features;
        match &self.config {
            ProxConfig::None => {}
            ProxConfig::L21 { lambda } => shrink_rows(weight_view_mut(&mut out, d)?, step * lambda),
            ProxConfig::Nuclear { lambda } => {
                let shrunk = prox_nuclear(weight_view(v, d)?, step, *lambda)?;
                weight_view_mut(&mut out, d)?.assign(&shrunk);
            }
            ProxConfig::DirtyLasso { .. } => unreachable!("rejected in new"),
        }
        Ok(out)
    }

    fn penalty(&self, theta: ArrayView1<'_, f64>) -> f64 {
        self.penalty_value(theta).unwrap_or(f64::NAN)
    }
}

/// Parameter layout for the dirty model: first the common block, stacked
/// like a single-task vector over all tasks' cells (weights and biases),
/// then each task's specific weights `T_t` stored column-major by cell
/// (`d` values per cell, no biases).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirtyLayout {
    n_features: usize,
    task_cells: Vec<usize>,
    cell_offsets: Vec<usize>,
}

impl DirtyLayout {
    pub fn new(n_features: usize, task_cells: Vec<usize>) -> Result<Self> {
        if n_features == 0 || task_cells.is_empty() || task_cells.contains(&0) {
            return Err(Error::invalid("dirty layout needs d >= 1 and at least one cell per task"));
        }
        let mut cell_offsets = vec![0];
        for &c in &task_cells {
            cell_offsets.push(cell_offsets.last().unwrap() + c);
        }
        Ok(DirtyLayout { n_features, task_cells, cell_offsets })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_tasks(&self) -> usize {
        self.task_cells.len()
    }

    pub fn task_cells(&self) -> &[usize] {
        &self.task_cells
    }

    pub fn total_cells(&self) -> usize {
        *self.cell_offsets.last().unwrap()
    }

    /// Columns of the common matrix owned by task `t`.
    pub fn task_columns(&self, t: usize) -> Range<usize> {
        self.cell_offsets[t]..self.cell_offsets[t + 1]
    }

    pub fn common_len(&self) -> usize {
        self.total_cells() * (self.n_features + 1)
    }

    pub fn len(&self) -> usize {
        self.common_len() + self.total_cells() * self.n_features
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Slice of the stacked vector holding task `t`'s common cells.
    pub fn common_range(&self, t: usize) -> Range<usize> {
        let b = self.n_features + 1;
        self.cell_offsets[t] * b..self.cell_offsets[t + 1] * b
    }

    /// Slice of the stacked vector holding `T_t`.
    pub fn specific_range(&self, t: usize) -> Range<usize> {
        let d = self.n_features;
        let base = self.common_len();
        base + self.cell_offsets[t] * d..base + self.cell_offsets[t + 1] * d
    }

    /// Global indices of task `t`'s local vector `[common cells, T_t]`.
    pub fn task_indices(&self, t: usize) -> Vec<usize> {
        self.common_range(t).chain(self.specific_range(t)).collect()
    }

    pub fn common_matrix<'a>(&self, theta: ArrayView1<'a, f64>) -> Result<ArrayView2<'a, f64>> {
        check_dim("dirty parameter vector", self.len(), theta.len())?;
        weight_view(theta.slice_move(s![..self.common_len()]), self.n_features)
    }

    pub fn specific_matrix<'a>(&self, theta: ArrayView1<'a, f64>, t: usize) -> Result<ArrayView2<'a, f64>> {
        check_dim("dirty parameter vector", self.len(), theta.len())?;
        specific_view(theta.slice_move(s![self.specific_range(t)]), self.n_features)
    }

    /// Effective single-task parameters `C_t + T_t` for task `t`.
    pub fn effective_task_theta(&self, theta: ArrayView1<'_, f64>, t: usize) -> Result<Array1<f64>> {
        check_dim("dirty parameter vector", self.len(), theta.len())?;
        let local = Array1::from_iter(self.task_indices(t).into_iter().map(|i| theta[i]));
        Ok(effective_local(local.view(), self.n_features, self.task_cells[t]))
    }
}

fn specific_view(block: ArrayView1<'_, f64>, d: usize) -> Result<ArrayView2<'_, f64>> {
    let cells = block.len() / d;
    Ok(block
        .into_shape_with_order((cells, d))
        .map_err(|e| Error::invalid(format!("parameter vector is not contiguous: {e}")))?
        .reversed_axes())
}

/// Map a task-local vector `[common cells (d + 1 each), T (d each)]` to the
/// stacked single-task parameters of `C + T`.
pub fn effective_local(local: ArrayView1<'_, f64>, d: usize, cells: usize) -> Array1<f64> {
    let b = d + 1;
    let mut out = local.slice(s![..cells * b]).to_owned();
    let t = local.slice(s![cells * b..]);
    for k in 0..cells {
        for i in 0..d {
            out[k * b + i] += t[k * d + i];
        }
    }
    out
}

/// Adjoint of [`effective_local`]: gradient in local coordinates from the
/// gradient in effective coordinates.
pub fn effective_local_adjoint(grad: ArrayView1<'_, f64>, d: usize, cells: usize) -> Array1<f64> {
    let b = d + 1;
    let mut out = Array1::zeros(cells * (b + d));
    out.slice_mut(s![..cells * b]).assign(&grad);
    for k in 0..cells {
        for i in 0..d {
            out[cells * b + k * d + i] = grad[k * b + i];
        }
    }
    out
}

/// Dirty-model penalty on the stacked multitask vector.
#[derive(Debug, Clone)]
pub struct DirtyProx {
    layout: DirtyLayout,
    lambda_c: f64,
    lambda_t: f64,
    task_weights: Vec<f64>,
}

impl DirtyProx {
    pub fn new(layout: DirtyLayout, config: &ProxConfig) -> Result<Self> {
        config.validate()?;
        let ProxConfig::DirtyLasso { lambda_c, lambda_t, task_weights } = config else {
            return Err(Error::invalid(format!("multitask fitting needs the dirty_lasso penalty, got {}", config.name())));
        };
        check_dim("task weights", layout.n_tasks(), task_weights.len())?;
        Ok(DirtyProx {
            layout,
            lambda_c: *lambda_c,
            lambda_t: *lambda_t,
            task_weights: task_weights.clone(),
        })
    }

    pub fn layout(&self) -> &DirtyLayout {
        &self.layout
    }
}

impl Proximal for DirtyProx {
    fn prox(&self, v: ArrayView1<'_, f64>, step: f64) -> Result<Array1<f64>> {
        check_dim("dirty parameter vector", self.layout.len(), v.len())?;
        let d = self.layout.n_features;
        let mut out = v.to_owned();
        let common_len = self.layout.common_len();
        shrink_rows(weight_view_mut_slice(&mut out, 0..common_len, d)?, step * self.lambda_c);
        for t in 0..self.layout.n_tasks() {
            let range = self.layout.specific_range(t);
            let cells = self.layout.task_cells[t];
            let block = out
                .slice_mut(s![range])
                .into_shape_with_order((cells, d))
                .map_err(|e| Error::invalid(format!("parameter vector is not contiguous: {e}")))?;
            shrink_rows(block.reversed_axes(), step * self.task_weights[t] * self.lambda_t);
        }
        Ok(out)
    }

    fn penalty(&self, theta: ArrayView1<'_, f64>) -> f64 {
        let Ok(c) = self.layout.common_matrix(theta) else {
            return f64::NAN;
        };
        let mut total = self.lambda_c * l21_norm(c);
        for t in 0..self.layout.n_tasks() {
            let tm = self.layout.specific_matrix(theta, t).expect("length checked above");
            total += self.task_weights[t] * self.lambda_t * l21_norm(tm);
        }
        total
    }
}

fn weight_view_mut_slice(theta: &mut Array1<f64>, range: Range<usize>, d: usize) -> Result<ArrayViewMut2<'_, f64>> {
    let cells = cell_count(range.len(), d)?;
    Ok(theta
        .slice_mut(s![range])
        .into_shape_with_order((cells, d + 1))
        .map_err(|e| Error::invalid(format!("parameter vector is not contiguous: {e}")))?
        .slice_move(s![.., ..d])
        .reversed_axes())
}
