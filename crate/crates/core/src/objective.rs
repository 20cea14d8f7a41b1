//! Smooth part of the objective: data loss, squared Frobenius penalty and
//! graph-Laplacian penalty, with exact gradients in the stacked parameters.
//!
//! With predictions `yhat = Z theta`:
//!
//! ```text
//! f(theta) = loss(y, yhat) + lambda_F ||theta_masked||^2 + lambda_L yhat' L yhat
//! ```
//!
//! where the squared loss is `mean(0.5 (y - yhat)^2)` and the logistic loss
//! is `mean(log(1 + exp(-y yhat)))`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::partition::DesignMatrix;
use crate::rng;
use crate::solver::SmoothFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Logistic,
}

impl LossKind {
    /// Upper bound on the second derivative of the per-sample loss.
    pub fn curvature_bound(self) -> f64 {
        match self {
            LossKind::Squared => 1.0,
            LossKind::Logistic => 0.25,
        }
    }
}

/// `log(1 + exp(-m))` without overflow.
fn log1p_exp_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// `1 / (1 + exp(m))`.
fn sigmoid_neg(m: f64) -> f64 {
    if m > 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

/// Mean loss and its gradient with respect to the predictions.
pub fn loss_value_grad(
    kind: LossKind,
    y: ArrayView1<'_, f64>,
    yhat: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    check_dim("loss predictions", y.len(), yhat.len())?;
    if kind == LossKind::Logistic {
        if let Some(i) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::invalid(format!(
                "logistic loss needs labels in {{-1, +1}}, got {} at {i}",
                y[i]
            )));
        }
    }
    Ok(loss_value_grad_unchecked(kind, y, yhat))
}

fn loss_value_grad_unchecked(
    kind: LossKind,
    y: ArrayView1<'_, f64>,
    yhat: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>) {
    let n = y.len() as f64;
    let mut grad = Array1::zeros(y.len());
    let mut value = 0.0;
    match kind {
        LossKind::Squared => {
            for i in 0..y.len() {
                let r = yhat[i] - y[i];
                value += 0.5 * r * r;
                grad[i] = r / n;
            }
        }
        LossKind::Logistic => {
            for i in 0..y.len() {
                let m = y[i] * yhat[i];
                value += log1p_exp_neg(m);
                grad[i] = -y[i] * sigmoid_neg(m) / n;
            }
        }
    }
    (value / n, grad)
}

fn loss_value(kind: LossKind, y: ArrayView1<'_, f64>, yhat: ArrayView1<'_, f64>) -> f64 {
    let n = y.len() as f64;
    let total: f64 = match kind {
        LossKind::Squared => y.iter().zip(yhat).map(|(a, b)| 0.5 * (b - a) * (b - a)).sum(),
        LossKind::Logistic => y.iter().zip(yhat).map(|(a, b)| log1p_exp_neg(a * b)).sum(),
    };
    total / n
}

/// Symmetric kNN graph with Gaussian weights and its Laplacian `L = D - K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianGraph {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    degree: Vec<f64>,
    bandwidth: f64,
    k_neighbors: usize,
}

impl LaplacianGraph {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len() / 2
    }

    /// `K_ij`, zero when `(i, j)` is not an edge.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b]
            .iter()
            .position(|&k| k == j)
            .map_or(0.0, |p| self.weights[a + p])
    }

    /// Neighbors of `i` with their kernel weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.weights[a..b].iter().copied())
    }

    /// `L v`.
    pub fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::from_iter((0..self.n).map(|i| {
            let off: f64 = self.neighbors(i).map(|(j, k)| k * v[j]).sum();
            self.degree[i] * v[i] - off
        }))
    }

    /// `v' L v`.
    pub fn quadratic(&self, v: ArrayView1<'_, f64>) -> f64 {
        self.apply(v).dot(&v)
    }
}

/// Build the graph on the rows of `x`: each point links to its
/// `k_neighbors` nearest points (ties to the lower index), an edge is kept if
/// either endpoint selects it, and `K_ij = exp(-|x_i - x_j|^2 / (2 h^2))`.
/// Without an explicit bandwidth, `h` is the median retained edge length.
pub fn build_laplacian(
    x: ArrayView2<'_, f64>,
    k_neighbors: usize,
    bandwidth: Option<f64>,
) -> Result<LaplacianGraph> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("Laplacian graph needs at least two points"));
    }
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::invalid(format!(
            "k_neighbors must lie in 1..{n}, got {k_neighbors}"
        )));
    }
    if let Some(h) = bandwidth {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
    }

    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        let xi = x.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let d2: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d2, j));
        }
        dist.select_nth_unstable_by(k_neighbors - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in &dist[..k_neighbors] {
            adjacency[i].push((j, d2));
            adjacency[j].push((i, d2));
        }
    }
    for list in &mut adjacency {
        list.sort_by_key(|&(j, _)| j);
        list.dedup_by_key(|&mut (j, _)| j);
    }

    let h = match bandwidth {
        Some(h) => h,
        None => {
            let mut lengths: Vec<f64> = adjacency
                .iter()
                .enumerate()
                .flat_map(|(i, l)| l.iter().filter(move |(j, _)| *j > i).map(|(_, d2)| d2.sqrt()))
                .collect();
            lengths.sort_by(f64::total_cmp);
            let m = lengths.len();
            let median = if m % 2 == 1 {
                lengths[m / 2]
            } else {
                0.5 * (lengths[m / 2 - 1] + lengths[m / 2])
            };
            if !(median > 0.0) {
                return Err(Error::invalid(
                    "median neighbor distance is zero; set the bandwidth explicitly",
                ));
            }
            median
        }
    };

    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    let mut degree = vec![0.0; n];
    indptr.push(0);
    for (i, list) in adjacency.iter().enumerate() {
        for &(j, d2) in list {
            let k = (-d2 / (2.0 * h * h)).exp();
            indices.push(j);
            weights.push(k);
            degree[i] += k;
        }
        indptr.push(indices.len());
    }
    Ok(LaplacianGraph {
        n,
        indptr,
        indices,
        weights,
        degree,
        bandwidth: h,
        k_neighbors,
    })
}

#[derive(Debug, Clone)]
pub struct SmoothConfig {
    pub loss: LossKind,
    pub frobenius_weight: f64,
    pub laplacian_weight: f64,
    pub laplacian: Option<LaplacianGraph>,
    pub penalize_bias_frobenius: bool,
}

impl SmoothConfig {
    pub fn new(loss: LossKind) -> Self {
        SmoothConfig {
            loss,
            frobenius_weight: 0.0,
            laplacian_weight: 0.0,
            laplacian: None,
            penalize_bias_frobenius: true,
        }
    }

    pub fn with_frobenius(mut self, weight: f64) -> Self {
        self.frobenius_weight = weight;
        self
    }

    pub fn with_laplacian(mut self, weight: f64, graph: LaplacianGraph) -> Self {
        self.laplacian_weight = weight;
        self.laplacian = Some(graph);
        self
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        for (name, w) in [
            ("frobenius_weight", self.frobenius_weight),
            ("laplacian_weight", self.laplacian_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {w}")));
            }
        }
        match (&self.laplacian, self.laplacian_weight > 0.0) {
            (Some(g), true) => check_dim("Laplacian graph nodes", n_rows, g.n_nodes()),
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::invalid("Laplacian graph given with zero weight")),
            (None, true) => Err(Error::invalid("positive Laplacian weight needs a graph")),
        }
    }

    fn frobenius_applies(&self, z: &DesignMatrix, j: usize) -> bool {
        self.penalize_bias_frobenius || !z.is_bias_column(j)
    }
}

fn check_inputs(cfg: &SmoothConfig, z: &DesignMatrix, y: ArrayView1<'_, f64>, theta: ArrayView1<'_, f64>) -> Result<()> {
    check_dim("parameter vector", z.n_cols(), theta.len())?;
    check_dim("targets", z.n_rows(), y.len())?;
    cfg.validate(z.n_rows())
}

/// Value and gradient of the smooth objective at `theta`.
pub fn smooth_value_grad(
    cfg: &SmoothConfig,
    z: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    check_inputs(cfg, z, y, theta)?;
    if cfg.loss == LossKind::Logistic && y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("logistic loss needs labels in {-1, +1}"));
    }
    Ok(value_grad_unchecked(cfg, z, y, theta))
}

fn value_grad_unchecked(
    cfg: &SmoothConfig,
    z: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>) {
    let yhat = z.matvec(theta);
    let (mut value, mut dyhat) = loss_value_grad_unchecked(cfg.loss, y, yhat.view());
    if let (Some(g), true) = (&cfg.laplacian, cfg.laplacian_weight > 0.0) {
        let ly = g.apply(yhat.view());
        value += cfg.laplacian_weight * ly.dot(&yhat);
        dyhat.scaled_add(2.0 * cfg.laplacian_weight, &ly);
    }
    let mut grad = z.tmatvec(dyhat.view());
    if cfg.frobenius_weight > 0.0 {
        let lf = cfg.frobenius_weight;
        for (j, (&t, g)) in theta.iter().zip(grad.iter_mut()).enumerate() {
            if cfg.frobenius_applies(z, j) {
                value += lf * t * t;
                *g += 2.0 * lf * t;
            }
        }
    }
    (value, grad)
}

fn value_unchecked(cfg: &SmoothConfig, z: &DesignMatrix, y: ArrayView1<'_, f64>, theta: ArrayView1<'_, f64>) -> f64 {
    let yhat = z.matvec(theta);
    let mut value = loss_value(cfg.loss, y, yhat.view());
    if let (Some(g), true) = (&cfg.laplacian, cfg.laplacian_weight > 0.0) {
        value += cfg.laplacian_weight * g.quadratic(yhat.view());
    }
    if cfg.frobenius_weight > 0.0 {
        let sq: f64 = theta
            .iter()
            .enumerate()
            .filter(|&(j, _)| cfg.frobenius_applies(z, j))
            .map(|(_, t)| t * t)
            .sum();
        value += cfg.frobenius_weight * sq;
    }
    value
}

/// Upper-bound estimate of the smooth gradient's Lipschitz constant: 20
/// power-iteration steps on `c Z'Z/N + 2 lambda_L Z'LZ` (with `c` the loss
/// curvature bound), plus `2 lambda_F`.
pub fn lipschitz_estimate(cfg: &SmoothConfig, z: &DesignMatrix, seed: u64) -> f64 {
    const STEPS: usize = 20;
    let n = z.n_rows().max(1) as f64;
    let curvature = cfg.loss.curvature_bound();
    let laplacian = cfg.laplacian.as_ref().filter(|_| cfg.laplacian_weight > 0.0);
    let hessian = |v: &Array1<f64>| -> Array1<f64> {
        let zv = z.matvec(v.view());
        let mut r = zv.mapv(|a| a * curvature / n);
        if let Some(g) = laplacian {
            r.scaled_add(2.0 * cfg.laplacian_weight, &g.apply(zv.view()));
        }
        z.tmatvec(r.view())
    };
    let mut r = rng::labeled(seed, "power-iteration");
    let mut v: Array1<f64> = Array1::from_shape_fn(z.n_cols(), |_| r.random_range(-1.0..1.0));
    let mut estimate = 0.0;
    for _ in 0..STEPS {
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            break;
        }
        v /= norm;
        let hv = hessian(&v);
        estimate = v.dot(&hv);
        v = hv;
    }
    estimate.max(0.0) + 2.0 * cfg.frobenius_weight
}

/// The smooth objective of one fitting problem, packaged for the solver.
#[derive(Debug, Clone)]
pub struct EnsembleObjective {
    cfg: SmoothConfig,
    z: DesignMatrix,
    y: Array1<f64>,
}

impl EnsembleObjective {
    pub fn new(cfg: SmoothConfig, z: DesignMatrix, y: Array1<f64>) -> Result<Self> {
        check_dim("targets", z.n_rows(), y.len())?;
        cfg.validate(z.n_rows())?;
        if cfg.loss == LossKind::Logistic && y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::invalid("logistic loss needs labels in {-1, +1}"));
        }
        Ok(EnsembleObjective { cfg, z, y })
    }

    pub fn config(&self) -> &SmoothConfig {
        &self.cfg
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.z
    }

    pub fn targets(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    /// Data loss alone (no penalties) at `theta`.
    pub fn loss(&self, theta: ArrayView1<'_, f64>) -> f64 {
        let yhat = self.z.matvec(theta);
        loss_value(self.cfg.loss, self.y.view(), yhat.view())
    }
}

impl SmoothFunction for EnsembleObjective {
    fn dim(&self) -> usize {
        self.z.n_cols()
    }

    fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
        value_unchecked(&self.cfg, &self.z, self.y.view(), theta)
    }

    fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        value_grad_unchecked(&self.cfg, &self.z, self.y.view(), theta)
    }

    fn lipschitz_hint(&self, seed: u64) -> Option<f64> {
        Some(lipschitz_estimate(&self.cfg, &self.z, seed))
    }
}
