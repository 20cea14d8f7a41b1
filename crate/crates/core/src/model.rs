//! Fitted piecewise-linear models over a fixed partition ensemble:
//! configuration, fitting, prediction, feature selection and persistence.
//!
//! Partitions route on raw features. Leaf models see features standardized
//! with statistics of the training set, and the standardizer is stored with
//! the model.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MultitaskDataset, Standardizer, TaskKind};
use crate::error::{check_dim, Error, Result};
use crate::json;
use crate::objective::{build_laplacian, EnsembleObjective, LossKind, SmoothConfig};
use crate::partition::{design_matrix_with, parse_json, to_json, PartitionEnsemble};
use crate::prox::{
    effective_local, effective_local_adjoint, weight_view, DirtyLayout, DirtyProx, ProxConfig, WeightProx,
};
use crate::solver::{fit, fit_multitask, FitReport, NoPenalty, Proximal, SmoothFunction, SolverConfig, TaskTerm};

pub const MODEL_VERSION: u64 = 1;

/// Default threshold on standardized-scale row norms for feature selection.
pub const DEFAULT_SELECTION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafMode {
    #[default]
    Linear,
    /// Weights frozen at zero; only the per-cell biases are fitted.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplacianSpec {
    pub weight: f64,
    pub k_neighbors: usize,
    pub bandwidth: Option<f64>,
}

impl Default for LaplacianSpec {
    fn default() -> Self {
        LaplacianSpec {
            weight: 0.0,
            k_neighbors: 10,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub prox: ProxConfig,
    pub frobenius: f64,
    pub penalize_bias_frobenius: bool,
    pub laplacian: Option<LaplacianSpec>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            prox: ProxConfig::None,
            frobenius: 0.0,
            penalize_bias_frobenius: true,
            laplacian: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub leaf_mode: LeafMode,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl FitConfig {
    pub fn new(loss: LossKind) -> Self {
        FitConfig {
            loss,
            leaf_mode: LeafMode::Linear,
            penalty: PenaltyConfig::default(),
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty.prox.validate()?;
        self.solver.validate()?;
        if let Some(l) = &self.penalty.laplacian {
            if !(l.weight.is_finite() && l.weight > 0.0) {
                return Err(Error::invalid("Laplacian settings need a positive weight"));
            }
        }
        Ok(())
    }

    /// Smooth part for one task, with the Laplacian built on `values`.
    fn smooth_config(&self, values: ArrayView2<'_, f64>) -> Result<SmoothConfig> {
        let mut cfg = SmoothConfig::new(self.loss).with_frobenius(self.penalty.frobenius);
        cfg.penalize_bias_frobenius = self.penalty.penalize_bias_frobenius;
        if let Some(l) = &self.penalty.laplacian {
            cfg = cfg.with_laplacian(l.weight, build_laplacian(values, l.k_neighbors, l.bandwidth)?);
        }
        Ok(cfg)
    }
}

fn check_loss(kind: TaskKind, loss: LossKind) -> Result<()> {
    match (kind, loss) {
        (TaskKind::Regression, LossKind::Squared) | (TaskKind::Classification, LossKind::Logistic) => Ok(()),
        (TaskKind::Regression, _) => Err(Error::invalid("regression targets need the squared loss")),
        (TaskKind::Classification, _) => Err(Error::invalid("classification targets need the logistic loss")),
    }
}

/// Affine value of the active cells, summed over partitions.
fn evaluate(
    pe: &PartitionEnsemble,
    standardizer: &Standardizer,
    theta: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    let d = pe.n_features();
    check_dim("prediction features", d, x.ncols())?;
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite input at row {}, column {}",
            pos / d,
            pos % d
        )));
    }
    let block = d + 1;
    let mut cells = Vec::with_capacity(pe.n_partitions());
    let mut xs = vec![0.0; d];
    Ok(Array1::from_iter(x.outer_iter().map(|row| {
        pe.assign_flat(row, &mut cells);
        standardizer.transform_row(row, &mut xs);
        let mut total = 0.0;
        for &k in &cells {
            let base = k * block;
            for (i, v) in xs.iter().enumerate() {
                total += v * theta[base + i];
            }
            total += theta[base + d];
        }
        total
    })))
}

/// Zeroes the gradient of every weight coordinate, leaving biases free.
struct FrozenWeights<'a> {
    inner: &'a dyn SmoothFunction,
    block: usize,
}

impl SmoothFunction for FrozenWeights<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
        self.inner.value(theta)
    }

    fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        let (v, mut g) = self.inner.value_grad(theta);
        for (j, gj) in g.iter_mut().enumerate() {
            if j % self.block != self.block - 1 {
                *gj = 0.0;
            }
        }
        (v, g)
    }

    fn lipschitz_hint(&self, seed: u64) -> Option<f64> {
        self.inner.lipschitz_hint(seed)
    }
}

/// A model `f(x) = sum_p <w_{p,c(x)}, s(x)> + b_{p,c(x)}` over a fixed
/// partition ensemble, where `s` is the stored standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseModel {
    partitions: PartitionEnsemble,
    standardizer: Standardizer,
    feature_names: Vec<String>,
    task_kind: TaskKind,
    leaf_mode: LeafMode,
    loss: LossKind,
    penalty: PenaltyConfig,
    theta: Array1<f64>,
    train_target_mean: f64,
    fit_report: FitReport,
}

/// Fit leaf models on `train` over the fixed ensemble `pe`, starting from
/// all-zero parameters.
pub fn fit_model(train: &Dataset, pe: &PartitionEnsemble, cfg: &FitConfig) -> Result<PiecewiseModel> {
    cfg.validate()?;
    check_dim("partition features", train.n_features(), pe.n_features())?;
    check_loss(train.kind(), cfg.loss)?;
    let standardizer = Standardizer::fit(train.features());
    let values = standardizer.transform(train.features())?;
    // Constant leaves see all-zero features, so weight columns of the design
    // matrix vanish as well as their gradient.
    let z = match cfg.leaf_mode {
        LeafMode::Linear => design_matrix_with(pe, train.features(), values.view())?,
        LeafMode::Constant => design_matrix_with(pe, train.features(), Array2::zeros(values.dim()).view())?,
    };
    let objective = EnsembleObjective::new(cfg.smooth_config(values.view())?, z, train.targets().to_owned())?;
    let d = pe.n_features();
    let theta0 = Array1::zeros(objective.dim());

    let (theta, report) = match cfg.leaf_mode {
        LeafMode::Linear => {
            let prox = WeightProx::new(cfg.penalty.prox.clone(), d)?;
            fit(&objective, &prox, theta0.view(), &cfg.solver)
        }
        LeafMode::Constant => {
            let frozen = FrozenWeights { inner: &objective, block: d + 1 };
            fit(&frozen, &NoPenalty, theta0.view(), &cfg.solver)
        }
    }
    .map_err(|e| e.context("fitting leaf models"))?;

    Ok(PiecewiseModel {
        partitions: pe.clone(),
        standardizer,
        feature_names: train.feature_names().to_vec(),
        task_kind: train.kind(),
        leaf_mode: cfg.leaf_mode,
        loss: cfg.loss,
        penalty: cfg.penalty.clone(),
        theta,
        train_target_mean: train.target_mean(),
        fit_report: report,
    })
}

impl PiecewiseModel {
    pub fn partitions(&self) -> &PartitionEnsemble {
        &self.partitions
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn leaf_mode(&self) -> LeafMode {
        self.leaf_mode
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn penalty(&self) -> &PenaltyConfig {
        &self.penalty
    }

    pub fn fit_report(&self) -> &FitReport {
        &self.fit_report
    }

    pub fn train_target_mean(&self) -> f64 {
        self.train_target_mean
    }

    /// Stacked parameters, `(w_k, b_k)` per flat cell.
    pub fn theta(&self) -> ArrayView1<'_, f64> {
        self.theta.view()
    }

    /// Weight matrix, features by flat cells, on the standardized scale.
    pub fn weights(&self) -> Array2<f64> {
        weight_view(self.theta.view(), self.partitions.n_features())
            .expect("layout fixed at construction")
            .to_owned()
    }

    pub fn biases(&self) -> Array1<f64> {
        let d = self.partitions.n_features();
        self.theta.slice(s![d..;d + 1]).to_owned()
    }

    /// Same model with different parameters.
    pub fn with_theta(&self, theta: Array1<f64>) -> Result<Self> {
        check_dim("model parameters", self.theta.len(), theta.len())?;
        Ok(PiecewiseModel { theta, ..self.clone() })
    }

    /// Real-valued outputs `f(x)` for the rows of `x` (raw features).
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        evaluate(&self.partitions, &self.standardizer, self.theta.view(), x)
    }

    /// `sign(f(x))` with ties sent to +1.
    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.predict(x)?.mapv(sign_label))
    }

    /// Value of the non-smooth penalty at the fitted parameters.
    pub fn penalty_value(&self) -> Result<f64> {
        if self.leaf_mode == LeafMode::Constant {
            return Ok(0.0);
        }
        WeightProx::new(self.penalty.prox.clone(), self.partitions.n_features())?.penalty_value(self.theta.view())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_17(path, &self.to_doc()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_model(path)? {
            LoadedModel::Single(m) => Ok(m),
            LoadedModel::Multitask(_) => Err(Error::invalid("file holds a multitask model")),
        }
    }

    fn to_doc(&self) -> Result<ModelDoc> {
        check_finite(self.theta.view())?;
        Ok(ModelDoc {
            version: MODEL_VERSION,
            task_kind: self.task_kind,
            leaf_mode: self.leaf_mode,
            feature_names: self.feature_names.clone(),
            standardizer: self.standardizer.clone(),
            partitions: serde_json::to_value(to_json(&self.partitions))?,
            w: rows(self.weights().view()),
            b: self.biases().to_vec(),
            loss: self.loss,
            penalty: self.penalty.clone(),
            train_target_mean: TargetMeans::One(self.train_target_mean),
            fit_report: self.fit_report.clone(),
            multitask: None,
        })
    }
}

pub fn sign_label(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn check_finite(theta: ArrayView1<'_, f64>) -> Result<()> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("refusing to save non-finite parameters"));
    }
    Ok(())
}

fn rows(m: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Smooth term of one task in the dirty model. Its local coordinates are
/// `[common cells (w, b), T (w only)]`; the task sees `C + T`.
struct DirtyTaskSmooth {
    inner: EnsembleObjective,
    d: usize,
    cells: usize,
}

impl SmoothFunction for DirtyTaskSmooth {
    fn dim(&self) -> usize {
        self.cells * (2 * self.d + 1)
    }

    fn value(&self, local: ArrayView1<'_, f64>) -> f64 {
        self.inner.value(effective_local(local, self.d, self.cells).view())
    }

    fn value_grad(&self, local: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        let (v, g) = self.inner.value_grad(effective_local(local, self.d, self.cells).view());
        (v, effective_local_adjoint(g.view(), self.d, self.cells))
    }

    fn lipschitz_hint(&self, seed: u64) -> Option<f64> {
        // The local-to-effective map has squared operator norm 2.
        self.inner.lipschitz_hint(seed).map(|l| 2.0 * l)
    }
}

/// Dirty multitask model: task `t` predicts with weights `C_t + T_t` and its
/// own partition ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskModel {
    partitions: Vec<PartitionEnsemble>,
    standardizer: Standardizer,
    feature_names: Vec<String>,
    task_names: Vec<String>,
    task_kind: TaskKind,
    loss: LossKind,
    penalty: PenaltyConfig,
    layout: DirtyLayout,
    theta: Array1<f64>,
    train_target_means: Vec<f64>,
    fit_report: FitReport,
}

/// Fit the dirty model over per-task ensembles. The penalty must be
/// `dirty_lasso`; its task weights also weight each task's loss.
pub fn fit_multitask_model(
    mt: &MultitaskDataset,
    partitions: &[PartitionEnsemble],
    cfg: &FitConfig,
) -> Result<MultitaskModel> {
    cfg.validate()?;
    check_dim("per-task partition ensembles", mt.n_tasks(), partitions.len())?;
    if cfg.leaf_mode != LeafMode::Linear {
        return Err(Error::invalid("multitask fitting supports linear leaves only"));
    }
    let ProxConfig::DirtyLasso { task_weights, .. } = &cfg.penalty.prox else {
        return Err(Error::invalid(format!(
            "multitask fitting needs the dirty_lasso penalty, got {}",
            cfg.penalty.prox.name()
        )));
    };
    let d = mt.n_features();
    let kind = mt.tasks()[0].kind();
    for (t, (task, pe)) in mt.tasks().iter().zip(partitions).enumerate() {
        check_dim("partition features", d, pe.n_features()).map_err(|e| e.context(format!("task {t}")))?;
        if task.kind() != kind {
            return Err(Error::invalid("all tasks must share one target kind"));
        }
    }
    check_loss(kind, cfg.loss)?;

    let stacked = ndarray::concatenate(
        ndarray::Axis(0),
        &mt.tasks().iter().map(|t| t.features()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::invalid(e.to_string()))?;
    let standardizer = Standardizer::fit(stacked.view());

    let layout = DirtyLayout::new(d, partitions.iter().map(|p| p.total_cells()).collect())?;
    let prox = DirtyProx::new(layout.clone(), &cfg.penalty.prox)?;
    let mut smooths = Vec::with_capacity(mt.n_tasks());
    for (t, (task, pe)) in mt.tasks().iter().zip(partitions).enumerate() {
        let values = standardizer.transform(task.features())?;
        let z = design_matrix_with(pe, task.features(), values.view())?;
        let inner = EnsembleObjective::new(cfg.smooth_config(values.view())?, z, task.targets().to_owned())
            .map_err(|e| e.context(format!("task {t}")))?;
        smooths.push(DirtyTaskSmooth { inner, d, cells: pe.total_cells() });
    }
    let terms: Vec<TaskTerm<'_>> = smooths
        .iter()
        .enumerate()
        .map(|(t, s)| TaskTerm {
            smooth: s,
            weight: task_weights[t],
            indices: layout.task_indices(t),
        })
        .collect();
    let (theta, report) = fit_multitask(&terms, &prox, Array1::zeros(layout.len()).view(), &cfg.solver)
        .map_err(|e| e.context("fitting multitask model"))?;

    Ok(MultitaskModel {
        partitions: partitions.to_vec(),
        standardizer,
        feature_names: mt.feature_names().to_vec(),
        task_names: mt.task_names().to_vec(),
        task_kind: kind,
        loss: cfg.loss,
        penalty: cfg.penalty.clone(),
        layout,
        theta,
        train_target_means: mt.tasks().iter().map(|t| t.target_mean()).collect(),
        fit_report: report,
    })
}

impl MultitaskModel {
    pub fn n_tasks(&self) -> usize {
        self.partitions.len()
    }

    pub fn partitions(&self) -> &[PartitionEnsemble] {
        &self.partitions
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn penalty(&self) -> &PenaltyConfig {
        &self.penalty
    }

    pub fn layout(&self) -> &DirtyLayout {
        &self.layout
    }

    pub fn fit_report(&self) -> &FitReport {
        &self.fit_report
    }

    pub fn train_target_means(&self) -> &[f64] {
        &self.train_target_means
    }

    pub fn task_weights(&self) -> &[f64] {
        match &self.penalty.prox {
            ProxConfig::DirtyLasso { task_weights, .. } => task_weights,
            _ => unreachable!("multitask models always carry the dirty penalty"),
        }
    }

    pub fn theta(&self) -> ArrayView1<'_, f64> {
        self.theta.view()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|n| n == name)
    }

    /// Common weights, features by all tasks' cells.
    pub fn common(&self) -> Array2<f64> {
        self.layout.common_matrix(self.theta.view()).expect("layout fixed").to_owned()
    }

    /// Task-specific weights of task `t`.
    pub fn specific(&self, t: usize) -> Array2<f64> {
        self.layout.specific_matrix(self.theta.view(), t).expect("layout fixed").to_owned()
    }

    /// Stacked single-task parameters `C_t + T_t` with task `t`'s biases.
    pub fn task_theta(&self, t: usize) -> Array1<f64> {
        self.layout.effective_task_theta(self.theta.view(), t).expect("layout fixed")
    }

    /// Effective weights of every task side by side.
    pub fn effective_weights(&self) -> Array2<f64> {
        let mut w = self.common();
        for t in 0..self.n_tasks() {
            let cols = self.layout.task_columns(t);
            let mut block = w.slice_mut(s![.., cols]);
            block += &self.specific(t);
        }
        w
    }

    pub fn biases(&self) -> Array1<f64> {
        let d = self.layout.n_features();
        self.theta.slice(s![d..self.layout.common_len();d + 1]).to_owned()
    }

    pub fn predict(&self, t: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if t >= self.n_tasks() {
            return Err(Error::invalid(format!("task {t} out of range")));
        }
        evaluate(&self.partitions[t], &self.standardizer, self.task_theta(t).view(), x)
    }

    pub fn predict_labels(&self, t: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.predict(t, x)?.mapv(sign_label))
    }

    pub fn penalty_value(&self) -> Result<f64> {
        Ok(DirtyProx::new(self.layout.clone(), &self.penalty.prox)?.penalty(self.theta.view()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_17(path, &self.to_doc()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_model(path)? {
            LoadedModel::Multitask(m) => Ok(m),
            LoadedModel::Single(_) => Err(Error::invalid("file holds a single-task model")),
        }
    }

    fn to_doc(&self) -> Result<ModelDoc> {
        check_finite(self.theta.view())?;
        let partitions = self
            .partitions
            .iter()
            .map(|pe| serde_json::to_value(to_json(pe)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ModelDoc {
            version: MODEL_VERSION,
            task_kind: self.task_kind,
            leaf_mode: LeafMode::Linear,
            feature_names: self.feature_names.clone(),
            standardizer: self.standardizer.clone(),
            partitions: serde_json::Value::Array(partitions),
            w: rows(self.effective_weights().view()),
            b: self.biases().to_vec(),
            loss: self.loss,
            penalty: self.penalty.clone(),
            train_target_mean: TargetMeans::PerTask(self.train_target_means.clone()),
            fit_report: self.fit_report.clone(),
            multitask: Some(MultitaskDoc {
                c: rows(self.common().view()),
                t: (0..self.n_tasks()).map(|t| rows(self.specific(t).view())).collect(),
                gamma: self.task_weights().to_vec(),
                task_names: self.task_names.clone(),
            }),
        })
    }
}

/// Row norms and selected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub threshold: f64,
    pub feature_names: Vec<String>,
    /// Row norms of `W` (single task) or of the common matrix.
    pub row_norms: Vec<f64>,
    /// Row norms of each task-specific matrix; empty for single-task models.
    pub task_row_norms: Vec<Vec<f64>>,
    /// Features selected by `W` or by the common matrix.
    pub selected_common: Vec<usize>,
    /// Features selected only by each task-specific matrix.
    pub selected_task: Vec<Vec<usize>>,
}

impl FeatureReport {
    pub fn n_selected(&self) -> usize {
        self.selected_common.len() + self.selected_task.iter().map(Vec::len).sum::<usize>()
    }
}

fn row_norms(w: ArrayView2<'_, f64>) -> Vec<f64> {
    w.outer_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn above(norms: &[f64], threshold: f64) -> Vec<usize> {
    norms
        .iter()
        .enumerate()
        .filter(|&(_, &n)| n > threshold)
        .map(|(i, _)| i)
        .collect()
}

pub fn feature_report(m: &PiecewiseModel, threshold: f64) -> FeatureReport {
    let norms = row_norms(m.weights().view());
    FeatureReport {
        threshold,
        feature_names: m.feature_names.clone(),
        selected_common: above(&norms, threshold),
        row_norms: norms,
        task_row_norms: Vec::new(),
        selected_task: Vec::new(),
    }
}

/// Common features come from the common matrix; a task lists the features
/// selected by its specific matrix that are not already common.
pub fn multitask_feature_report(m: &MultitaskModel, threshold: f64) -> FeatureReport {
    let norms = row_norms(m.common().view());
    let common = above(&norms, threshold);
    let task_norms: Vec<Vec<f64>> = (0..m.n_tasks()).map(|t| row_norms(m.specific(t).view())).collect();
    let selected_task = task_norms
        .iter()
        .map(|n| above(n, threshold).into_iter().filter(|i| !common.contains(i)).collect())
        .collect();
    FeatureReport {
        threshold,
        feature_names: m.feature_names.clone(),
        row_norms: norms,
        task_row_norms: task_norms,
        selected_common: common,
        selected_task,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TargetMeans {
    One(f64),
    PerTask(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MultitaskDoc {
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    t: Vec<Vec<Vec<f64>>>,
    gamma: Vec<f64>,
    task_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u64,
    task_kind: TaskKind,
    leaf_mode: LeafMode,
    feature_names: Vec<String>,
    standardizer: Standardizer,
    partitions: serde_json::Value,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    loss: LossKind,
    penalty: PenaltyConfig,
    train_target_mean: TargetMeans,
    fit_report: FitReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    multitask: Option<MultitaskDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Single(PiecewiseModel),
    Multitask(MultitaskModel),
}

impl LoadedModel {
    pub fn feature_names(&self) -> &[String] {
        match self {
            LoadedModel::Single(m) => m.feature_names(),
            LoadedModel::Multitask(m) => m.feature_names(),
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self {
            LoadedModel::Single(m) => m.task_kind(),
            LoadedModel::Multitask(m) => m.task_kind(),
        }
    }
}

fn matrix(rows: &[Vec<f64>], d: usize, cols: usize, at: &str) -> Result<Array2<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::schema(at, format!("expected a {d} x {cols} matrix")));
    }
    let m = Array2::from_shape_vec((d, cols), rows.iter().flatten().copied().collect())
        .map_err(|e| Error::schema(at, e.to_string()))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::schema(at, "non-finite entry"));
    }
    Ok(m)
}

fn stack(w: ArrayView2<'_, f64>, b: &[f64]) -> Array1<f64> {
    let d = w.nrows();
    let mut theta = Array1::zeros(w.ncols() * (d + 1));
    for k in 0..w.ncols() {
        for i in 0..d {
            theta[k * (d + 1) + i] = w[[i, k]];
        }
        theta[k * (d + 1) + d] = b[k];
    }
    theta
}

/// Read a model file of either kind. The version is checked before the
/// rest of the schema.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let value = json::read_value(path)?;
    json::check_version(&value, MODEL_VERSION)?;
    let doc: ModelDoc = serde_path_to_error::deserialize(&value).map_err(|e| {
        let at = format!("$.{}", e.path());
        Error::schema(at, e.into_inner().to_string())
    })?;
    from_doc(doc).map_err(|e| e.context(format!("reading model {}", path.display())))
}

fn from_doc(doc: ModelDoc) -> Result<LoadedModel> {
    doc.standardizer.validate()?;
    let d = doc.feature_names.len();
    check_dim("standardizer features", d, doc.standardizer.n_features())?;
    match doc.multitask {
        None => {
            let pe = parse_json(&doc.partitions, d).map_err(|e| e.context("$.partitions"))?;
            let c = pe.total_cells();
            let w = matrix(&doc.w, d, c, "$.W")?;
            check_dim("bias vector", c, doc.b.len())?;
            if doc.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema("$.b", "non-finite entry"));
            }
            if doc.leaf_mode == LeafMode::Constant && w.iter().any(|&v| v != 0.0) {
                return Err(Error::schema("$.W", "constant-leaf models must have zero weights"));
            }
            let TargetMeans::One(mean) = doc.train_target_mean else {
                return Err(Error::schema("$.train_target_mean", "expected a number"));
            };
            Ok(LoadedModel::Single(PiecewiseModel {
                partitions: pe,
                standardizer: doc.standardizer,
                feature_names: doc.feature_names,
                task_kind: doc.task_kind,
                leaf_mode: doc.leaf_mode,
                loss: doc.loss,
                penalty: doc.penalty,
                theta: stack(w.view(), &doc.b),
                train_target_mean: mean,
                fit_report: doc.fit_report,
            }))
        }
        Some(mt) => {
            let docs = doc
                .partitions
                .as_array()
                .ok_or_else(|| Error::schema("$.partitions", "expected one partition file per task"))?;
            let partitions = docs
                .iter()
                .enumerate()
                .map(|(t, v)| parse_json(v, d).map_err(|e| e.context(format!("$.partitions[{t}]"))))
                .collect::<Result<Vec<_>>>()?;
            let n_tasks = partitions.len();
            check_dim("task names", n_tasks, mt.task_names.len())?;
            check_dim("task-specific matrices", n_tasks, mt.t.len())?;
            let TargetMeans::PerTask(means) = doc.train_target_mean else {
                return Err(Error::schema("$.train_target_mean", "expected one mean per task"));
            };
            check_dim("training means", n_tasks, means.len())?;
            let layout = DirtyLayout::new(d, partitions.iter().map(|p| p.total_cells()).collect())?;
            let ProxConfig::DirtyLasso { task_weights, .. } = &doc.penalty.prox else {
                return Err(Error::schema("$.penalty.prox", "multitask models need the dirty_lasso penalty"));
            };
            if *task_weights != mt.gamma {
                return Err(Error::schema("$.multitask.gamma", "does not match the penalty task weights"));
            }
            let total = layout.total_cells();
            let c = matrix(&mt.c, d, total, "$.multitask.C")?;
            check_dim("bias vector", total, doc.b.len())?;
            let mut theta = Array1::zeros(layout.len());
            theta.slice_mut(s![..layout.common_len()]).assign(&stack(c.view(), &doc.b));
            for t in 0..n_tasks {
                let cells = layout.task_cells()[t];
                let tm = matrix(&mt.t[t], d, cells, &format!("$.multitask.T[{t}]"))?;
                let range = layout.specific_range(t);
                let mut block = theta.slice_mut(s![range]);
                for k in 0..cells {
                    for i in 0..d {
                        block[k * d + i] = tm[[i, k]];
                    }
                }
            }
            let model = MultitaskModel {
                partitions,
                standardizer: doc.standardizer,
                feature_names: doc.feature_names,
                task_names: mt.task_names,
                task_kind: doc.task_kind,
                loss: doc.loss,
                penalty: doc.penalty,
                layout,
                theta,
                train_target_means: means,
                fit_report: doc.fit_report,
            };
            let w = matrix(&doc.w, d, total, "$.W")?;
            if w != model.effective_weights() {
                return Err(Error::schema("$.W", "does not equal C + T"));
            }
            Ok(LoadedModel::Multitask(model))
        }
    }
}
