//! Tabular datasets: CSV loading, splitting, standardization, and the
//! synthetic generators used by the experiments and tests.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Features, targets and column names. Classification targets are stored as
/// -1/+1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Array1<f64>,
    feature_names: Vec<String>,
    kind: TaskKind,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        targets: Array1<f64>,
        feature_names: Vec<String>,
        kind: TaskKind,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if d == 0 {
            return Err(Error::invalid("dataset has no feature columns"));
        }
        check_dim("targets", n, targets.len())?;
        check_dim("feature names", d, feature_names.len())?;
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate feature name `{name}`")));
            }
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                row: row + 1,
                column: feature_names[col].clone(),
                message: "non-finite feature value".into(),
            });
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite target at row {}", i + 1)));
        }
        if kind == TaskKind::Classification {
            if let Some(i) = targets.iter().position(|&v| v != -1.0 && v != 1.0) {
                return Err(Error::invalid(format!(
                    "classification target {} at row {} is not -1 or +1",
                    targets[i],
                    i + 1
                )));
            }
        }
        Ok(Dataset {
            features,
            targets,
            feature_names,
            kind,
        })
    }

    /// Dataset with generated names `x0, x1, ...`.
    pub fn unnamed(features: Array2<f64>, targets: Array1<f64>, kind: TaskKind) -> Result<Self> {
        let names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, targets, names, kind)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn targets(&self) -> ArrayView1<'_, f64> {
        self.targets.view()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
            self.feature_names.clone(),
            self.kind,
        )
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Dataset> {
        Dataset::new(
            features,
            self.targets.clone(),
            self.feature_names.clone(),
            self.kind,
        )
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.mean().unwrap_or(0.0)
    }
}

/// Datasets for T tasks sharing one feature space.
#[derive(Debug, Clone)]
pub struct MultitaskDataset {
    tasks: Vec<Dataset>,
    task_weights: Vec<f64>,
    task_names: Vec<String>,
}

impl MultitaskDataset {
    pub fn new(tasks: Vec<Dataset>, task_weights: Vec<f64>, task_names: Vec<String>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("multitask dataset needs at least one task"));
        }
        check_dim("task weights", tasks.len(), task_weights.len())?;
        check_dim("task names", tasks.len(), task_names.len())?;
        if let Some(w) = task_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!("task weight {w} must be positive")));
        }
        let names = tasks[0].feature_names();
        for (t, task) in tasks.iter().enumerate().skip(1) {
            if task.feature_names() != names {
                return Err(Error::invalid(format!(
                    "task {t} does not share the feature columns of task 0"
                )));
            }
        }
        Ok(MultitaskDataset {
            tasks,
            task_weights,
            task_names,
        })
    }

    pub fn tasks(&self) -> &[Dataset] {
        &self.tasks
    }

    pub fn task_weights(&self) -> &[f64] {
        &self.task_weights
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_features(&self) -> usize {
        self.tasks[0].n_features()
    }

    pub fn feature_names(&self) -> &[String] {
        self.tasks[0].feature_names()
    }
}

fn parse_label(raw: f64, row: usize, column: &str) -> Result<f64> {
    match raw {
        v if v == 0.0 || v == -1.0 => Ok(-1.0),
        v if v == 1.0 => Ok(1.0),
        v => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("label {v} is not one of 0, 1, -1, +1"),
        }),
    }
}

/// Load a headed, comma-separated file. Row numbers in errors count data
/// rows from 1.
pub fn load_csv(path: &Path, target_column: &str, kind: TaskKind) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_string()))?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        check_dim("CSV record width", header.len(), record.len())?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: header[j].clone(),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            if j == target_idx {
                targets.push(match kind {
                    TaskKind::Regression => v,
                    TaskKind::Classification => parse_label(v, row, &header[j])?,
                });
            } else {
                values.push(v);
            }
        }
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, names.len()), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Dataset::new(features, Array1::from(targets), names, kind)
}

/// Load the named columns of a headed CSV file, in the given order. Other
/// columns are ignored.
pub fn load_columns(path: &Path, columns: &[String]) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let positions = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::MissingColumn(c.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        check_dim("CSV record width", header.len(), record.len())?;
        for &j in &positions {
            let cell = &record[j];
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: header[j].clone(),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: header[j].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, columns.len()), values).map_err(|e| Error::invalid(e.to_string()))
}

/// Write features followed by the target column. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(ds: &Dataset, path: &Path, target_column: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(target_column);
    writer.write_record(&header)?;
    for (row, y) in ds.features.outer_iter().zip(ds.targets.iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        writer.write_record(&rec)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 0.8 / 0.1 / 0.1.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("split fractions must be nonnegative"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// (train, val, test) sizes: val and test are rounded, train takes the
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_val = (n as f64 * self.val_frac).round() as usize;
        let n_test = (n as f64 * self.test_frac).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        (n_train, n_val, n_test)
    }
}

/// Shuffled (train, val, test) index sets.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.sizes(n);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
        return Err(Error::invalid(format!(
            "split of {n} rows leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::labeled(spec.seed, "split"));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok((idx, val, test))
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, val, test) = split_indices(ds.n_samples(), spec)?;
    Ok((ds.select(&train)?, ds.select(&val)?, ds.select(&test)?))
}

/// Per-column centering and scaling with the population (1/N) standard
/// deviation. Constant columns keep std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            means: vec![0.0; d],
            stds: vec![1.0; d],
        }
    }

    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            means.push(mean);
            stds.push(if std > f64::EPSILON * mean.abs() && std > 0.0 {
                std
            } else {
                1.0
            });
        }
        Standardizer { means, stds }
    }

    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("standardizer features", self.means.len(), x.ncols())?;
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn transform_row(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (j, v) in x.iter().enumerate() {
            out[j] = (v - self.means[j]) / self.stds[j];
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("standardizer stds", self.means.len(), self.stds.len())?;
        if self.stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("standardizer stds must be positive"));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("standardizer means must be finite"));
        }
        Ok(())
    }
}

pub fn fit_standardizer(ds: &Dataset) -> Standardizer {
    Standardizer::fit(ds.features())
}

pub fn transform(s: &Standardizer, ds: &Dataset) -> Result<Dataset> {
    ds.with_features(s.transform(ds.features())?)
}

/// `sin(pi (x1 + x2))`.
pub fn subspace_signal(x1: f64, x2: f64) -> f64 {
    (PI * (x1 + x2)).sin()
}

/// Points uniform on `[-1, 1]^2` with targets `sin(pi (x1 + x2)) + noise`.
/// Returns the first `n_train` points and the remaining ones.
pub fn synth_subspace(
    n_train: usize,
    n_total: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= n_total {
        return Err(Error::invalid(format!(
            "need 0 < n_train < n_total, got {n_train} and {n_total}"
        )));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be nonnegative"));
    }
    let mut r = rng::labeled(seed, "synth-subspace");
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut x = Array2::zeros((n_total, 2));
    let mut y = Array1::zeros(n_total);
    for i in 0..n_total {
        let x1 = r.random_range(-1.0..=1.0);
        let x2 = r.random_range(-1.0..=1.0);
        x[[i, 0]] = x1;
        x[[i, 1]] = x2;
        let eps = if noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
        y[i] = subspace_signal(x1, x2) + eps;
    }
    let all = Dataset::unnamed(x, y, TaskKind::Regression)?;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n_total).collect();
    Ok((all.select(&train)?, all.select(&test)?))
}

/// One `sin(<a, x_S>)` term of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineForm {
    pub features: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// Recipe of a `synth_multitask_sparse` draw, written next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskRecipe {
    pub n_tasks: usize,
    pub n_features: usize,
    pub n_per_task: usize,
    pub seed: u64,
    pub common: Vec<usize>,
    pub specific: Vec<Vec<usize>>,
    pub noise_std: f64,
    pub feature_distribution: String,
    pub forms: Vec<Vec<SineForm>>,
}

impl MultitaskRecipe {
    /// Noise-free target of task `t` at `x`.
    pub fn signal(&self, t: usize, x: ArrayView1<'_, f64>) -> f64 {
        self.forms[t]
            .iter()
            .map(|f| {
                let z: f64 = f
                    .features
                    .iter()
                    .zip(&f.coefficients)
                    .map(|(&j, a)| a * x[j])
                    .sum();
                z.sin()
            })
            .sum()
    }
}

const MT_NOISE_STD: f64 = 0.1;

/// Multitask regression fixture with known common and task-specific
/// supports. Features are uniform on `[-1, 1]^d`. With
/// `S = common ∪ specific[t]`, task `t` has target
/// `sum_{j in S} sin(a_j x_j) + sin(<c, x_S>) + noise`, where
/// `|a_j|` is in `[1, 1.5]` and `|c_j|` in `[0.5, 1]` with random signs.
/// The univariate terms keep every support feature visibly relevant.
pub fn synth_multitask_sparse(
    n_tasks: usize,
    d: usize,
    common: &[usize],
    specific: &[Vec<usize>],
    n_per_task: usize,
    seed: u64,
) -> Result<(MultitaskDataset, MultitaskRecipe)> {
    if n_tasks == 0 {
        return Err(Error::invalid("need at least one task"));
    }
    if n_per_task == 0 {
        return Err(Error::invalid("n_per_task must be positive"));
    }
    check_dim("specific feature sets", n_tasks, specific.len())?;
    for &j in common.iter().chain(specific.iter().flatten()) {
        if j >= d {
            return Err(Error::invalid(format!("feature index {j} out of range for d={d}")));
        }
    }
    for (t, spec) in specific.iter().enumerate() {
        if let Some(j) = spec.iter().find(|j| common.contains(j)) {
            return Err(Error::invalid(format!(
                "feature {j} is both common and specific to task {t}"
            )));
        }
    }

    let noise = Normal::new(0.0, MT_NOISE_STD).expect("valid normal");
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut forms = Vec::with_capacity(n_tasks);
    for (t, spec) in specific.iter().enumerate() {
        let mut r = rng::stream(rng::derive_indexed(seed, "synth-mt-task", t as u64));
        let mut support: Vec<usize> = common.iter().chain(spec.iter()).copied().collect();
        support.sort_unstable();
        support.dedup();
        let mut signed = |lo: f64, hi: f64| {
            let mag = r.random_range(lo..=hi);
            if r.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let mut task_forms: Vec<SineForm> = support
            .iter()
            .map(|&j| SineForm { features: vec![j], coefficients: vec![signed(1.0, 1.5)] })
            .collect();
        task_forms.push(SineForm {
            features: support.clone(),
            coefficients: support.iter().map(|_| signed(0.5, 1.0)).collect(),
        });
        let x = Array2::from_shape_fn((n_per_task, d), |_| r.random_range(-1.0..=1.0));
        forms.push(task_forms);
        tasks.push(x);
    }

    let mut recipe = MultitaskRecipe {
        n_tasks,
        n_features: d,
        n_per_task,
        seed,
        common: common.to_vec(),
        specific: specific.to_vec(),
        noise_std: MT_NOISE_STD,
        feature_distribution: "uniform[-1,1]".into(),
        forms,
    };
    recipe.common.sort_unstable();

    let mut datasets = Vec::with_capacity(n_tasks);
    for (t, x) in tasks.into_iter().enumerate() {
        let mut r = rng::stream(rng::derive_indexed(seed, "synth-mt-noise", t as u64));
        let y = Array1::from_iter(
            x.outer_iter()
                .map(|row| recipe.signal(t, row) + noise.sample(&mut r)),
        );
        datasets.push(Dataset::unnamed(x, y, TaskKind::Regression)?);
    }
    let names = (0..n_tasks).map(|t| format!("task{t}")).collect();
    let mt = MultitaskDataset::new(datasets, vec![1.0; n_tasks], names)?;
    Ok((mt, recipe))
}
