//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod oracles;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use plens::cli::{run_subspace, run_synth_mt, SubspaceConfig, SynthMtConfig};
use plens::dataset::{Dataset, MultitaskDataset, TaskKind};
use plens::model::{fit_model, fit_multitask_model, load_model, FitConfig, LeafMode, LoadedModel, PenaltyConfig};
use plens::objective::{build_laplacian, smooth_value_grad, LossKind, SmoothConfig};
use plens::partition::{design_matrix_with, make_forest, make_voronoi, parse_json, to_json, CartParams, ForestMode, PartitionEnsemble};
use plens::prox::{prox_dirty_lasso, prox_l21, prox_nuclear, ProxConfig};
use plens::rng;
use plens::solver::{FitReport, SolverConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

thread_local! {
    /// (fits checked, fits with an increasing step) over every fit below.
    static TRACES: RefCell<(usize, usize, f64)> = const { RefCell::new((0, 0, 0.0)) };
}

fn record_trace(report: &FitReport) {
    let worst = report
        .objective_trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    TRACES.with(|t| {
        let mut t = t.borrow_mut();
        t.0 += 1;
        if worst > 1e-12 {
            t.1 += 1;
        }
        t.2 = t.2.max(worst);
    });
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(r))
}

fn tight_solver() -> SolverConfig {
    SolverConfig { rel_tol: 1e-14, max_iters: 50_000, ..SolverConfig::default() }
}

fn random_regression(r: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let x = normal_matrix(r, n, d);
    let y = Array1::from_iter(x.rows().into_iter().map(|row| {
        row[0].sin() + 0.5 * row.iter().skip(1).sum::<f64>() + 0.3 * normal(r)
    }));
    Dataset::unnamed(x, y, TaskKind::Regression).unwrap()
}

fn train_mse(m: &plens::model::PiecewiseModel, ds: &Dataset) -> f64 {
    let p = m.predict(ds.features()).unwrap();
    (&p - &ds.targets()).mapv(|e| e * e).mean().unwrap()
}

// 1. Subspace experiment.
fn criterion_subspace() -> Outcome {
    let mut wins = 0;
    let mut aligned = 0;
    let mut slowest: f64 = 0.0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let start = Instant::now();
        let run = run_subspace(&SubspaceConfig { seed, ..SubspaceConfig::default() }).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        record_trace(run.frobenius_model.fit_report());
        record_trace(run.nuclear_model.fit_report());
        let o = &run.outcome;
        // The reported test MSE is recomputed from the held-out rows here.
        let nuc = train_mse(&run.nuclear_model, &run.test);
        let fro = train_mse(&run.frobenius_model, &run.test);
        assert!((nuc - o.nuclear.test_mse).abs() <= 1e-12 && (fro - o.frobenius.test_mse).abs() <= 1e-12);
        assert_eq!(run.test.n_samples() + run.train.n_samples(), 10_000);
        if nuc < fro {
            wins += 1;
        }
        if o.diagonal_cosine >= 0.95 {
            aligned += 1;
        }
        rows.push(format!("{seed}:{:.4}/{:.4}/{:.3}", nuc, fro, o.diagonal_cosine));
    }
    Outcome {
        pass: wins >= 9 && aligned >= 8 && slowest <= 60.0,
        detail: format!(
            "nuclear beats Frobenius on {wins}/10 seeds, |cos| >= 0.95 on {aligned}/10, slowest seed {slowest:.2}s [seed:nuclear/frobenius/cos {}]",
            rows.join(" ")
        ),
    }
}

// 2. Prox operators against a generic minimizer of the prox objective.
fn criterion_prox() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(rng::derive_seed(2, "acceptance-prox"));
    let mut worst = [0.0_f64; 3];
    for _ in 0..25 {
        let d = r.random_range(1..=6);
        let c = r.random_range(1..=8);
        let v = normal_matrix(&mut r, d, c);
        let tau = r.random_range(0.1..2.0);
        let lambda = r.random_range(0.1..1.5);
        let t = tau * lambda;

        let w = prox_l21(v.view(), tau, lambda);
        let ours = 0.5 * (&w - &v).mapv(|e| e * e).sum() + t * oracles::l21_norm(&w);
        let init = Array1::from_iter((0..d * (c + 1)).map(|_| normal(&mut r)));
        let reference = oracles::l21_prox_objective(&v, t, init);
        worst[0] = worst[0].max((ours - reference).abs());

        let w = prox_nuclear(v.view(), tau, lambda).unwrap();
        let ours = 0.5 * (&w - &v).mapv(|e| e * e).sum() + t * oracles::nuclear_norm(&w);
        let rank = d.min(c);
        let init = Array1::from_iter((0..(d + c) * rank).map(|_| normal(&mut r)));
        let reference = oracles::nuclear_prox_objective(&v, t, init);
        worst[1] = worst[1].max((ours - reference).abs());

        // Dirty lasso: a common matrix and three task matrices tiling its columns.
        let cols = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=2)];
        let total: usize = cols.iter().sum();
        let cm = normal_matrix(&mut r, d, total);
        let tms: Vec<Array2<f64>> = cols.iter().map(|&k| normal_matrix(&mut r, d, k)).collect();
        let gamma: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
        let lambda_t = r.random_range(0.1..1.5);
        let views: Vec<_> = tms.iter().map(|m| m.view()).collect();
        let (c_out, t_out) = prox_dirty_lasso(cm.view(), &views, tau, lambda, lambda_t, &gamma).unwrap();
        let mut ours = 0.5 * (&c_out - &cm).mapv(|e| e * e).sum() + tau * lambda * oracles::l21_norm(&c_out);
        let init = Array1::from_iter((0..d * (total + 1)).map(|_| normal(&mut r)));
        let mut reference = oracles::l21_prox_objective(&cm, tau * lambda, init);
        for ((tm, to), g) in tms.iter().zip(&t_out).zip(&gamma) {
            let ct = tau * g * lambda_t;
            ours += 0.5 * (to - tm).mapv(|e| e * e).sum() + ct * oracles::l21_norm(to);
            let init = Array1::from_iter((0..d * (tm.ncols() + 1)).map(|_| normal(&mut r)));
            reference += oracles::l21_prox_objective(tm, ct, init);
        }
        worst[2] = worst[2].max((ours - reference).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst.iter().all(|&w| w <= 1e-6) && secs <= 10.0,
        detail: format!(
            "25 instances each, max objective gap l21 {:.1e}, nuclear {:.1e}, dirty {:.1e}, {secs:.2}s",
            worst[0], worst[1], worst[2]
        ),
    }
}

// 3. Smooth gradient against central differences.
fn criterion_gradient() -> Outcome {
    let mut r = rng::stream(rng::derive_seed(3, "acceptance-gradient"));
    let mut worst: f64 = 0.0;
    let mut combos = std::collections::BTreeSet::new();
    for i in 0..20 {
        let loss = if i % 2 == 0 { LossKind::Squared } else { LossKind::Logistic };
        let frob = (i / 2) % 2 == 1;
        let lap = (i / 4) % 2 == 1;
        combos.insert((i % 2, frob, lap));
        let n = r.random_range(20..60);
        let d = r.random_range(1..=4);
        let x = normal_matrix(&mut r, n, d);
        let y = match loss {
            LossKind::Squared => Array1::from_iter((0..n).map(|_| normal(&mut r))),
            LossKind::Logistic => Array1::from_iter((0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })),
        };
        let kind = if loss == LossKind::Squared { TaskKind::Regression } else { TaskKind::Classification };
        let ds = Dataset::unnamed(x.clone(), y.clone(), kind).unwrap();
        let pe = make_voronoi(&ds, r.random_range(1..=3), r.random_range(2..=5), r.random()).unwrap();
        let z = design_matrix_with(&pe, x.view(), x.view()).unwrap();
        let mut cfg = SmoothConfig::new(loss);
        if frob {
            cfg = cfg.with_frobenius(r.random_range(0.01..1.0));
            cfg.penalize_bias_frobenius = r.random_bool(0.5);
        }
        if lap {
            cfg = cfg.with_laplacian(r.random_range(0.01..1.0), build_laplacian(x.view(), 5, None).unwrap());
        }
        let theta = Array1::from_iter((0..z.n_cols()).map(|_| 0.5 * normal(&mut r)));
        let (_, grad) = smooth_value_grad(&cfg, &z, y.view(), theta.view()).unwrap();
        let h = 1e-5;
        let fd = Array1::from_iter((0..theta.len()).map(|j| {
            let mut p = theta.clone();
            p[j] += h;
            let mut m = theta.clone();
            m[j] -= h;
            let fp = smooth_value_grad(&cfg, &z, y.view(), p.view()).unwrap().0;
            let fm = smooth_value_grad(&cfg, &z, y.view(), m.view()).unwrap().0;
            (fp - fm) / (2.0 * h)
        }));
        let diff = &grad - &fd;
        let rel = diff.dot(&diff).sqrt() / grad.dot(&grad).sqrt().max(1e-12);
        worst = worst.max(rel);
    }
    Outcome {
        pass: worst <= 1e-6 && combos.len() == 8,
        detail: format!("20 instances over {} loss/Frobenius/Laplacian combinations, max relative error {worst:.1e}", combos.len()),
    }
}

// 4. Ridge fit against the normal equations.
fn criterion_ridge() -> Outcome {
    let mut r = rng::stream(rng::derive_seed(4, "acceptance-ridge"));
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for _ in 0..10 {
        let n = r.random_range(60..=200);
        let d = r.random_range(1..=4);
        let ds = random_regression(&mut r, n, d);
        let cells = r.random_range(2..=12 / (d + 1) * 2);
        let lf = r.random_range(0.005..0.1);
        let bias = r.random_bool(0.5);
        // Unpenalized biases of two partitions can trade a constant, so the
        // minimizer is unique only with a single partition.
        let n_parts = if bias { r.random_range(1..=2) } else { 1 };
        let pe = make_voronoi(&ds, n_parts, cells, r.random()).unwrap();
        let cfg = FitConfig {
            penalty: PenaltyConfig { frobenius: lf, penalize_bias_frobenius: bias, ..Default::default() },
            solver: tight_solver(),
            ..FitConfig::new(LossKind::Squared)
        };
        let model = fit_model(&ds, &pe, &cfg).unwrap();
        record_trace(model.fit_report());
        let values = model.standardizer().transform(ds.features()).unwrap();
        let z = design_matrix_with(&pe, ds.features(), values.view()).unwrap().to_dense();
        let p = z.ncols();
        max_params = max_params.max(p);
        let nf = n as f64;
        let mut a = z.t().dot(&z) / nf;
        for j in 0..p {
            if bias || j % (d + 1) != d {
                a[[j, j]] += 2.0 * lf;
            }
        }
        let rhs = z.t().dot(&ds.targets()) / nf;
        let exact = oracles::solve_dense(a, rhs);
        let diff = &model.theta() - &exact;
        worst = worst.max(diff.dot(&diff).sqrt() / exact.dot(&exact).sqrt());
    }
    Outcome {
        pass: worst <= 1e-5 && max_params <= 60,
        detail: format!("10 instances (up to {max_params} parameters), max relative parameter error {worst:.1e}"),
    }
}

// 5. Constant leaves: global refinement and nested classes.
fn criterion_gr() -> Outcome {
    let mut r = rng::stream(rng::derive_seed(5, "acceptance-gr"));
    let mut bias_err: f64 = 0.0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..10 {
        let (n, d) = (r.random_range(80..200), r.random_range(1..=3));
        let ds = random_regression(&mut r, n, d);
        let constant = FitConfig { leaf_mode: LeafMode::Constant, solver: tight_solver(), ..FitConfig::new(LossKind::Squared) };
        let single = make_voronoi(&ds, 1, 1, r.random()).unwrap();
        let m = fit_model(&ds, &single, &constant).unwrap();
        record_trace(m.fit_report());
        let mean = ds.targets().sum() / ds.n_samples() as f64;
        bias_err = bias_err.max((m.biases()[0] - mean).abs());

        let pe = make_voronoi(&ds, r.random_range(1..=3), r.random_range(2..=5), r.random()).unwrap();
        let linear = FitConfig { solver: tight_solver(), ..FitConfig::new(LossKind::Squared) };
        let ml = fit_model(&ds, &pe, &linear).unwrap();
        let mc = fit_model(&ds, &pe, &constant).unwrap();
        record_trace(ml.fit_report());
        record_trace(mc.fit_report());
        worst_gap = worst_gap.max(train_mse(&ml, &ds) - train_mse(&mc, &ds));
    }
    Outcome {
        pass: bias_err <= 1e-8 && worst_gap <= 1e-9,
        detail: format!(
            "10 datasets, max |b - mean(y)| {bias_err:.1e}, max (linear - constant) training loss {worst_gap:.2e}"
        ),
    }
}

// 6. Multitask support recovery.
fn criterion_multitask() -> Outcome {
    let start = Instant::now();
    let mut passes = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let run = run_synth_mt(&SynthMtConfig { seed, ..SynthMtConfig::default() }).unwrap();
        let model = run.model.as_ref().unwrap();
        record_trace(model.fit_report());
        let cfg = &run.config;
        assert_eq!((cfg.tasks, cfg.features, cfg.n_per_task, cfg.threshold), (3, 20, 500, 1e-4));
        assert_eq!(cfg.common.len(), 2);
        assert!(cfg.specific.as_ref().unwrap().iter().all(|s| s.len() == 1));
        // Selection recomputed from the fitted matrices.
        let norms = |m: Array2<f64>| m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect::<Vec<_>>();
        let common_norms = norms(model.common());
        let common_ok = cfg.common.iter().all(|&j| common_norms[j] > cfg.threshold);
        let mut n_false = (0..20).filter(|j| !cfg.common.contains(j) && common_norms[*j] > cfg.threshold).count();
        let mut specific_ok = true;
        for (t, truth) in cfg.specific.as_ref().unwrap().iter().enumerate() {
            let tn = norms(model.specific(t));
            specific_ok &= truth.iter().all(|&j| tn[j] > cfg.threshold);
            n_false += (0..20)
                .filter(|j| !truth.contains(j) && !cfg.common.contains(j) && tn[*j] > cfg.threshold && common_norms[*j] <= cfg.threshold)
                .count();
        }
        let rec = run.recovery.as_ref().unwrap();
        assert_eq!(rec.n_false, n_false);
        let ok = common_ok && specific_ok && n_false <= 2;
        passes += usize::from(ok);
        rows.push(format!("{seed}:{}{}", if ok { "ok" } else { "miss" }, if n_false > 0 { format!("(+{n_false})") } else { String::new() }));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: passes >= 8 && secs <= 120.0,
        detail: format!("full recovery with <= 2 false features on {passes}/10 seeds in {secs:.1}s [{}]", rows.join(" ")),
    }
}

// 7. Monotone traces on every fit and the regularization-path property.
fn criterion_solver() -> Outcome {
    let mut r = rng::stream(rng::derive_seed(7, "acceptance-solver"));
    let exact = SolverConfig { rel_tol: 1e-10, max_iters: 50_000, ..SolverConfig::default() };
    let mut worst = [f64::NEG_INFINITY; 3];
    for _ in 0..5 {
        let (n, d) = (r.random_range(80..200), r.random_range(2..=5));
        let ds = random_regression(&mut r, n, d);
        let pe = make_voronoi(&ds, 2, r.random_range(3..=6), r.random()).unwrap();
        let l1 = r.random_range(0.002..0.03);
        let l2 = l1 * r.random_range(1.5..4.0);
        for (k, make) in [
            (0, (|l| ProxConfig::L21 { lambda: l }) as fn(f64) -> ProxConfig),
            (1, |l| ProxConfig::Nuclear { lambda: l }),
        ] {
            let fit_at = |l: f64| {
                let cfg = FitConfig {
                    penalty: PenaltyConfig { prox: make(l), ..Default::default() },
                    solver: exact,
                    ..FitConfig::new(LossKind::Squared)
                };
                let m = fit_model(&ds, &pe, &cfg).unwrap();
                record_trace(m.fit_report());
                let w = m.weights();
                if k == 0 { oracles::l21_norm(&w) } else { oracles::nuclear_norm(&w) }
            };
            worst[k] = worst[k].max(fit_at(l2) - fit_at(l1));
        }

        // Dirty lasso with both weights scaled together.
        let tasks: Vec<Dataset> = (0..2).map(|_| random_regression(&mut r, 120, ds.n_features())).collect();
        let mt = MultitaskDataset::new(tasks, vec![1.0, 1.5], vec!["a".into(), "b".into()]).unwrap();
        let pes: Vec<PartitionEnsemble> = mt.tasks().iter().map(|t| make_voronoi(t, 1, 4, r.random()).unwrap()).collect();
        let ratio = r.random_range(0.5..1.5);
        let fit_at = |l: f64| {
            let cfg = FitConfig {
                penalty: PenaltyConfig {
                    prox: ProxConfig::DirtyLasso { lambda_c: l, lambda_t: ratio * l, task_weights: vec![1.0, 1.5] },
                    ..Default::default()
                },
                solver: exact,
                ..FitConfig::new(LossKind::Squared)
            };
            let m = fit_multitask_model(&mt, &pes, &cfg).unwrap();
            record_trace(m.fit_report());
            oracles::l21_norm(&m.common())
                + ratio * (0..2).map(|t| [1.0, 1.5][t] * oracles::l21_norm(&m.specific(t))).sum::<f64>()
        };
        worst[2] = worst[2].max(fit_at(l2) - fit_at(l1));
    }
    let (n, bad, worst_rise) = TRACES.with(|t| *t.borrow());
    Outcome {
        pass: bad == 0 && n > 0 && worst.iter().all(|&w| w <= 1e-6),
        detail: format!(
            "{n} fits with monotone traces ({bad} violations, largest increase {worst_rise:.1e}); penalty(lambda2) - penalty(lambda1) max l21 {:.1e}, nuclear {:.1e}, dirty {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    }
}

// 8. Determinism and round trips.
fn strip_wall_time(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_time_s");
            m.values_mut().for_each(strip_wall_time);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

fn cli(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_plens")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "plens {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    match serde_json::from_str::<Value>(&text) {
        Ok(mut v) => {
            strip_wall_time(&mut v);
            v.to_string()
        }
        Err(_) => text,
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.is_dir() {
            for (k, v) in files(&path) {
                out.insert(format!("{}/{k}", entry.file_name().to_string_lossy()), v);
            }
        } else {
            out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    out
}

const SCRIPT: &[&[&str]] = &[
    &["synth-subspace", "--seed", "3", "--out-dir", "sub"],
    &["synth-mt", "--seed", "4", "--out-dir", "mt"],
    &["partition", "--data", "sub/train.csv", "--method", "voronoi", "--partitions", "3", "--cells", "5", "--seed", "1", "--out", "vor.json"],
    &["partition", "--data", "sub/train.csv", "--method", "cart-bag", "--partitions", "4", "--seed", "1", "--feature-subsample", "0.5", "--out", "bag.json"],
    &["partition", "--data", "sub/train.csv", "--method", "cart-boost", "--partitions", "4", "--seed", "1", "--out", "boost.json"],
    &["partition", "--method", "import", "--in", "boost.json", "--out", "boost2.json"],
    &["fit", "--data", "sub/train.csv", "--partitions", "bag.json", "--model", "l21.json", "--penalty", "l21", "--lambda", "0.01", "--laplacian", "0.05"],
    &["fit", "--data", "sub/train.csv", "--partitions", "vor.json", "--model", "nuc.json", "--penalty", "nuclear", "--lambda", "0.01", "--frobenius", "1e-3"],
    &["fit", "--data", "sub/train.csv", "--partitions", "boost.json", "--model", "gr.json", "--leaf-mode", "constant"],
    &["fit-mt", "--data", "mt/task0.csv,mt/task1.csv,mt/task2.csv", "--model", "mtm.json", "--seed", "2"],
    &["predict", "--model", "l21.json", "--data", "sub/test.csv", "--out", "pred.csv"],
    &["predict", "--model", "mtm.json", "--data", "mt/task2.csv", "--task", "task2"],
    &["eval", "--model", "nuc.json", "--data", "sub/test.csv"],
    &["eval", "--model", "mtm.json", "--data", "mt/task0.csv", "--task", "0"],
    &["features", "--model", "l21.json"],
    &["features", "--model", "mtm.json", "--threshold", "1e-4"],
];

fn criterion_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut mismatched = Vec::new();
    for args in SCRIPT {
        let a = cli(dirs[0].path(), args);
        let b = cli(dirs[1].path(), args);
        if a != b {
            mismatched.push(args[0].to_string());
        }
    }
    let (fa, fb) = (files(dirs[0].path()), files(dirs[1].path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();

    // Save/load: identical predictions on random inputs.
    let mut r = rng::stream(rng::derive_seed(8, "acceptance-roundtrip"));
    let mut pred_mismatch = 0;
    for name in ["l21.json", "nuc.json", "gr.json", "mtm.json"] {
        let path = dirs[0].path().join(name);
        let loaded = load_model(&path).unwrap();
        let x = normal_matrix(&mut r, 1000, loaded.feature_names().len()) * 2.0;
        let (before, after) = match &loaded {
            LoadedModel::Single(m) => {
                let again = dirs[0].path().join(format!("re-{name}"));
                m.save(&again).unwrap();
                pred_mismatch += usize::from(fs::read(&again).unwrap() != fs::read(&path).unwrap());
                (m.predict(x.view()).unwrap(), load_model(&again).unwrap())
            }
            LoadedModel::Multitask(m) => {
                let again = dirs[0].path().join(format!("re-{name}"));
                m.save(&again).unwrap();
                pred_mismatch += usize::from(fs::read(&again).unwrap() != fs::read(&path).unwrap());
                (m.predict(1, x.view()).unwrap(), load_model(&again).unwrap())
            }
        };
        let after = match &after {
            LoadedModel::Single(m) => m.predict(x.view()).unwrap(),
            LoadedModel::Multitask(m) => m.predict(1, x.view()).unwrap(),
        };
        pred_mismatch += before.iter().zip(&after).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    // Also an in-memory model against its saved copy.
    let ds = random_regression(&mut r, 150, 3);
    let pe = make_forest(&ds, 5, &CartParams::default(), ForestMode::Boosted, 0.1, 5).unwrap();
    let model = fit_model(&ds, &pe, &FitConfig::new(LossKind::Squared)).unwrap();
    record_trace(model.fit_report());
    let path = dirs[0].path().join("mem.json");
    model.save(&path).unwrap();
    let x = normal_matrix(&mut r, 1000, 3) * 2.0;
    let LoadedModel::Single(loaded) = load_model(&path).unwrap() else { panic!("single-task model expected") };
    let (p0, p1) = (model.predict(x.view()).unwrap(), loaded.predict(x.view()).unwrap());
    pred_mismatch += p0.iter().zip(&p1).filter(|(a, b)| a.to_bits() != b.to_bits()).count();

    // Partition export/import: routing agreement on random points.
    let mut route_mismatch = 0;
    let ensembles = [
        make_voronoi(&ds, 3, 7, 1).unwrap(),
        make_forest(&ds, 4, &CartParams::default(), ForestMode::Bagged, 0.1, 2).unwrap(),
        pe,
    ];
    let pts = normal_matrix(&mut r, 10_000, 3) * 2.0;
    for e in &ensembles {
        let text = serde_json::to_string(&to_json(e)).unwrap();
        let back = parse_json(&serde_json::from_str(&text).unwrap(), 3).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for row in pts.axis_iter(Axis(0)) {
            e.assign_flat(row, &mut a);
            back.assign_flat(row, &mut b);
            route_mismatch += usize::from(a != b);
        }
    }
    Outcome {
        pass: mismatched.is_empty() && differing.is_empty() && pred_mismatch == 0 && route_mismatch == 0,
        detail: format!(
            "{} CLI runs repeated, stdout mismatches {:?}, differing files {:?}; save/load prediction mismatches {pred_mismatch} over 5000 inputs; routing mismatches {route_mismatch} over 3 x 10^4 points",
            SCRIPT.len(),
            mismatched,
            differing
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("subspace: nuclear vs Frobenius", criterion_subspace),
        ("prox operators vs numerical minimizer", criterion_prox),
        ("gradient vs finite differences", criterion_gradient),
        ("ridge vs normal equations", criterion_ridge),
        ("constant leaves: mean and nested classes", criterion_gr),
        ("multitask support recovery", criterion_multitask),
        ("solver invariants", criterion_solver),
        ("determinism and round trips", criterion_determinism),
    ];
    // Criterion 7 reports on every fit, so it runs after the others.
    // `PLENS_ACCEPTANCE=2,4` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("PLENS_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse::<usize>().ok()).map(|n| n - 1).collect());
    let order: Vec<usize> = [0, 1, 2, 3, 4, 5, 7, 6]
        .into_iter()
        .filter(|i| only.as_ref().is_none_or(|o| o.contains(i)))
        .collect();
    let mut results: Vec<Option<(bool, String)>> = vec![None; 8];
    for &i in &order {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(criteria[i].1));
        let secs = start.elapsed().as_secs_f64();
        results[i] = Some(match res {
            Ok(o) => (o.pass, format!("{} ({secs:.1}s)", o.detail)),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        });
    }
    let mut failed = 0;
    for (i, res) in results.iter().enumerate() {
        let Some((pass, detail)) = res else { continue };
        failed += usize::from(!pass);
        println!("criterion {} [{}] {}: {}", i + 1, if *pass { "PASS" } else { "FAIL" }, criteria[i].0, detail);
    }
    println!("acceptance: {}/{} criteria passed", order.len() - failed, order.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
