//! Reference computations written independently of the library.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs())).unwrap();
        if p != k {
            for j in 0..n {
                a.swap([k, j], [p, j]);
            }
            b.swap(k, p);
        }
        let pivot = a[[k, k]];
        assert!(pivot.abs() > 1e-300, "singular system");
        for i in k + 1..n {
            let f = a[[i, k]] / pivot;
            if f != 0.0 {
                for j in k..n {
                    a[[i, j]] -= f * a[[k, j]];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = Array1::zeros(n);
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s -= a[[k, j]] * x[j];
        }
        x[k] = s / a[[k, k]];
    }
    x
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[[i, i]].powi(2)).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]] == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

/// Sum of singular values from the eigenvalues of the smaller Gram matrix.
pub fn nuclear_norm(w: &Array2<f64>) -> f64 {
    let gram = if w.nrows() <= w.ncols() { w.dot(&w.t()) } else { w.t().dot(w) };
    symmetric_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).sum()
}

pub fn l21_norm(w: &Array2<f64>) -> f64 {
    w.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
}

/// Accelerated gradient descent with backtracking and function-value
/// restart. Returns the best point and its value.
pub fn minimize(f: impl Fn(&Array1<f64>) -> (f64, Array1<f64>), x0: Array1<f64>, max_iters: usize) -> (Array1<f64>, f64) {
    let mut x = x0.clone();
    let mut y = x0;
    let (mut fx, _) = f(&x);
    let mut t = 1.0_f64;
    let mut step = 1.0;
    // Stop once a window of iterations gains nothing measurable.
    let mut window_start = fx;
    for k in 0..max_iters {
        if k % 500 == 499 {
            if window_start - fx <= 1e-15 * fx.abs().max(1.0) {
                break;
            }
            window_start = fx;
        }
        let (fy, gy) = f(&y);
        let gnorm2 = gy.dot(&gy);
        if gnorm2 < 1e-26 {
            if fy < fx {
                x = y.clone();
                fx = fy;
            }
            break;
        }
        let mut cand;
        let mut fc;
        loop {
            cand = &y - &(step * &gy);
            fc = f(&cand).0;
            if fc <= fy - 0.5 * step * gnorm2 || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        if fc > fx {
            // Restart from the best point.
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &cand + &((t - 1.0) / t_next * (&cand - &x));
        x = cand;
        fx = fc;
        t = t_next;
        step *= 1.5;
    }
    (x, fx)
}

/// Minimum of `0.5 |W - V|^2 + c |W|_*` over the factorization
/// `W = A B'`, using `|W|_* = min 0.5 (|A|^2 + |B|^2)`.
pub fn nuclear_prox_objective(v: &Array2<f64>, c: f64, init: Array1<f64>) -> f64 {
    let (d, k) = v.dim();
    let r = d.min(k);
    let unpack = |z: &Array1<f64>| {
        let a = Array2::from_shape_vec((d, r), z.slice(ndarray::s![..d * r]).to_vec()).unwrap();
        let b = Array2::from_shape_vec((k, r), z.slice(ndarray::s![d * r..]).to_vec()).unwrap();
        (a, b)
    };
    let f = |z: &Array1<f64>| {
        let (a, b) = unpack(z);
        let res = a.dot(&b.t()) - v;
        let value = 0.5 * res.mapv(|e| e * e).sum() + 0.5 * c * (z.dot(z));
        let ga = res.dot(&b) + c * &a;
        let gb = res.t().dot(&a) + c * &b;
        let mut g = ga.into_raw_vec_and_offset().0;
        g.extend(gb.into_raw_vec_and_offset().0);
        (value, Array1::from(g))
    };
    assert_eq!(init.len(), (d + k) * r);
    minimize(f, init, 200_000).1
}

/// Minimum of `0.5 |W - V|^2 + c |W|_{2,1}` over `W = diag(a) B`, using
/// `|w| = min 0.5 (a^2 + |b|^2)` subject to `w = a b`.
pub fn l21_prox_objective(v: &Array2<f64>, c: f64, init: Array1<f64>) -> f64 {
    let (d, k) = v.dim();
    let f = |z: &Array1<f64>| {
        let a = z.slice(ndarray::s![..d]);
        let b = Array2::from_shape_vec((d, k), z.slice(ndarray::s![d..]).to_vec()).unwrap();
        let mut res = b.clone();
        for (j, mut row) in res.rows_mut().into_iter().enumerate() {
            row *= a[j];
        }
        res -= v;
        let value = 0.5 * res.mapv(|e| e * e).sum() + 0.5 * c * z.dot(z);
        let mut g = Vec::with_capacity(z.len());
        for j in 0..d {
            g.push(res.row(j).dot(&b.row(j)) + c * a[j]);
        }
        for j in 0..d {
            for i in 0..k {
                g.push(a[j] * res[[j, i]] + c * b[[j, i]]);
            }
        }
        (value, Array1::from(g))
    };
    assert_eq!(init.len(), d * (k + 1));
    minimize(f, init, 200_000).1
}
