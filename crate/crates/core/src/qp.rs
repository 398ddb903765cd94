//! Convex quadratic programs over the probability simplex.
//!
//! Solves `min ½ wᵀHw + cᵀw  s.t. Σw = 1, w ≥ 0` with a Mehrotra
//! predictor-corrector primal-dual interior point method, then polishes the
//! result by solving the equality-constrained problem on the detected
//! support. The polished point is kept only if it passes the KKT check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Tolerance on the scaled KKT residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub w: Vec<f64>,
    /// `½ wᵀHw + cᵀw` at the returned point (original scale).
    pub objective: f64,
    pub iterations: usize,
    /// Scaled KKT residual at the returned point.
    pub residual: f64,
}

/// Minimizes `½ wᵀHw + cᵀw` over the simplex. `h` must be symmetric PSD.
pub fn solve_simplex_qp(h: &DMatrix<f64>, c: &DVector<f64>, opts: QpOptions) -> Result<QpSolution> {
    solve_simplex_qp_from(h, c, opts, &[])
}

/// Like [`solve_simplex_qp`], but first tries the support `hint` (e.g. from a
/// nearby problem). The guess is accepted only if it passes the KKT check;
/// otherwise the interior point method runs as usual.
pub fn solve_simplex_qp_from(h: &DMatrix<f64>, c: &DVector<f64>, opts: QpOptions, hint: &[usize]) -> Result<QpSolution> {
    let n = c.len();
    if n == 0 || h.nrows() != n || h.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "QP dimension mismatch: H is {}x{}, c has {n} entries",
            h.nrows(),
            h.ncols()
        )));
    }
    if !h.as_slice().iter().chain(c.as_slice()).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("QP data must be finite".into()));
    }
    if n == 1 {
        let w = vec![1.0];
        return Ok(QpSolution {
            objective: 0.5 * h[(0, 0)] + c[0],
            w,
            iterations: 0,
            residual: 0.0,
        });
    }

    // Rescale so the problem is O(1); the minimizer is unchanged.
    let scale = {
        let d = h.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let g = c.amax();
        let s = d.max(g);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let hs = h / scale;
    let cs = c / scale;

    if !hint.is_empty() && hint.iter().all(|&i| i < n) {
        if let Some(wp) = solve_on_support(&hs, &cs, hint.to_vec(), n, true) {
            let r = kkt_residual(&hs, &cs, &wp);
            if r <= opts.tol {
                return Ok(finish(h, c, wp, 0, r));
            }
        }
    }

    let ipm = interior_point(&hs, &cs, opts);
    let (w_ipm, iterations, ipm_res) = ipm;

    let mut best: Option<(Vec<f64>, f64)> = None;
    if let Some(wp) = polish(&hs, &cs, &w_ipm, opts.tol) {
        let r = kkt_residual(&hs, &cs, &wp);
        if r <= opts.tol {
            best = Some((wp, r));
        }
    }
    let (w, residual) = match best {
        Some(b) => b,
        None => {
            if ipm_res > opts.tol {
                return Err(Error::SolverNonConvergence {
                    iterations,
                    residual: ipm_res,
                });
            }
            (clamp_simplex(w_ipm), ipm_res)
        }
    };
    Ok(finish(h, c, w, iterations, residual))
}

/// Re-solves a closely related problem (typically the same one without a
/// conditioning ridge) starting from the support of `w`. The refined point
/// is returned only if it passes the KKT check and does not raise the
/// objective.
pub fn refine(h: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], tol: f64) -> Option<QpSolution> {
    let n = c.len();
    if w.len() != n {
        return None;
    }
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&i| w[i] > 1e-6 * wmax).collect();
    let after = solve_from_support(h, c, &support, tol)?;
    let before = finish(h, c, w.to_vec(), 0, 0.0).objective;
    (after.objective <= before).then_some(after)
}

/// Active-set solve started from `support`, returned only if the result
/// passes the KKT check. Any KKT point is a global minimizer, so no
/// fallback comparison is needed.
pub fn solve_from_support(h: &DMatrix<f64>, c: &DVector<f64>, support: &[usize], tol: f64) -> Option<QpSolution> {
    let n = c.len();
    if n < 2 || h.nrows() != n || h.ncols() != n || support.is_empty() || support.iter().any(|&i| i >= n) {
        return None;
    }
    let scale = h.diagonal().iter().map(|v| v.abs()).fold(c.amax(), f64::max);
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let (hs, cs) = (h / scale, c / scale);
    let wp = solve_on_support(&hs, &cs, support.to_vec(), n, true)?;
    let r = kkt_residual(&hs, &cs, &wp);
    (r <= tol).then(|| finish(h, c, wp, 0, r))
}

fn finish(h: &DMatrix<f64>, c: &DVector<f64>, w: Vec<f64>, iterations: usize, residual: f64) -> QpSolution {
    let g = gradient(h, c, &w);
    // ½wᵀHw + cᵀw = ½wᵀ(Hw + c) + ½cᵀw
    let objective = 0.5
        * w.iter()
            .zip(g.iter().zip(c.iter()))
            .map(|(wi, (gi, ci))| wi * (gi + ci))
            .sum::<f64>();
    QpSolution {
        w,
        objective,
        iterations,
        residual,
    }
}

/// Projects tiny negative round-off to zero and renormalizes to sum one.
pub(crate) fn clamp_simplex(mut w: Vec<f64>) -> Vec<f64> {
    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for v in w.iter_mut() {
            *v /= s;
        }
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    w
}

/// Dense row-major Cholesky factorization in place; false if not PD.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn interior_point(h: &DMatrix<f64>, c: &DVector<f64>, opts: QpOptions) -> (Vec<f64>, usize, f64) {
    let n = c.len();
    let nf = n as f64;
    let hr: Vec<f64> = (0..n * n).map(|idx| h[(idx / n, idx % n)]).collect();
    let c: Vec<f64> = c.iter().copied().collect();
    let mut w = vec![1.0 / nf; n];
    let mut z = vec![1.0; n];
    let mut y = 0.0;
    let cnorm = 1.0 + c.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut m = vec![0.0; n * n];
    let mut rd = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut u = vec![0.0; n];
    let (mut dw_a, mut dz_a) = (vec![0.0; n], vec![0.0; n]);
    let (mut dw, mut dz) = (vec![0.0; n], vec![0.0; n]);
    let mut rxz = vec![0.0; n];

    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iter {
        let mut rd_max = 0.0f64;
        for i in 0..n {
            let hw: f64 = (0..n).map(|j| hr[i * n + j] * w[j]).sum();
            rd[i] = hw + c[i] - y - z[i];
            rd_max = rd_max.max(rd[i].abs());
        }
        let rp = w.iter().sum::<f64>() - 1.0;
        let mu = w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / nf;
        residual = (rd_max / cnorm).max(rp.abs()).max(mu);
        if residual <= opts.tol {
            break;
        }
        it += 1;

        m.copy_from_slice(&hr);
        for i in 0..n {
            m[i * n + i] += z[i] / w[i];
        }
        if !cholesky_in_place(&mut m, n) {
            break;
        }
        v.iter_mut().for_each(|x| *x = 1.0);
        cholesky_solve(&m, n, &mut v);
        let vsum: f64 = v.iter().sum();

        let mut newton = |rxz: &[f64], dw: &mut [f64], dz: &mut [f64]| {
            for i in 0..n {
                u[i] = -rd[i] + rxz[i] / w[i];
            }
            cholesky_solve(&m, n, &mut u);
            let dy = (-rp - u.iter().sum::<f64>()) / vsum;
            for i in 0..n {
                dw[i] = u[i] + v[i] * dy;
                dz[i] = (rxz[i] - z[i] * dw[i]) / w[i];
            }
            dy
        };

        // predictor
        for i in 0..n {
            rxz[i] = -w[i] * z[i];
        }
        newton(&rxz, &mut dw_a, &mut dz_a);
        let a_aff = step_to_boundary(&w, &dw_a).min(step_to_boundary(&z, &dz_a));
        let mu_aff = (0..n).map(|i| (w[i] + a_aff * dw_a[i]) * (z[i] + a_aff * dz_a[i])).sum::<f64>() / nf;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // corrector
        for i in 0..n {
            rxz[i] = -w[i] * z[i] + sigma * mu - dw_a[i] * dz_a[i];
        }
        let dy = newton(&rxz, &mut dw, &mut dz);
        let alpha = (0.99 * step_to_boundary(&w, &dw).min(step_to_boundary(&z, &dz))).min(1.0);
        for i in 0..n {
            w[i] += alpha * dw[i];
            z[i] += alpha * dz[i];
        }
        y += alpha * dy;
    }
    (w, it, residual)
}

fn step_to_boundary(x: &[f64], dx: &[f64]) -> f64 {
    let mut a = 1.0f64;
    for (xi, di) in x.iter().zip(dx.iter()) {
        if *di < 0.0 {
            a = a.min(-xi / di);
        }
    }
    a
}

/// Solves the equality-constrained QP on the support guessed from `w`.
fn polish(h: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], tol: f64) -> Option<Vec<f64>> {
    let n = w.len();
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&i| w[i] > 1e-6 * wmax.max(tol)).collect();
    solve_on_support(h, c, support, n, false)
}

/// Equality-constrained solve on `support`, dropping indices that come back
/// negative. With `grow`, indices whose multiplier signals descent are added
/// back in, which makes this a small primal active-set method.
fn solve_on_support(h: &DMatrix<f64>, c: &DVector<f64>, mut support: Vec<usize>, n: usize, grow: bool) -> Option<Vec<f64>> {
    let rounds = if grow { 3 * n } else { n };
    let mut kkt = Vec::with_capacity((n + 1) * (n + 1));
    let mut sol = Vec::with_capacity(n + 1);
    let mut active = vec![false; n];
    for _ in 0..rounds {
        if support.is_empty() {
            return None;
        }
        let k = support.len();
        let m = k + 1;
        kkt.clear();
        sol.clear();
        for &i in &support {
            kkt.extend(support.iter().map(|&j| h[(i, j)]));
            kkt.push(1.0);
            sol.push(-c[i]);
        }
        kkt.extend(std::iter::repeat_n(1.0, k));
        kkt.push(0.0);
        sol.push(1.0);
        if !lu_solve_in_place(&mut kkt, m, &mut sol) {
            return None;
        }
        let worst = (0..k).filter(|&a| sol[a] < 0.0).min_by(|&a, &b| sol[a].total_cmp(&sol[b]));
        if let Some(worst) = worst {
            // remove the most negative entry and retry
            support.remove(worst);
            continue;
        }
        let mut out = vec![0.0; n];
        active.iter_mut().for_each(|a| *a = false);
        for (a, &i) in support.iter().enumerate() {
            out[i] = sol[a];
            active[i] = true;
        }
        if grow {
            // z_i = (Hw + c)_i + λ for inactive i; most negative enters
            let lambda = sol[k];
            let mut enter: Option<(usize, f64)> = None;
            for i in (0..n).filter(|&i| !active[i]) {
                let zi = support.iter().map(|&j| h[(i, j)] * out[j]).sum::<f64>() + c[i] + lambda;
                if zi < -1e-12 && enter.is_none_or(|(_, z)| zi < z) {
                    enter = Some((i, zi));
                }
            }
            if let Some((i, _)) = enter {
                support.push(i);
                support.sort_unstable();
                continue;
            }
        }
        return Some(clamp_simplex(out));
    }
    None
}

/// Row-major LU with partial pivoting; overwrites `b` with the solution.
/// False if a pivot is exactly zero.
fn lu_solve_in_place(a: &mut [f64], n: usize, b: &mut [f64]) -> bool {
    for col in 0..n {
        let p = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap();
        let pivot = a[p * n + col];
        if pivot == 0.0 || !pivot.is_finite() {
            return false;
        }
        if p != col {
            for j in 0..n {
                a.swap(p * n + j, col * n + j);
            }
            b.swap(p, col);
        }
        for r in (col + 1)..n {
            let f = a[r * n + col] / pivot;
            if f != 0.0 {
                for j in (col + 1)..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                b[r] -= f * b[col];
            }
        }
    }
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|j| a[r * n + j] * b[j]).sum();
        b[r] = (b[r] - s) / a[r * n + r];
    }
    true
}

/// `Hw + c` without allocating a vector for `w`.
fn gradient(h: &DMatrix<f64>, c: &DVector<f64>, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut g = vec![0.0; n];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            for (gi, hij) in g.iter_mut().zip(&h.as_slice()[j * n..(j + 1) * n]) {
                *gi += hij * wj;
            }
        }
    }
    for (gi, ci) in g.iter_mut().zip(c.as_slice()) {
        *gi += ci;
    }
    g
}

/// Scaled KKT residual of a feasible simplex point.
pub(crate) fn kkt_residual(h: &DMatrix<f64>, c: &DVector<f64>, w: &[f64]) -> f64 {
    let g = gradient(h, c, w);
    let cnorm = 1.0 + c.amax();
    // multiplier of Σw = 1: mean gradient over the support
    let (sum, count) = w
        .iter()
        .zip(&g)
        .filter(|(wi, _)| **wi > 0.0)
        .fold((0.0, 0usize), |(s, k), (_, gi)| (s + gi, k + 1));
    if count == 0 {
        return f64::INFINITY;
    }
    let y = sum / count as f64;
    let mut r = (w.iter().sum::<f64>() - 1.0).abs();
    for i in 0..w.len() {
        let zi = g[i] - y;
        if w[i] > 0.0 {
            // stationarity on the support; complementarity w_i z_i
            r = r.max(zi.abs() / cnorm).max((w[i] * zi).abs());
        } else {
            r = r.max((-zi).max(0.0) / cnorm);
        }
        if w[i] < 0.0 {
            r = r.max(-w[i]);
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(h: &DMatrix<f64>, c: &DVector<f64>, w: &[f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        0.5 * wv.dot(&(h * &wv)) + c.dot(&wv)
    }

    #[test]
    fn interior_optimum() {
        // min ½|w - p|² with p inside the simplex
        let h = DMatrix::identity(3, 3);
        let p = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let c = -&p;
        let s = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
        for (a, b) in s.w.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-9, "{:?}", s.w);
        }
    }

    #[test]
    fn vertex_optimum() {
        let h = DMatrix::identity(3, 3);
        let c = DVector::from_vec(vec![-5.0, 0.0, 0.0]);
        let s = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.w[1], 0.0);
    }

    #[test]
    fn projection_onto_face() {
        // projection of (0.8, 0.6, -0.4) onto the simplex is (0.6, 0.4, 0)
        let h = DMatrix::identity(3, 3);
        let c = DVector::from_vec(vec![-0.8, -0.6, 0.4]);
        let s = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
        assert!((s.w[0] - 0.6).abs() < 1e-10);
        assert!((s.w[1] - 0.4).abs() < 1e-10);
        assert!(s.w[2].abs() < 1e-12);
        assert!(s.residual <= 1e-8);
    }

    #[test]
    fn singular_hessian_still_solves() {
        // rank-one H: many minimizers, objective value is what matters
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let h = &a * a.transpose() + DMatrix::identity(4, 4) * 1e-9;
        let c = -&a * 2.5;
        let s = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
        // aᵀw = 2.5 is attainable, optimum ½(2.5)² - 2.5·2.5 = -3.125
        assert!((obj(&h, &c, &s.w) + 3.125).abs() < 1e-7);
    }

    #[test]
    fn single_variable() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let c = DVector::from_element(1, 1.0);
        let s = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
        assert_eq!(s.w, vec![1.0]);
        assert_eq!(s.objective, 2.0);
    }

    #[test]
    fn warm_start_matches_cold_solve() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (k, n) = (8, 6);
            let x = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
            let t = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let h = x.transpose() * &x + DMatrix::identity(n, n) * 1e-9;
            let c = -(x.transpose() * &t);
            let cold = solve_simplex_qp(&h, &c, QpOptions::default()).unwrap();
            // wrong hints of every kind must still land on the optimum
            for hint in [vec![0], vec![0, 1, 2, 3, 4, 5], vec![5, 2]] {
                let warm = solve_simplex_qp_from(&h, &c, QpOptions::default(), &hint).unwrap();
                assert!((warm.objective - cold.objective).abs() < 1e-9);
                assert!(warm.residual <= 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let h = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(solve_simplex_qp(&h, &c, QpOptions::default()).is_err());
    }
}
