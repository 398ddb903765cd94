//! L1-penalized synthetic control.
//!
//! Donor weights may take either sign and need not sum to one; an
//! unpenalized intercept is fitted alongside. This lets the synthetic path
//! leave the convex hull of the donors.
//!
//! The objective over the pre-period is
//! `Σ_t (y_t − b₀ − Σ_j w_j Y_jt)² + λ Σ_j |w_j|`. With standardization on
//! (the default) the penalty applies to the weights of unit-variance donor
//! series, and the reported weights are mapped back to the original scale.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub standardize: bool,
    /// Stop when no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            standardize: true,
            tol: 1e-9,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedWeights {
    pub w: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub weights: SignedWeights,
    pub treated: String,
    pub donors: Vec<String>,
    pub times: Vec<i64>,
    pub t0_index: usize,
    pub actual: Vec<f64>,
    pub synthetic: Vec<f64>,
    pub gaps: Vec<f64>,
    pub pre_rmse: f64,
    pub post_rmse: f64,
    pub att: f64,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn effects(&self) -> &[f64] {
        &self.gaps[self.t0_index..]
    }
}

/// Standardized design on a set of training rows.
struct Design {
    /// rows × J, centered (and scaled when standardizing).
    z: DMatrix<f64>,
    y: Vec<f64>,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
}

impl Design {
    fn new(donors: &DMatrix<f64>, treated: &[f64], rows: &[usize], standardize: bool) -> Self {
        let n = rows.len() as f64;
        let j = donors.ncols();
        let x_mean: Vec<f64> = (0..j).map(|c| rows.iter().map(|&t| donors[(t, c)]).sum::<f64>() / n).collect();
        let x_scale: Vec<f64> = (0..j)
            .map(|c| {
                if !standardize {
                    return 1.0;
                }
                let v = rows.iter().map(|&t| (donors[(t, c)] - x_mean[c]).powi(2)).sum::<f64>() / n;
                // a constant donor carries no signal; leave it unscaled
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z = DMatrix::from_fn(rows.len(), j, |r, c| (donors[(rows[r], c)] - x_mean[c]) / x_scale[c]);
        let y_mean = rows.iter().map(|&t| treated[t]).sum::<f64>() / n;
        let y = rows.iter().map(|&t| treated[t] - y_mean).collect();
        Self {
            z,
            y,
            x_mean,
            x_scale,
            y_mean,
        }
    }

    fn lambda_max(&self) -> f64 {
        (0..self.z.ncols())
            .map(|c| 2.0 * self.z.column(c).iter().zip(&self.y).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Coordinate descent from `beta`; returns the sweep count.
    fn solve(&self, lambda: f64, beta: &mut [f64], config: &LassoConfig) -> Result<usize> {
        let (n, j) = self.z.shape();
        let norms: Vec<f64> = (0..j).map(|c| self.z.column(c).norm_squared()).collect();
        let mut resid: Vec<f64> = self.y.clone();
        for c in 0..j {
            if beta[c] != 0.0 {
                for r in 0..n {
                    resid[r] -= self.z[(r, c)] * beta[c];
                }
            }
        }
        for sweep in 1..=config.max_sweeps {
            let mut max_change = 0.0f64;
            for c in 0..j {
                if norms[c] == 0.0 {
                    continue;
                }
                let col = self.z.column(c);
                let rho: f64 = (0..n).map(|r| col[r] * resid[r]).sum::<f64>() + norms[c] * beta[c];
                let new = soft_threshold(rho, lambda / 2.0) / norms[c];
                let d = new - beta[c];
                if d != 0.0 {
                    for r in 0..n {
                        resid[r] -= col[r] * d;
                    }
                    beta[c] = new;
                    max_change = max_change.max((d / self.x_scale[c]).abs());
                }
            }
            if max_change < config.tol {
                return Ok(sweep);
            }
        }
        Err(Error::NonConvergence(config.max_sweeps))
    }

    /// Original-scale weights and intercept.
    fn unscale(&self, beta: &[f64]) -> (Vec<f64>, f64) {
        let w: Vec<f64> = beta.iter().zip(&self.x_scale).map(|(b, s)| b / s).collect();
        let b0 = self.y_mean - w.iter().zip(&self.x_mean).map(|(w, m)| w * m).sum::<f64>();
        (w, b0)
    }
}

/// `sign(x)·max(|x| − a, 0)`.
pub fn soft_threshold(x: f64, a: f64) -> f64 {
    if x > a {
        x - a
    } else if x < -a {
        x + a
    } else {
        0.0
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && !lambda.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {lambda}")))
    }
}

/// Smallest penalty that zeroes every weight on the full pre-period.
pub fn lambda_max(panel: &Panel, config: &LassoConfig) -> f64 {
    let rows: Vec<usize> = (0..panel.t0_index()).collect();
    Design::new(&panel.donor_matrix(), &panel.treated_series(), &rows, config.standardize).lambda_max()
}

pub fn fit_lasso_sc(panel: &Panel, lambda: f64) -> Result<LassoFit> {
    fit_lasso_sc_with(panel, lambda, &LassoConfig::default())
}

pub fn fit_lasso_sc_with(panel: &Panel, lambda: f64, config: &LassoConfig) -> Result<LassoFit> {
    check_lambda(lambda)?;
    let t0 = panel.t0_index();
    let donors = panel.donor_matrix();
    let actual = panel.treated_series();
    let rows: Vec<usize> = (0..t0).collect();
    let design = Design::new(&donors, &actual, &rows, config.standardize);
    let mut beta = vec![0.0; donors.ncols()];
    let sweeps = design.solve(lambda, &mut beta, config)?;
    let (w, intercept) = design.unscale(&beta);
    let synthetic: Vec<f64> = (0..panel.n_times())
        .map(|t| intercept + (0..w.len()).map(|j| w[j] * donors[(t, j)]).sum::<f64>())
        .collect();
    let gaps: Vec<f64> = actual.iter().zip(&synthetic).map(|(a, s)| a - s).collect();
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    Ok(LassoFit {
        treated: panel.treated().to_string(),
        donors: panel.donor_pool().members().to_vec(),
        times: panel.times().to_vec(),
        t0_index: t0,
        pre_rmse: rms(&gaps[..t0]),
        post_rmse: rms(&gaps[t0..]),
        att: gaps[t0..].iter().sum::<f64>() / (gaps.len() - t0) as f64,
        weights: SignedWeights { w, intercept, lambda },
        actual,
        synthetic,
        gaps,
        sweeps,
    })
}

/// 50 log-spaced penalties over `[1e-4, 1e2] × λ_max`.
pub fn default_grid(panel: &Panel, config: &LassoConfig) -> Vec<f64> {
    let lm = lambda_max(panel, config);
    let (lo, hi) = (-4.0f64, 2.0f64);
    (0..50).map(|i| lm * 10f64.powf(lo + (hi - lo) * i as f64 / 49.0)).collect()
}

pub fn cv_lambda(panel: &Panel, grid: &[f64]) -> Result<f64> {
    cv_lambda_with(panel, grid, &LassoConfig::default()).map(|(l, _)| l)
}

/// Leave-one-pre-period-out CV. Returns the chosen penalty and the CV error
/// for each grid value (in grid order). Ties go to the larger penalty.
pub fn cv_lambda_with(panel: &Panel, grid: &[f64], config: &LassoConfig) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let t0 = panel.t0_index();
    if t0 < 3 {
        return Err(Error::InsufficientPrePeriods { needed: 3, have: t0 });
    }
    let donors = panel.donor_matrix();
    let y = panel.treated_series();
    // path from large to small penalties, warm-started, per held-out period
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let per_fold = (0..t0)
        .into_par_iter()
        .map(|s| {
            let rows: Vec<usize> = (0..t0).filter(|&t| t != s).collect();
            let d = Design::new(&donors, &y, &rows, config.standardize);
            let mut beta = vec![0.0; donors.ncols()];
            let mut errs = vec![0.0; grid.len()];
            for &g in &order {
                d.solve(grid[g], &mut beta, config)?;
                let (w, b0) = d.unscale(&beta);
                let pred = b0 + (0..w.len()).map(|j| w[j] * donors[(s, j)]).sum::<f64>();
                errs[g] = (y[s] - pred).powi(2);
            }
            Ok(errs)
        })
        .collect::<Result<Vec<_>>>()?;
    let cv: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|e| e[g]).sum::<f64>() / t0 as f64)
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        let (e, eb) = (cv[g], cv[best]);
        let tie = (e - eb).abs() <= 1e-12 * eb.abs().max(1e-300);
        if (!tie && e < eb) || (tie && grid[g] > grid[best]) {
            best = g;
        }
    }
    Ok((grid[best], cv))
}
