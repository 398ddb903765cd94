//! Generalized synthetic control with interactive fixed effects.
//!
//! Controls follow `y_it = α_i + ξ_t + φ_iᵀμ_t + ε_it`. The model is fitted
//! on control units only by alternating least squares. The treated unit's
//! intercept and loadings are then regressed on the estimated factors over
//! the pre-period, and the fitted values give its counterfactual path.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;

const MAX_ALS_ITER: usize = 1000;
const ALS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub r: usize,
    /// T × r, orthonormal columns.
    pub factors: DMatrix<f64>,
    /// J × r, orthogonal columns with descending norm.
    pub loadings: DMatrix<f64>,
    /// `α_i`, centered to sum zero.
    pub unit_effects: Vec<f64>,
    /// `ξ_t` (includes the grand mean).
    pub time_effects: Vec<f64>,
    /// Mean squared residual over all control cells.
    pub sigma2: f64,
    pub iterations: usize,
    /// Least-squares objective after each ALS sweep.
    pub objective_history: Vec<f64>,
}

impl FactorModel {
    /// Fitted value for control `i` at period `t`.
    pub fn fitted(&self, i: usize, t: usize) -> f64 {
        let common: f64 = (0..self.r).map(|k| self.loadings[(i, k)] * self.factors[(t, k)]).sum();
        self.unit_effects[i] + self.time_effects[t] + common
    }
}

/// Fits the factor model to the panel's donors.
pub fn fit_ife(panel: &Panel, r: usize) -> Result<FactorModel> {
    fit_ife_matrix(&panel.donor_matrix().transpose(), r)
}

/// Fits the factor model to a `J × T` control matrix.
pub fn fit_ife_matrix(y: &DMatrix<f64>, r: usize) -> Result<FactorModel> {
    let (j, t) = y.shape();
    if r + 2 > j.min(t) {
        return Err(Error::InvalidArgument(format!(
            "factor count {r} needs r ≤ min(J, T) − 2 = {}",
            j.min(t) as i64 - 2
        )));
    }
    let grand = y.mean();
    let time_effects: Vec<f64> = (0..t).map(|s| y.column(s).mean()).collect();
    let unit_effects: Vec<f64> = (0..j).map(|i| y.row(i).mean() - grand).collect();
    let resid = DMatrix::from_fn(j, t, |i, s| y[(i, s)] - unit_effects[i] - time_effects[s]);
    let total = resid.norm_squared();

    if r == 0 {
        return Ok(FactorModel {
            r,
            factors: DMatrix::zeros(t, 0),
            loadings: DMatrix::zeros(j, 0),
            unit_effects,
            time_effects,
            sigma2: total / (j * t) as f64,
            iterations: 0,
            objective_history: vec![total],
        });
    }

    let sv = if j >= t {
        resid.singular_values()
    } else {
        resid.transpose().singular_values()
    };
    let top = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-10 * top.max(1e-300)).count();
    if rank < r {
        return Err(Error::RankDeficiency { requested: r, rank });
    }

    // start from an orthonormal basis of the first unit paths
    let mut f = resid.transpose().qr().q().columns(0, r).into_owned();
    let mut lam = DMatrix::zeros(j, r);
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ALS_ITER {
        iterations += 1;
        let ftf = (f.transpose() * &f)
            .try_inverse()
            .ok_or(Error::RankDeficiency { requested: r, rank })?;
        lam = &resid * &f * ftf;
        let ltl = (lam.transpose() * &lam)
            .try_inverse()
            .ok_or(Error::RankDeficiency { requested: r, rank })?;
        f = resid.transpose() * &lam * ltl;
        let obj = (&resid - &lam * f.transpose()).norm_squared();
        history.push(obj);
        if obj <= 1e-28 * total || (prev.is_finite() && prev - obj <= ALS_TOL * prev) {
            converged = true;
            break;
        }
        prev = obj;
    }
    if !converged {
        return Err(Error::NonConvergence(iterations));
    }

    // identification: rotate to orthonormal factors and orthogonal loadings.
    // With F = QR and M = ΛRᵀ, the eigenvectors W of MᵀM give factors QW and
    // loadings MW, and ΛFᵀ is unchanged.
    let qr = f.qr();
    let (q, rr) = (qr.q(), qr.r());
    let m = &lam * rr.transpose();
    let eig = (m.transpose() * &m).symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let w = DMatrix::from_fn(r, r, |i, k| eig.eigenvectors[(i, order[k])]);
    let mut factors = q * &w;
    let mut loadings = m * w;
    for k in 0..r {
        let first = loadings.column(k).iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
        if first < 0.0 {
            loadings.column_mut(k).neg_mut();
            factors.column_mut(k).neg_mut();
        }
    }
    let last = *history.last().expect("at least one sweep");
    Ok(FactorModel {
        r,
        factors,
        loadings,
        unit_effects,
        time_effects,
        sigma2: last / (j * t) as f64,
        iterations,
        objective_history: history,
    })
}

/// Intercept and loadings of one series from a pre-period regression of
/// `y_t − ξ_t` on `[1, μ_t]` over `periods`.
fn unit_coefficients(model: &FactorModel, y: &[f64], periods: &[usize]) -> Result<DVector<f64>> {
    let r = model.r;
    if periods.len() < r + 1 {
        return Err(Error::InsufficientPrePeriods {
            needed: r + 1,
            have: periods.len(),
        });
    }
    let x = DMatrix::from_fn(periods.len(), r + 1, |row, c| {
        if c == 0 {
            1.0
        } else {
            model.factors[(periods[row], c - 1)]
        }
    });
    let z = DVector::from_iterator(periods.len(), periods.iter().map(|&t| y[t] - model.time_effects[t]));
    let xtx = x.transpose() * &x;
    let chol = xtx.cholesky().ok_or(Error::SingularDesign)?;
    Ok(chol.solve(&(x.transpose() * z)))
}

fn predict(model: &FactorModel, coef: &DVector<f64>, t: usize) -> f64 {
    model.time_effects[t] + coef[0] + (0..model.r).map(|k| coef[k + 1] * model.factors[(t, k)]).sum::<f64>()
}

/// Counterfactual path for a series given a control model: loadings are
/// estimated on periods `< t0`.
pub fn counterfactual(model: &FactorModel, y: &[f64], t0: usize) -> Result<Vec<f64>> {
    let pre: Vec<usize> = (0..t0).collect();
    let coef = unit_coefficients(model, y, &pre)?;
    Ok((0..y.len()).map(|t| predict(model, &coef, t)).collect())
}

/// Mean held-out squared error of leave-one-pre-period-out prediction.
fn loo_error(model: &FactorModel, y: &[f64], t0: usize) -> Result<f64> {
    let mut sse = 0.0;
    for s in 0..t0 {
        let train: Vec<usize> = (0..t0).filter(|&t| t != s).collect();
        let coef = unit_coefficients(model, y, &train)?;
        let e = y[s] - predict(model, &coef, s);
        sse += e * e;
    }
    Ok(sse / t0 as f64)
}

/// Leave-one-pre-period-out CV error for each factor count `0..=r_max`
/// (infinite where `r` exceeds the rank of the demeaned controls).
pub fn factor_cv_errors(panel: &Panel, r_max: usize) -> Result<Vec<f64>> {
    let bound = panel.n_donors().min(panel.t0_index()) as i64 - 2;
    if r_max as i64 > bound {
        return Err(Error::InvalidArgument(format!("r_max {r_max} exceeds min(J, T0) − 2 = {bound}")));
    }
    let controls = panel.donor_matrix().transpose();
    let y = panel.treated_series();
    (0..=r_max)
        .map(|r| match fit_ife_matrix(&controls, r) {
            Ok(m) => loo_error(&m, &y, panel.t0_index()),
            // more factors than the controls support: never selected
            Err(Error::RankDeficiency { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect()
}

/// Index of the smallest CV error; ties go to the smaller factor count.
pub fn select_factor_count(cv_errors: &[f64]) -> usize {
    let mut best = 0;
    for (r, e) in cv_errors.iter().enumerate() {
        if *e < cv_errors[best] {
            best = r;
        }
    }
    best
}

/// Factor count chosen by [`select_factor_count`] on the CV errors.
pub fn cross_validate_factors(panel: &Panel, r_max: usize) -> Result<usize> {
    Ok(select_factor_count(&factor_cv_errors(panel, r_max)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GscConfig {
    /// Fixed factor count; `None` selects it by cross-validation.
    pub r: Option<usize>,
    /// Upper bound for the CV search (clamped to `min(J, T0) − 2`).
    pub r_max: usize,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    /// Run the combined in-time / in-space placebo test.
    pub placebo: bool,
}

impl Default for GscConfig {
    fn default() -> Self {
        Self {
            r: None,
            r_max: 5,
            bootstrap: 1000,
            level: 0.95,
            seed: 0,
            placebo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedPlacebo {
    /// Backdated intervention period.
    pub fake_t0: i64,
    /// Mean treated gap over `[fake_t0, T0)`.
    pub treated_effect: f64,
    /// Same statistic for each control treated as a placebo unit.
    pub control_effects: Vec<f64>,
    /// Share of controls whose |effect| is at least the treated |effect|.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GscFit {
    pub model: FactorModel,
    /// CV error per factor count, empty when `r` was fixed.
    pub cv_errors: Vec<f64>,
    pub treated_intercept: f64,
    pub treated_loadings: Vec<f64>,
    pub times: Vec<i64>,
    pub t0_index: usize,
    pub actual: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub gaps: Vec<f64>,
    pub att: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// Bootstrap p-value for a zero average effect.
    pub p_value: f64,
    pub placebo: Option<CombinedPlacebo>,
}

/// Full GSC estimate: factor count, counterfactual, ATT, residual-bootstrap
/// uncertainty and the combined placebo test.
///
/// Each bootstrap replicate rebuilds every control as its fitted path plus
/// the residual row of a randomly drawn control, and a pseudo-treated unit
/// as the treated counterfactual plus another drawn residual row. Refitting
/// on a replicate gives a draw `e*` of the estimation error. `se` is the
/// standard deviation of `e*`; the interval is `att − q(e* − ē*)` at the two
/// tail quantiles; the p-value is `(1 + #{|e*| ≥ |att|}) / (B + 1)`.
pub fn estimate_att(panel: &Panel, config: &GscConfig) -> Result<GscFit> {
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {}", config.level)));
    }
    let t0 = panel.t0_index();
    let (r, cv_errors) = match config.r {
        Some(r) => (r, Vec::new()),
        None => {
            let cap = (panel.n_donors().min(t0) as i64 - 2).max(0) as usize;
            let errs = factor_cv_errors(panel, config.r_max.min(cap))?;
            (select_factor_count(&errs), errs)
        }
    };
    let controls = panel.donor_matrix().transpose();
    let model = fit_ife_matrix(&controls, r)?;
    let actual = panel.treated_series();
    let pre: Vec<usize> = (0..t0).collect();
    let coef = unit_coefficients(&model, &actual, &pre)?;
    let cf: Vec<f64> = (0..actual.len()).map(|t| predict(&model, &coef, t)).collect();
    let gaps: Vec<f64> = actual.iter().zip(&cf).map(|(a, c)| a - c).collect();
    let att = mean(&gaps[t0..]);

    let (se, ci, p_value) = if config.bootstrap > 0 {
        let errors = bootstrap_errors(&controls, &model, &cf, t0, config)?;
        let m = mean(&errors);
        let sd = (errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (errors.len().max(2) - 1) as f64).sqrt();
        let mut centered: Vec<f64> = errors.iter().map(|e| e - m).collect();
        centered.sort_by(f64::total_cmp);
        let a = (1.0 - config.level) / 2.0;
        let ci = (att - quantile(&centered, 1.0 - a), att - quantile(&centered, a));
        let exceed = errors.iter().filter(|e| e.abs() >= att.abs()).count();
        let p = (1 + exceed) as f64 / (errors.len() + 1) as f64;
        (sd, ci, p)
    } else {
        (f64::NAN, (f64::NAN, f64::NAN), f64::NAN)
    };

    let placebo = if config.placebo {
        combined_placebo(panel, &controls, &model, &actual)?
    } else {
        None
    };

    Ok(GscFit {
        treated_intercept: coef[0],
        treated_loadings: coef.iter().skip(1).copied().collect(),
        model,
        cv_errors,
        times: panel.times().to_vec(),
        t0_index: t0,
        actual,
        counterfactual: cf,
        gaps,
        att,
        se,
        ci,
        p_value,
        placebo,
    })
}

fn bootstrap_errors(controls: &DMatrix<f64>, model: &FactorModel, cf: &[f64], t0: usize, config: &GscConfig) -> Result<Vec<f64>> {
    let (j, t) = controls.shape();
    let fitted = DMatrix::from_fn(j, t, |i, s| model.fitted(i, s));
    let resid = controls - &fitted;
    let pre: Vec<usize> = (0..t0).collect();
    (0..config.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(b as u64);
            let mut y = fitted.clone();
            for i in 0..j {
                let k = rng.random_range(0..j);
                for s in 0..t {
                    y[(i, s)] += resid[(k, s)];
                }
            }
            let k = rng.random_range(0..j);
            let treated: Vec<f64> = (0..t).map(|s| cf[s] + resid[(k, s)]).collect();
            let m = fit_ife_matrix(&y, model.r)?;
            let coef = unit_coefficients(&m, &treated, &pre)?;
            let e: f64 = (t0..t).map(|s| treated[s] - predict(&m, &coef, s)).sum::<f64>() / (t - t0) as f64;
            Ok(e)
        })
        .collect()
}

/// In-time placebo start picked by cross-validation, evaluated against the
/// same backdated statistic for every control (in-space). Returns `None`
/// when the pre-period is too short for any backdated window.
fn combined_placebo(panel: &Panel, controls: &DMatrix<f64>, model: &FactorModel, actual: &[f64]) -> Result<Option<CombinedPlacebo>> {
    let t0 = panel.t0_index();
    let r = model.r;
    let j = controls.nrows();
    let lo = (r + 3).max(2);
    if lo + 2 > t0 || r + 3 > j {
        return Ok(None);
    }
    // candidate backdated start with the best held-out fit on its window
    let mut best: Option<(usize, f64)> = None;
    for s in lo..=(t0 - 2) {
        let err = loo_error(model, actual, s)?;
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((s, err));
        }
    }
    let (s, _) = best.expect("non-empty candidate range");
    let window_effect = |m: &FactorModel, y: &[f64]| -> Result<f64> {
        let pre: Vec<usize> = (0..s).collect();
        let coef = unit_coefficients(m, y, &pre)?;
        Ok((s..t0).map(|t| y[t] - predict(m, &coef, t)).sum::<f64>() / (t0 - s) as f64)
    };
    let treated_effect = window_effect(model, actual)?;
    let control_effects = (0..j)
        .into_par_iter()
        .map(|u| {
            let rows: Vec<usize> = (0..j).filter(|&i| i != u).collect();
            let others = controls.select_rows(rows.iter());
            let m = fit_ife_matrix(&others, r)?;
            let y: Vec<f64> = controls.row(u).iter().copied().collect();
            window_effect(&m, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = control_effects.iter().filter(|e| e.abs() >= treated_effect.abs()).count();
    Ok(Some(CombinedPlacebo {
        fake_t0: panel.times()[s],
        treated_effect,
        p_value: m as f64 / j as f64,
        control_effects,
    }))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_factor(j: usize, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(j, t, |i, s| {
            let (i, s) = (i as f64, s as f64);
            3.0 + 0.1 * i + 0.05 * s + (0.3 * s).sin() * (1.0 + 0.2 * i) + (0.7 * s).cos() * (0.5 - 0.1 * i * i)
        })
    }

    #[test]
    fn als_recovers_exact_low_rank() {
        let y = two_factor(8, 20);
        let m = fit_ife_matrix(&y, 2).unwrap();
        assert!(m.sigma2 < 1e-18, "{}", m.sigma2);
        let ftf = m.factors.transpose() * &m.factors;
        assert!((ftf - DMatrix::identity(2, 2)).amax() < 1e-10);
        let c = m.loadings.column(0).norm();
        assert!(c >= m.loadings.column(1).norm());
        for w in m.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rank_and_size_checks() {
        let y = two_factor(8, 20);
        assert!(matches!(
            fit_ife_matrix(&y, 3),
            Err(Error::RankDeficiency { requested: 3, rank: 2 })
        ));
        assert!(matches!(fit_ife_matrix(&y, 7), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&v, 0.5), 1.5);
        assert_eq!(quantile(&v, 0.0), 0.0);
        assert_eq!(quantile(&v, 1.0), 3.0);
    }
}
