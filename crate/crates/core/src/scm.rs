//! Classical synthetic control.
//!
//! Donor weights solve a simplex-constrained quadratic program for a given
//! diagonal predictor-importance matrix V (inner problem); V itself is
//! chosen by Nelder–Mead to minimize out-of-sample prediction error of the
//! pre-period outcome path (outer problem).
//!
//! With the default train fraction the pre-period is split into an early
//! and a late window. V entries for early-window predictors are chosen by
//! solving weights on those predictors and scoring the late-window
//! outcomes; the late-window entries are chosen the other way round. The
//! final weights are re-solved on every predictor with the combined V.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::panel::Panel;
use crate::qp::{self, QpOptions};

/// Relative ridge added to `X₀ᵀVX₀` (scaled by its mean diagonal).
pub const RIDGE: f64 = 1e-9;

/// Donor weights, aligned with the panel's donor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Donor positions with weight above `tol`.
    pub fn support(&self, tol: f64) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] > tol).collect()
    }
}

/// Diagonal of V, normalized to sum one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VMatrix(pub Vec<f64>);

impl VMatrix {
    pub fn uniform(k: usize) -> Self {
        VMatrix(vec![1.0 / k as f64; k])
    }

    /// Normalizes non-negative entries to sum one.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument(
                "V diagonal must be non-empty, finite and non-negative".into(),
            ));
        }
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidArgument("V diagonal sums to zero".into()));
        }
        Ok(VMatrix(v.into_iter().map(|x| x / s).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Matching variables for the treated unit and each donor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSet {
    pub labels: Vec<String>,
    pub x_treated: DVector<f64>,
    /// k × J, one column per donor.
    pub x_donors: DMatrix<f64>,
    /// Pre-period index of outcome-path rows; `None` for covariate rows.
    pub periods: Vec<Option<usize>>,
}

/// Extra time-invariant predictor, one value per panel unit (panel order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub label: String,
    pub values: Vec<f64>,
}

impl PredictorSet {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn n_donors(&self) -> usize {
        self.x_donors.ncols()
    }

    /// `(x₁ − X₀w)ᵀ V (x₁ − X₀w)`.
    pub fn objective(&self, v: &VMatrix, w: &[f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        let r = &self.x_treated - &self.x_donors * wv;
        r.iter().zip(v.0.iter()).map(|(ri, vi)| vi * ri * ri).sum()
    }

    fn select_rows(&self, rows: &[usize]) -> PredictorSet {
        PredictorSet {
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
            x_treated: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.x_treated[r])),
            x_donors: self.x_donors.select_rows(rows.iter()),
            periods: rows.iter().map(|&r| self.periods[r]).collect(),
        }
    }

    /// Appends covariate rows (values given per panel unit).
    pub fn with_covariates(mut self, panel: &Panel, covariates: &[Covariate]) -> Result<Self> {
        for cov in covariates {
            if cov.values.len() != panel.units().len() || cov.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "covariate `{}` needs one finite value per unit",
                    cov.label
                )));
            }
            let k = self.k();
            let donors = panel.donor_indices();
            let mut x_treated = self.x_treated.clone().insert_row(k, 0.0);
            x_treated[k] = cov.values[panel.treated_index()];
            let mut x_donors = self.x_donors.clone().insert_row(k, 0.0);
            for (j, &d) in donors.iter().enumerate() {
                x_donors[(k, j)] = cov.values[d];
            }
            self.x_treated = x_treated;
            self.x_donors = x_donors;
            self.labels.push(cov.label.clone());
            self.periods.push(None);
        }
        Ok(self)
    }
}

/// Default predictor set: every pre-period outcome.
pub fn build_predictors(panel: &Panel) -> PredictorSet {
    let t0 = panel.t0_index();
    let treated = panel.treated_series();
    let donors = panel.donor_matrix();
    PredictorSet {
        labels: panel.times()[..t0].iter().map(|t| t.to_string()).collect(),
        x_treated: DVector::from_column_slice(&treated[..t0]),
        x_donors: donors.rows(0, t0).into_owned(),
        periods: (0..t0).map(Some).collect(),
    }
}

/// Simplex-constrained weights minimizing the V-weighted predictor distance.
pub fn solve_weights(pred: &PredictorSet, v: &VMatrix) -> Result<WeightVector> {
    solve_weights_with(pred, v, QpOptions::default())
}

pub fn solve_weights_with(pred: &PredictorSet, v: &VMatrix, opts: QpOptions) -> Result<WeightVector> {
    solve_weights_hinted(pred, v, opts, &[])
}

fn solve_weights_hinted(pred: &PredictorSet, v: &VMatrix, opts: QpOptions, hint: &[usize]) -> Result<WeightVector> {
    if v.0.len() != pred.k() {
        return Err(Error::InvalidArgument(format!(
            "V has {} entries for {} predictors",
            v.0.len(),
            pred.k()
        )));
    }
    let j = pred.n_donors();
    if j == 0 {
        return Err(Error::EmptyDonorPool);
    }
    // H = X₀ᵀ V X₀, c = −X₀ᵀ V x₁
    // column-major: donor a's predictors are contiguous
    let k = pred.k();
    let x = pred.x_donors.as_slice();
    let vx: Vec<f64> = x.iter().enumerate().map(|(idx, p)| v.0[idx % k] * p).collect();
    let mut h = DMatrix::zeros(j, j);
    let mut c = DVector::zeros(j);
    for a in 0..j {
        let vxa = &vx[a * k..(a + 1) * k];
        for b in a..j {
            let s: f64 = vxa.iter().zip(&x[b * k..(b + 1) * k]).map(|(p, q)| p * q).sum();
            h[(a, b)] = s;
            h[(b, a)] = s;
        }
        c[a] = -vxa.iter().zip(pred.x_treated.as_slice()).map(|(p, q)| p * q).sum::<f64>();
    }
    // the exact problem from the previous support usually solves outright
    if !hint.is_empty() {
        if let Some(exact) = qp::solve_from_support(&h, &c, hint, opts.tol) {
            return Ok(WeightVector(exact.w));
        }
    }
    let mean_diag = h.diagonal().mean();
    let ridge = RIDGE * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut hr = h.clone();
    for i in 0..j {
        hr[(i, i)] += ridge;
    }
    let sol = qp::solve_simplex_qp_from(&hr, &c, opts, hint)?;
    // the ridge only conditions the search; drop it when the support allows
    match qp::refine(&h, &c, &sol.w, opts.tol) {
        Some(exact) => Ok(WeightVector(exact.w)),
        None => Ok(WeightVector(sol.w)),
    }
}

/// How the predictor weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum VMode {
    /// Nested search. `train_fraction >= 1` scores the whole pre-period
    /// in-sample instead of splitting it.
    Optimized {
        train_fraction: f64,
    },
    Uniform,
    Fixed {
        v: Vec<f64>,
    },
}

impl Default for VMode {
    fn default() -> Self {
        VMode::Optimized { train_fraction: 0.5 }
    }
}

/// Multi-start settings for the outer V search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterSearch {
    pub restarts: usize,
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for OuterSearch {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_evals: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub v_mode: VMode,
    pub search: OuterSearch,
    #[serde(default)]
    pub covariates: Vec<Covariate>,
    /// Tolerance on the inner QP KKT residual.
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            v_mode: VMode::default(),
            search: OuterSearch::default(),
            covariates: Vec::new(),
            qp_tol: 1e-8,
            qp_max_iter: 200,
        }
    }
}

impl ScmConfig {
    pub fn uniform() -> Self {
        Self {
            v_mode: VMode::Uniform,
            ..Self::default()
        }
    }

    fn qp(&self) -> QpOptions {
        QpOptions {
            tol: self.qp_tol,
            max_iter: self.qp_max_iter,
        }
    }
}

/// Optimizes V and returns it with the weights re-solved on all predictors.
pub fn optimize_v(panel: &Panel, pred: &PredictorSet, train_fraction: f64) -> Result<(VMatrix, WeightVector)> {
    optimize_v_with(panel, pred, train_fraction, OuterSearch::default(), QpOptions::default())
}

pub fn optimize_v_with(
    panel: &Panel,
    pred: &PredictorSet,
    train_fraction: f64,
    search: OuterSearch,
    qp_opts: QpOptions,
) -> Result<(VMatrix, WeightVector)> {
    let t0 = panel.t0_index();
    if t0 < 4 {
        return Err(Error::InsufficientPrePeriods { needed: 4, have: t0 });
    }
    if !(train_fraction > 0.0) {
        return Err(Error::InvalidArgument("train fraction must be positive".into()));
    }
    let treated = panel.treated_series();
    let donors = panel.donor_matrix();
    let k = pred.k();

    let v = if train_fraction >= 1.0 {
        let all: Vec<usize> = (0..t0).collect();
        let rows: Vec<usize> = (0..k).collect();
        search_v(pred, &rows, &treated, &donors, &all, search, qp_opts)?
    } else {
        let n_train = ((t0 as f64 * train_fraction).ceil() as usize).clamp(1, t0 - 1);
        let early: Vec<usize> = (0..n_train).collect();
        let late: Vec<usize> = (n_train..t0).collect();
        let in_window = |w: &[usize], r: usize| match pred.periods[r] {
            Some(p) => w.contains(&p),
            None => true,
        };
        let rows_a: Vec<usize> = (0..k).filter(|&r| in_window(&early, r)).collect();
        let rows_b: Vec<usize> = (0..k).filter(|&r| in_window(&late, r)).collect();
        let va = search_v(pred, &rows_a, &treated, &donors, &late, search, qp_opts)?;
        let vb = search_v(pred, &rows_b, &treated, &donors, &early, search, qp_opts)?;
        // Outcome rows take their own fold's value weighted by window share;
        // covariate rows appear in both folds and are averaged.
        let share_a = early.len() as f64 / t0 as f64;
        let share_b = late.len() as f64 / t0 as f64;
        let mut v = vec![0.0; k];
        for r in 0..k {
            match pred.periods[r] {
                Some(p) if p < n_train => v[r] = va[r] * share_a,
                Some(_) => v[r] = vb[r] * share_b,
                None => v[r] = 0.5 * (va[r] + vb[r]),
            }
        }
        v
    };
    let v = VMatrix::new(v)?;
    let w = solve_weights_with(pred, &v, qp_opts)?;
    Ok((v, w))
}

/// Nelder–Mead over the simplex of V entries on `rows` (others zero),
/// minimizing the outcome MSPE on `score_periods`. Returns a full-length V
/// normalized over `rows`.
fn search_v(
    pred: &PredictorSet,
    rows: &[usize],
    treated: &[f64],
    donors: &DMatrix<f64>,
    score_periods: &[usize],
    search: OuterSearch,
    qp_opts: QpOptions,
) -> Result<Vec<f64>> {
    let sub = pred.select_rows(rows);
    let n = rows.len();
    let expand = |theta: &[f64]| -> Vec<f64> {
        let s: f64 = theta.iter().map(|t| t * t).sum();
        if s > 0.0 && s.is_finite() {
            theta.iter().map(|t| t * t / s).collect()
        } else {
            vec![1.0 / n as f64; n]
        }
    };
    let mut last_err: Option<Error> = None;
    // support of the previous solve, tried first on the next one
    let mut hint: Vec<usize> = Vec::new();
    let mut loss = |theta: &[f64]| -> f64 {
        let v = VMatrix(expand(theta));
        match solve_weights_hinted(&sub, &v, qp_opts, &hint) {
            Ok(w) => {
                hint = w.support(0.0);
                mspe_on(treated, donors, &w.0, score_periods)
            }
            Err(e) => {
                last_err = Some(e);
                f64::INFINITY
            }
        }
    };

    let nm = NelderMead {
        max_evals: search.max_evals,
        ftol: 1e-10,
        step: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..search.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.random_range(0.05..1.0)).collect()
        };
        if n == 1 {
            let f = loss(&start);
            best = Some((start, f));
            break;
        }
        let m = nm.minimize(&mut loss, &start);
        // strict improvement only: earlier restarts win ties
        if best.as_ref().is_none_or(|b| m.f < b.1) {
            best = Some((m.x, m.f));
        }
    }
    let (theta, f) = best.expect("at least one restart");
    if !f.is_finite() {
        return Err(last_err.unwrap_or(Error::SolverNonConvergence {
            iterations: qp_opts.max_iter,
            residual: f64::INFINITY,
        }));
    }
    let vs = expand(&theta);
    let mut full = vec![0.0; pred.k()];
    for (i, &r) in rows.iter().enumerate() {
        full[r] = vs[i];
    }
    Ok(full)
}

fn mspe_on(treated: &[f64], donors: &DMatrix<f64>, w: &[f64], periods: &[usize]) -> f64 {
    let mut s = 0.0;
    for &t in periods {
        let synth: f64 = (0..w.len()).map(|j| w[j] * donors[(t, j)]).sum();
        let g = treated[t] - synth;
        s += g * g;
    }
    s / periods.len() as f64
}

/// Result of a synthetic-control fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmFit {
    pub treated: String,
    pub donors: Vec<String>,
    pub weights: WeightVector,
    pub v: VMatrix,
    pub predictor_labels: Vec<String>,
    pub times: Vec<i64>,
    pub t0_index: usize,
    pub actual: Vec<f64>,
    pub synthetic: Vec<f64>,
    pub gaps: Vec<f64>,
    pub pre_rmse: f64,
    pub post_rmse: f64,
    pub att: f64,
    /// V-weighted predictor distance at the returned weights.
    pub objective: f64,
    /// Unweighted RMS distance from the treated pre-path to the donor hull.
    pub hull_distance: f64,
    /// Pre-period `(synthetic − actual) / actual` in percent.
    pub pre_bias_pct: Vec<f64>,
}

impl ScmFit {
    /// Post-period gaps (per-period treatment effects).
    pub fn effects(&self) -> &[f64] {
        &self.gaps[self.t0_index..]
    }

    pub fn pre_mspe(&self) -> f64 {
        self.pre_rmse * self.pre_rmse
    }

    /// Donor names and weights above `tol`, in donor order.
    pub fn nonzero_weights(&self, tol: f64) -> Vec<(String, f64)> {
        self.donors
            .iter()
            .zip(self.weights.0.iter())
            .filter(|(_, w)| **w > tol)
            .map(|(d, w)| (d.clone(), *w))
            .collect()
    }

    pub fn weight_of(&self, donor: &str) -> Option<f64> {
        self.donors.iter().position(|d| d == donor).map(|j| self.weights.0[j])
    }
}

/// Fits a synthetic control for the panel's treated unit.
pub fn fit(panel: &Panel, config: &ScmConfig) -> Result<ScmFit> {
    let pred = build_predictors(panel).with_covariates(panel, &config.covariates)?;
    let qp_opts = config.qp();
    let (v, w) = match &config.v_mode {
        VMode::Optimized { train_fraction } => optimize_v_with(panel, &pred, *train_fraction, config.search, qp_opts)?,
        VMode::Uniform => {
            let v = VMatrix::uniform(pred.k());
            let w = solve_weights_with(&pred, &v, qp_opts)?;
            (v, w)
        }
        VMode::Fixed { v } => {
            let v = VMatrix::new(v.clone())?;
            let w = solve_weights_with(&pred, &v, qp_opts)?;
            (v, w)
        }
    };
    let hull_w = if matches!(config.v_mode, VMode::Uniform) && config.covariates.is_empty() {
        w.clone()
    } else {
        solve_weights_with(&build_predictors(panel), &VMatrix::uniform(panel.t0_index()), qp_opts)?
    };
    Ok(assemble(panel, &pred, v, w, &hull_w))
}

/// Builds an [`ScmFit`] from given weights (used by variants that pick
/// weights some other way).
pub(crate) fn assemble(panel: &Panel, pred: &PredictorSet, v: VMatrix, w: WeightVector, hull_w: &WeightVector) -> ScmFit {
    let actual = panel.treated_series();
    let donors = panel.donor_matrix();
    let synthetic = synthetic_series(&donors, &w.0);
    let gaps: Vec<f64> = actual.iter().zip(&synthetic).map(|(a, s)| a - s).collect();
    let t0 = panel.t0_index();
    let pre_rmse = rms(&gaps[..t0]);
    let post_rmse = rms(&gaps[t0..]);
    let att = mean(&gaps[t0..]);
    let hull_synth = synthetic_series(&donors, &hull_w.0);
    let hull_distance = rms(&actual[..t0].iter().zip(&hull_synth[..t0]).map(|(a, s)| a - s).collect::<Vec<_>>());
    let pre_bias_pct = (0..t0)
        .map(|t| {
            if actual[t] != 0.0 {
                100.0 * (synthetic[t] - actual[t]) / actual[t]
            } else {
                f64::NAN
            }
        })
        .collect();
    let objective = pred.objective(&v, &w.0);
    ScmFit {
        treated: panel.treated().to_string(),
        donors: panel.donor_pool().members().to_vec(),
        weights: w,
        v,
        predictor_labels: pred.labels.clone(),
        times: panel.times().to_vec(),
        t0_index: t0,
        actual,
        synthetic,
        gaps,
        pre_rmse,
        post_rmse,
        att,
        objective,
        hull_distance,
        pre_bias_pct,
    }
}

/// `Σ_j w_j Y_{j,t}` for each period.
pub fn synthetic_series(donors: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (0..donors.nrows())
        .map(|t| (0..w.len()).map(|j| w[j] * donors[(t, j)]).sum())
        .collect()
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Converts a rate gap (per 1,000 live births) into a count of deaths.
pub fn gap_to_deaths(gap: f64, live_births: f64) -> Result<f64> {
    if live_births < 0.0 || !live_births.is_finite() {
        return Err(Error::NegativeBirths(live_births));
    }
    Ok(gap * live_births / 1000.0)
}
