//! Robustness checks for a synthetic-control fit: leave-one-out refits, a
//! structural-break test on the gap series and rank-inversion intervals
//! built from placebos within the sparse donor set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::scm::{self, ScmConfig, ScmFit};

/// Weights at or below this count as zero when picking donors to drop.
pub const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooFit {
    pub removed: String,
    pub fit: ScmFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub baseline: ScmFit,
    /// Refits in donor order.
    pub refits: Vec<LooFit>,
}

/// Refits after removing each donor in `units`, or each donor with nonzero
/// baseline weight when `units` is `None`.
pub fn leave_one_out(panel: &Panel, config: &ScmConfig, units: Option<&[String]>) -> Result<LeaveOneOut> {
    if panel.n_donors() < 2 {
        return Err(Error::EmptyDonorPool);
    }
    let baseline = scm::fit(panel, config)?;
    let targets: Vec<String> = match units {
        Some(u) => {
            for name in u {
                if !baseline.donors.contains(name) {
                    return Err(Error::UnknownUnit(name.clone()));
                }
            }
            // keep donor order regardless of how the list was given
            baseline.donors.iter().filter(|d| u.contains(d)).cloned().collect()
        }
        None => baseline.nonzero_weights(WEIGHT_TOL).into_iter().map(|(d, _)| d).collect(),
    };
    let refits = targets
        .par_iter()
        .map(|unit| {
            let p = panel.drop_donor(unit)?;
            Ok(LooFit {
                removed: unit.clone(),
                fit: scm::fit(&p, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LeaveOneOut { baseline, refits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffTrendConfig {
    pub n_lags: usize,
    /// Wild-bootstrap replicates for the reported p-value (0 = asymptotic only).
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for DiffTrendConfig {
    fn default() -> Self {
        Self {
            n_lags: 2,
            bootstrap: 1999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTrendResult {
    /// Robust Wald statistic for `post = trend×post = 0` (2 degrees of freedom).
    pub chi2: f64,
    /// Wild-bootstrap p-value; equals `p_asymptotic` when no replicates run.
    pub p_value: f64,
    /// χ²(2) tail probability of `chi2`.
    pub p_asymptotic: f64,
    pub n_lags: usize,
    pub n_obs: usize,
    /// Intercept, post, trend, trend×post, then the lags.
    pub coefficients: Vec<f64>,
}

pub fn diff_trend_test(gaps: &[f64], t0_index: usize) -> Result<DiffTrendResult> {
    diff_trend_test_with(gaps, t0_index, DiffTrendConfig::default())
}

/// Regresses `gap_t` on `[1, post_t, trend_t, trend_t·post_t, gap_{t-1}, …,
/// gap_{t-L}]` with `trend_t = t − t0` and tests the two break terms with an
/// HC1 Wald statistic.
///
/// The p-value comes from a recursive wild bootstrap under the no-break
/// model (Rademacher multipliers on the restricted residuals), because with
/// a few dozen observations and lagged regressors the χ² reference
/// distribution over-rejects badly.
pub fn diff_trend_test_with(gaps: &[f64], t0_index: usize, config: DiffTrendConfig) -> Result<DiffTrendResult> {
    let lags = config.n_lags;
    let needed = lags + 2;
    let pre = t0_index.saturating_sub(lags);
    let post = gaps.len().saturating_sub(t0_index);
    if t0_index < lags || pre < needed || post < needed {
        return Err(Error::InsufficientObservations {
            needed,
            have: pre.min(post),
        });
    }
    if gaps.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("gap series must be finite".into()));
    }
    let (chi2, beta) = break_wald(gaps, t0_index, lags)?;
    let chi = ChiSquared::new(2.0).expect("valid dof");
    let p_asymptotic = if chi2.is_finite() { chi.sf(chi2) } else { 0.0 };

    let p_value = if config.bootstrap == 0 {
        p_asymptotic
    } else {
        let exceed = bootstrap_exceedances(gaps, t0_index, lags, chi2, config)?;
        (1 + exceed) as f64 / (config.bootstrap + 1) as f64
    };
    Ok(DiffTrendResult {
        chi2,
        p_value,
        p_asymptotic,
        n_lags: lags,
        n_obs: gaps.len() - lags,
        coefficients: beta,
    })
}

fn design(gaps: &[f64], t0: usize, lags: usize, with_break: bool) -> (DMatrix<f64>, DVector<f64>) {
    let n = gaps.len() - lags;
    let p = if with_break { 4 } else { 2 } + lags;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (row, t) in (lags..gaps.len()).enumerate() {
        let trend = t as f64 - t0 as f64;
        let d = if t >= t0 { 1.0 } else { 0.0 };
        let mut c = 0;
        x[(row, c)] = 1.0;
        c += 1;
        if with_break {
            x[(row, c)] = d;
            c += 1;
        }
        x[(row, c)] = trend;
        c += 1;
        if with_break {
            x[(row, c)] = trend * d;
            c += 1;
        }
        for l in 1..=lags {
            x[(row, c)] = gaps[t - l];
            c += 1;
        }
        y[row] = gaps[t];
    }
    (x, y)
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    // rank check on column-normalized X so the verdict does not depend on units
    let mut xn = x.clone();
    for mut col in xn.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::SingularDesign);
        }
        col /= norm;
    }
    let sv = xn.singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::SingularDesign);
    }
    let xtx = x.transpose() * x;
    let inv = xtx.try_inverse().ok_or(Error::SingularDesign)?;
    let beta = &inv * (x.transpose() * y);
    let resid = y - x * &beta;
    Ok((inv, beta, resid))
}

/// HC1 Wald statistic on the post and trend×post coefficients.
fn break_wald(gaps: &[f64], t0: usize, lags: usize) -> Result<(f64, Vec<f64>)> {
    let (x, y) = design(gaps, t0, lags, true);
    let (inv, beta, e) = ols(&x, &y)?;
    let (n, k) = x.shape();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i);
        meat += xi.transpose() * xi * (e[i] * e[i]);
    }
    let cov = &inv * meat * &inv * (n as f64 / (n - k) as f64);
    let idx = [1usize, 3];
    let rb = DVector::from_iterator(2, idx.iter().map(|&i| beta[i]));
    let rvr = DMatrix::from_fn(2, 2, |a, b| cov[(idx[a], idx[b])]);
    let tss: f64 = y.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let rss: f64 = e.iter().map(|v| v * v).sum();
    let chi2 = if rss <= 1e-24 * tss {
        // exact fit: any nonzero break is infinitely significant
        if rb.amax() > 1e-10 * y.amax().max(1.0) {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        match rvr.try_inverse() {
            Some(m) => (rb.transpose() * m * &rb)[(0, 0)].max(0.0),
            None => return Err(Error::SingularDesign),
        }
    };
    Ok((chi2, beta.iter().copied().collect()))
}

fn bootstrap_exceedances(gaps: &[f64], t0: usize, lags: usize, chi2: f64, config: DiffTrendConfig) -> Result<usize> {
    let (xr, yr) = design(gaps, t0, lags, false);
    let (_, b, e) = ols(&xr, &yr)?;
    let n = gaps.len();
    let exceed = (0..config.bootstrap)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let mut g = gaps.to_vec();
            for t in lags..n {
                let trend = t as f64 - t0 as f64;
                let mut v = b[0] + b[1] * trend;
                for l in 1..=lags {
                    v += b[1 + l] * g[t - l];
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                g[t] = v + sign * e[t - lags];
            }
            match break_wald(&g, t0, lags) {
                Ok((c, _)) => usize::from(c >= chi2),
                // a degenerate replicate carries no evidence against the null
                Err(_) => 1,
            }
        })
        .sum();
    Ok(exceed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub time: i64,
    pub lo: f64,
    pub hi: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityCi {
    pub level: f64,
    /// Donors with nonzero weight in the fit.
    pub sparse_donors: Vec<String>,
    /// Number of pooled placebo effects the intervals are inverted from.
    pub n_reference: usize,
    /// Half-width shared by every post-period interval.
    pub half_width: f64,
    pub rows: Vec<CiRow>,
}

/// Post-period intervals from inverting a rank test.
///
/// Each donor with nonzero weight is treated in turn as a placebo and
/// re-fitted from the other nonzero-weight donors. The post-period placebo
/// effects, pooled over units and periods, form the reference set `R`
/// (`n = |R|`). The null "effect at t equals τ" is kept when
/// `(1 + #{r ∈ R : |r| ≥ |gap_t − τ|}) / (n + 1) > 1 − level`, which gives
/// `gap_t ± a_(q)` with `a` the sorted `|R|` (descending) and
/// `q = ⌊(1 − level)(n + 1)⌋`. The interval is unbounded when `q = 0`.
pub fn sparsity_ci(panel: &Panel, fit: &ScmFit, level: f64, config: &ScmConfig) -> Result<SparsityCi> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {level}")));
    }
    let sparse: Vec<String> = fit.nonzero_weights(WEIGHT_TOL).into_iter().map(|(d, _)| d).collect();
    if sparse.is_empty() {
        return Err(Error::EmptyDonorPool);
    }
    let alpha = 1.0 - level;
    let t0 = panel.t0_index();
    let n_ref = if sparse.len() >= 2 { sparse.len() * panel.n_post() } else { 0 };
    let q = (alpha * (n_ref + 1) as f64 + 1e-9).floor() as usize;
    if q == 0 {
        return Err(Error::TooFewDonorsForLevel {
            donors: sparse.len(),
            level,
        });
    }
    let sub = panel.restrict_donors(&sparse)?;
    let placebo_gaps = sparse
        .par_iter()
        .map(|u| {
            let p = sub.reassign_treated(u)?;
            let f = scm::fit(&p, config)?;
            Ok(f.effects().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut abs: Vec<f64> = placebo_gaps.into_iter().flatten().map(f64::abs).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    let half = abs[q - 1];
    let rows = (t0..panel.n_times())
        .map(|t| CiRow {
            time: panel.times()[t],
            lo: fit.gaps[t] - half,
            hi: fit.gaps[t] + half,
            gap: fit.gaps[t],
        })
        .collect();
    Ok(SparsityCi {
        level,
        sparse_donors: sparse,
        n_reference: abs.len(),
        half_width: half,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn too_short_series_rejected() {
        let g = vec![0.0; 7];
        assert!(matches!(diff_trend_test(&g, 4), Err(Error::InsufficientObservations { .. })));
    }

    #[test]
    fn step_break_detected() {
        let mut g = vec![0.0; 30];
        for v in g.iter_mut().skip(19) {
            *v = 1.0;
        }
        let r = diff_trend_test(&g, 19).unwrap();
        assert!(r.chi2 > 1e6 && r.p_value < 0.01, "{r:?}");
    }

    #[test]
    fn shift_invariance() {
        let g = noise(30, 3);
        let h: Vec<f64> = g.iter().map(|v| v + 7.5).collect();
        let a = diff_trend_test(&g, 19).unwrap();
        let b = diff_trend_test(&h, 19).unwrap();
        assert!((a.chi2 - b.chi2).abs() < 1e-8 * a.chi2.max(1.0));
    }

    #[test]
    fn constant_series_is_singular() {
        assert!(matches!(diff_trend_test(&[2.0; 30], 19), Err(Error::SingularDesign)));
    }

    #[test]
    fn bootstrap_p_is_on_the_grid() {
        let c = DiffTrendConfig {
            bootstrap: 99,
            ..Default::default()
        };
        let r = diff_trend_test_with(&noise(30, 5), 19, c).unwrap();
        let m = r.p_value * 100.0;
        assert!((m - m.round()).abs() < 1e-9 && r.p_value > 0.0 && r.p_value <= 1.0);
    }
}
