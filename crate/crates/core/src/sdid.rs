//! Synthetic difference-in-differences.
//!
//! Unit weights ω make the weighted donor average parallel to the treated
//! pre-period path (an intercept absorbs level differences; a ridge term
//! `ζ²·T_pre·‖ω‖²` spreads the weights). Time weights λ make a weighted
//! average of pre-periods track each donor's post-period mean. The effect is
//! the doubly weighted difference in differences.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::qp::{self, QpOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdidWeights {
    /// One weight per donor, in donor order.
    pub omega: Vec<f64>,
    /// One weight per pre-period.
    pub lambda: Vec<f64>,
    pub zeta: f64,
}

impl SdidWeights {
    /// Equal weights everywhere, which turns the estimator into plain DiD.
    pub fn uniform(n_donors: usize, n_pre: usize) -> Self {
        Self {
            omega: vec![1.0 / n_donors as f64; n_donors],
            lambda: vec![1.0 / n_pre as f64; n_pre],
            zeta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SdidConfig {
    /// Overrides the data-driven unit-weight penalty.
    pub zeta: Option<f64>,
}

/// Standard deviation of first differences of the donors' pre-period
/// outcomes (the noise scale behind the default penalty).
pub fn noise_level(panel: &Panel) -> f64 {
    let y = panel.donor_matrix();
    let t0 = panel.t0_index();
    let d: Vec<f64> = (0..y.ncols())
        .flat_map(|j| (1..t0).map(move |t| (j, t)))
        .map(|(j, t)| y[(t, j)] - y[(t - 1, j)])
        .collect();
    if d.len() < 2 {
        return 0.0;
    }
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
}

pub fn solve_sdid_weights(panel: &Panel) -> Result<SdidWeights> {
    solve_sdid_weights_with(panel, SdidConfig::default())
}

/// ζ defaults to `(N_treated · T_post)^{1/4} · σ̂` with `σ̂` from
/// [`noise_level`].
pub fn solve_sdid_weights_with(panel: &Panel, config: SdidConfig) -> Result<SdidWeights> {
    let t0 = panel.t0_index();
    let sigma = noise_level(panel);
    let zeta = config.zeta.unwrap_or_else(|| (panel.n_post() as f64).powf(0.25) * sigma);
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(Error::InvalidArgument(format!("zeta must be finite and ≥ 0, got {zeta}")));
    }
    let donors = panel.donor_matrix();
    let pre = donors.rows(0, t0).into_owned();
    let treated = panel.treated_series();
    let omega = solve_unit_weights(&pre, &treated[..t0], zeta)?;

    let post_mean: Vec<f64> = (0..donors.ncols())
        .map(|j| donors.column(j).rows(t0, panel.n_post()).mean())
        .collect();
    let lambda = solve_time_weights(&pre.transpose(), &post_mean, 1e-6 * sigma)?;
    Ok(SdidWeights { omega, lambda, zeta })
}

/// `min_{ω ∈ Δ, ω₀} Σ_t (ω₀ + Σ_j ω_j Y_jt − y_t)² + ζ²·T·‖ω‖²` for a
/// `T × J` donor block. The intercept is profiled out by time-demeaning.
pub fn solve_unit_weights(pre: &DMatrix<f64>, target: &[f64], zeta: f64) -> Result<Vec<f64>> {
    let (t, j) = pre.shape();
    if target.len() != t {
        return Err(Error::InvalidArgument("target length must match the donor block".into()));
    }
    if j == 0 {
        return Err(Error::EmptyDonorPool);
    }
    let a = demean_columns(pre);
    let tm = target.iter().sum::<f64>() / t as f64;
    let b = DVector::from_iterator(t, target.iter().map(|v| v - tm));
    let mut h = a.transpose() * &a;
    for i in 0..j {
        h[(i, i)] += zeta * zeta * t as f64;
    }
    let c = -(a.transpose() * b);
    Ok(qp::solve_simplex_qp(&(h * 2.0), &(c * 2.0), QpOptions::default())?.w)
}

/// `min_{λ ∈ Δ, λ₀} Σ_j (λ₀ + Σ_t λ_t Y_jt − m_j)² + ζ²·J·‖λ‖²` for a
/// `J × T_pre` block and per-donor post means `m`. With a single pre-period
/// the answer is `λ = (1)`.
pub fn solve_time_weights(block: &DMatrix<f64>, post_mean: &[f64], zeta: f64) -> Result<Vec<f64>> {
    let (j, t) = block.shape();
    if post_mean.len() != j {
        return Err(Error::InvalidArgument("one post mean per donor is required".into()));
    }
    if t == 0 {
        return Err(Error::InsufficientPrePeriods { needed: 1, have: 0 });
    }
    if t == 1 {
        return Ok(vec![1.0]);
    }
    let a = demean_columns(block);
    let mm = post_mean.iter().sum::<f64>() / j as f64;
    let b = DVector::from_iterator(j, post_mean.iter().map(|v| v - mm));
    let mut h = a.transpose() * &a;
    for i in 0..t {
        h[(i, i)] += zeta * zeta * j as f64;
    }
    let c = -(a.transpose() * b);
    Ok(qp::solve_simplex_qp(&(h * 2.0), &(c * 2.0), QpOptions::default())?.w)
}

fn demean_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
    }
    out
}

/// Doubly weighted DiD: `(ȳ₁,post − λᵀy₁,pre) − Σ_j ω_j (ȳ_j,post − λᵀy_j,pre)`.
pub fn sdid_effect(panel: &Panel, weights: &SdidWeights) -> Result<f64> {
    let t0 = panel.t0_index();
    let j = panel.n_donors();
    if weights.omega.len() != j || weights.lambda.len() != t0 {
        return Err(Error::InvalidArgument(format!(
            "weights sized {}×{} do not fit a panel with {j} donors and {t0} pre-periods",
            weights.omega.len(),
            weights.lambda.len()
        )));
    }
    let contrast = |y: &[f64]| -> f64 {
        let post = y[t0..].iter().sum::<f64>() / (y.len() - t0) as f64;
        let pre: f64 = weights.lambda.iter().zip(&y[..t0]).map(|(l, v)| l * v).sum();
        post - pre
    };
    let treated = contrast(&panel.treated_series());
    let donors: f64 = panel
        .donor_indices()
        .into_iter()
        .zip(&weights.omega)
        .map(|(i, w)| w * contrast(&panel.series(i)))
        .sum();
    Ok(treated - donors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdidEstimate {
    pub att: f64,
    pub se: f64,
    /// Two-sided normal p-value of `att / se`.
    pub p_value: f64,
    pub ci: (f64, f64),
    pub weights: SdidWeights,
    /// Placebo effects used for the variance, in donor order.
    pub placebo_effects: Vec<f64>,
}

/// Effect with placebo standard error: each donor is treated as the
/// treated unit against the other donors (weights re-solved), and `se` is
/// the population standard deviation of those placebo effects.
pub fn estimate_att(panel: &Panel, weights: &SdidWeights) -> Result<SdidEstimate> {
    estimate_att_with(panel, weights, SdidConfig::default())
}

pub fn estimate_att_with(panel: &Panel, weights: &SdidWeights, config: SdidConfig) -> Result<SdidEstimate> {
    let j = panel.n_donors();
    if j < 2 {
        return Err(Error::TooFewDonorsForPlaceboVariance(j));
    }
    let att = sdid_effect(panel, weights)?;
    let donors = panel.donor_pool().members().to_vec();
    let placebo_effects = donors
        .par_iter()
        .map(|u| {
            let p = panel.reassign_treated(u)?;
            let w = solve_sdid_weights_with(&p, config)?;
            sdid_effect(&p, &w)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = placebo_effects.iter().sum::<f64>() / j as f64;
    let se = (placebo_effects.iter().map(|v| (v - m).powi(2)).sum::<f64>() / j as f64).sqrt();
    let z = att / se;
    let p_value = if se > 0.0 {
        let n = Normal::standard();
        2.0 * (1.0 - n.cdf(z.abs()))
    } else if att == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(SdidEstimate {
        att,
        se,
        p_value,
        ci: (att - 1.96 * se, att + 1.96 * se),
        weights: weights.clone(),
        placebo_effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pre_period_time_weight() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(solve_time_weights(&b, &[1.0, 1.0, 1.0], 0.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn shifted_donor_gets_the_weight() {
        // treated = donor 0 + 5; donor 1 has a different shape
        let pre = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 3.0, 2.0, 2.0, 1.0, 5.0, 1.0, 4.0, 3.0]);
        let target: Vec<f64> = (0..5).map(|t| pre[(t, 0)] + 5.0).collect();
        let w = solve_unit_weights(&pre, &target, 0.0).unwrap();
        assert!(w[0] > 0.999, "{w:?}");
    }

    #[test]
    fn weight_shape_checked() {
        let rows = DMatrix::from_fn(3, 5, |i, t| (i + t) as f64);
        let units = ["T", "A", "B"].iter().map(|s| s.to_string()).collect();
        let p = Panel::new(units, (0..5).collect(), rows, "T", 3).unwrap();
        let w = SdidWeights::uniform(2, 2);
        assert!(sdid_effect(&p, &w).is_err());
    }
}
