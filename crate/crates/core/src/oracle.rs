//! Ground truth for tests and simulation studies.
//!
//! * [`simulate_panel`] draws a panel from the latent factor model
//!   `Y_it = η_t + μ_tᵀφ_i + σ ε_it` (plus an additive effect on the treated
//!   unit after the intervention).
//! * [`brute_force_weights`] enumerates a simplex grid to find the best
//!   donor weights for small pools. It shares no code with the QP solver.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::scm::{PredictorSet, VMatrix, WeightVector};

/// Post-period additive effect on the treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Effect {
    Constant(f64),
    PerPeriod(Vec<f64>),
}

impl Effect {
    fn at(&self, post_index: usize) -> f64 {
        match self {
            Effect::Constant(v) => *v,
            Effect::PerPeriod(v) => v.get(post_index).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDgpSpec {
    /// Number of donors (the panel has `n_donors + 1` units).
    pub n_donors: usize,
    pub n_times: usize,
    /// Number of pre-intervention periods.
    pub t0: usize,
    pub n_factors: usize,
    pub eta_scale: f64,
    pub factor_scale: f64,
    pub loading_scale: f64,
    pub noise_sigma: f64,
    pub effect: Effect,
    /// Common level added to every cell so rates stay positive.
    pub baseline: f64,
    /// First period label.
    pub start: i64,
    pub seed: u64,
    /// Optional `(n_donors + 1) × n_times` covariate contribution `π_t·Z_i`.
    #[serde(default)]
    pub covariate_term: Option<Vec<Vec<f64>>>,
}

impl Default for FactorDgpSpec {
    fn default() -> Self {
        Self {
            n_donors: 10,
            n_times: 30,
            t0: 19,
            n_factors: 2,
            eta_scale: 1.0,
            factor_scale: 1.0,
            loading_scale: 1.0,
            noise_sigma: 0.05,
            effect: Effect::Constant(0.0),
            baseline: 10.0,
            start: 1,
            seed: 7,
            covariate_term: None,
        }
    }
}

/// Draws that make up one simulated panel, kept for tests that need the
/// generating factors.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: Panel,
    /// T × r.
    pub factors: DMatrix<f64>,
    /// (J+1) × r, treated unit first.
    pub loadings: DMatrix<f64>,
    pub time_effects: Vec<f64>,
    /// Outcomes without the treatment effect (same noise draw).
    pub untreated: DMatrix<f64>,
}

// Independent random streams per model component.
const STREAM_ETA: u64 = 1;
const STREAM_FACTORS: u64 = 2;
const STREAM_LOADINGS: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn simulate_panel(spec: &FactorDgpSpec) -> Result<Panel> {
    simulate(spec).map(|s| s.panel)
}

/// Simulates a panel and returns the generating components alongside it.
pub fn simulate(spec: &FactorDgpSpec) -> Result<SimulatedPanel> {
    let n = spec.n_donors + 1;
    let t = spec.n_times;
    let r = spec.n_factors;
    if spec.n_donors == 0 || spec.t0 < 2 || spec.t0 >= t {
        return Err(Error::InvalidArgument(
            "simulation needs ≥1 donor, ≥2 pre-periods and ≥1 post-period".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be ≥ 0".into()));
    }

    let eta: Vec<f64> = normals(&mut stream(spec.seed, STREAM_ETA), t)
        .into_iter()
        .map(|v| v * spec.eta_scale)
        .collect();
    let mut frng = stream(spec.seed, STREAM_FACTORS);
    let mut factors = DMatrix::zeros(t, r);
    for k in 0..r {
        for s in 0..t {
            let z: f64 = StandardNormal.sample(&mut frng);
            factors[(s, k)] = spec.factor_scale * z;
        }
    }
    let mut lrng = stream(spec.seed, STREAM_LOADINGS);
    let mut loadings = DMatrix::zeros(n, r);
    for i in 0..n {
        for k in 0..r {
            let z: f64 = StandardNormal.sample(&mut lrng);
            loadings[(i, k)] = spec.loading_scale * z;
        }
    }
    let mut nrng = stream(spec.seed, STREAM_NOISE);
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        for s in 0..t {
            let e: f64 = StandardNormal.sample(&mut nrng);
            let common: f64 = (0..r).map(|k| factors[(s, k)] * loadings[(i, k)]).sum();
            let cov = spec
                .covariate_term
                .as_ref()
                .and_then(|c| c.get(i).and_then(|row| row.get(s)))
                .copied()
                .unwrap_or(0.0);
            y[(i, s)] = spec.baseline + eta[s] + common + cov + spec.noise_sigma * e;
        }
    }
    // keep rates non-negative with a common shift (absorbed by η)
    let lo = y.min();
    if lo < 0.0 {
        y.add_scalar_mut(-lo);
    }
    let untreated = y.clone();
    for s in spec.t0..t {
        y[(0, s)] += spec.effect.at(s - spec.t0);
    }
    if y.min() < 0.0 {
        return Err(Error::InvalidArgument(
            "treatment effect drives the treated outcome negative".into(),
        ));
    }
    let units: Vec<String> = std::iter::once("TREATED".to_string())
        .chain((1..n).map(|i| format!("D{i:02}")))
        .collect();
    let times: Vec<i64> = (0..t as i64).map(|s| spec.start + s).collect();
    let panel = Panel::new(units, times, y, "TREATED", spec.t0)?;
    Ok(SimulatedPanel {
        panel,
        factors,
        loadings,
        time_effects: eta,
        untreated,
    })
}

/// Grid minimizer of `f` over the simplex in `dim` dimensions with spacing
/// `step` (which must divide one). Ties keep the first grid point visited.
pub fn brute_force_simplex<F: FnMut(&[f64]) -> f64>(dim: usize, step: f64, mut f: F) -> Result<(Vec<f64>, f64)> {
    if dim == 0 {
        return Err(Error::EmptyDonorPool);
    }
    let n = (1.0 / step).round() as usize;
    if n == 0 || ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("grid step {step} must divide 1")));
    }
    let mut counts = vec![0usize; dim];
    let mut best = (Vec::new(), f64::INFINITY);
    let mut w = vec![0.0; dim];
    // enumerate compositions of n into `dim` parts
    fn rec<F: FnMut(&[f64]) -> f64>(
        i: usize,
        left: usize,
        n: usize,
        counts: &mut [usize],
        w: &mut [f64],
        f: &mut F,
        best: &mut (Vec<f64>, f64),
    ) {
        let dim = counts.len();
        if i == dim - 1 {
            counts[i] = left;
            for (wj, c) in w.iter_mut().zip(counts.iter()) {
                *wj = *c as f64 / n as f64;
            }
            let v = f(w);
            if v < best.1 {
                *best = (w.to_vec(), v);
            }
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, n, counts, w, f, best);
        }
    }
    rec(0, n, n, &mut counts, &mut w, &mut f, &mut best);
    Ok(best)
}

/// Exhaustive grid search for the V-weighted synthetic-control objective.
pub fn brute_force_weights(pred: &PredictorSet, v: &VMatrix, step: f64) -> Result<WeightVector> {
    let j = pred.n_donors();
    if j > 4 {
        return Err(Error::DonorPoolTooLarge(j));
    }
    // objective written out directly, independent of PredictorSet helpers
    let k = pred.k();
    let (w, _) = brute_force_simplex(j, step, |w| {
        let mut s = 0.0;
        for m in 0..k {
            let mut synth = 0.0;
            for (jj, wj) in w.iter().enumerate() {
                synth += wj * pred.x_donors[(m, jj)];
            }
            let d = pred.x_treated[m] - synth;
            s += v.0[m] * d * d;
        }
        s
    })?;
    Ok(WeightVector(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn zero_noise_zero_factors_share_eta() {
        let spec = FactorDgpSpec {
            n_factors: 0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let p = simulate_panel(&spec).unwrap();
        let y = p.outcomes();
        for i in 1..y.nrows() {
            assert_eq!(y.row(i), y.row(0));
        }
    }

    #[test]
    fn effect_is_exact_without_noise() {
        let spec = FactorDgpSpec {
            noise_sigma: 0.0,
            effect: Effect::Constant(1.0),
            ..Default::default()
        };
        let s = simulate(&spec).unwrap();
        let y = s.panel.outcomes();
        for t in 0..spec.n_times {
            let d = y[(0, t)] - s.untreated[(0, t)];
            let want = if t >= spec.t0 { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-12);
        }
        // donors untouched
        for i in 1..y.nrows() {
            assert_eq!(y.row(i), s.untreated.row(i));
        }
    }

    #[test]
    fn per_period_effect() {
        let spec = FactorDgpSpec {
            n_times: 6,
            t0: 4,
            effect: Effect::PerPeriod(vec![0.5, 2.0]),
            ..Default::default()
        };
        let s = simulate(&spec).unwrap();
        let y = s.panel.outcomes();
        assert!((y[(0, 4)] - s.untreated[(0, 4)] - 0.5).abs() < 1e-12);
        assert!((y[(0, 5)] - s.untreated[(0, 5)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_finds_duplicate_of_treated() {
        let pred = PredictorSet {
            labels: vec!["a".into(), "b".into()],
            x_treated: DVector::from_vec(vec![1.0, 2.0]),
            x_donors: DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 3.0, 0.0, 2.0, 1.0]),
            periods: vec![Some(0), Some(1)],
        };
        let w = brute_force_weights(&pred, &VMatrix::uniform(2), 0.01).unwrap();
        assert_eq!(w.0, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn grid_midpoint_is_half_half() {
        let pred = PredictorSet {
            labels: vec!["a".into()],
            x_treated: DVector::from_vec(vec![2.0]),
            x_donors: DMatrix::from_row_slice(1, 2, &[1.0, 3.0]),
            periods: vec![Some(0)],
        };
        let w = brute_force_weights(&pred, &VMatrix::uniform(1), 0.005).unwrap();
        assert!((w.0[0] - 0.5).abs() < 1e-12 && (w.0[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_large_pools_and_bad_steps() {
        let pred = PredictorSet {
            labels: vec!["a".into()],
            x_treated: DVector::from_vec(vec![2.0]),
            x_donors: DMatrix::from_element(1, 5, 1.0),
            periods: vec![Some(0)],
        };
        assert!(matches!(
            brute_force_weights(&pred, &VMatrix::uniform(1), 0.01),
            Err(Error::DonorPoolTooLarge(5))
        ));
        assert!(brute_force_simplex(2, 0.3, |_| 0.0).is_err());
    }
}
