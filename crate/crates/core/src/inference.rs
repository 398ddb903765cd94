//! Permutation inference for synthetic-control fits.
//!
//! Every donor is treated in turn as if it had received the intervention.
//! Its synthetic control is built from the remaining donors (the real
//! treated unit is never a placebo donor). Per-period p-values compare the
//! treated effect with the placebo effects of units whose pre-period fit is
//! comparable to the treated fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::scm::{self, ScmConfig, ScmFit};

/// Which placebo effects count as "at least as extreme".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// `|θ_j| ≥ |θ_1|`.
    #[default]
    Abs,
    /// `θ_j ≥ θ_1` (upper tail only).
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboConfig {
    pub scm: ScmConfig,
    /// Placebos with pre-MSPE above `multiplier ×` the treated pre-MSPE are
    /// dropped. `f64::INFINITY` keeps everyone.
    pub mspe_multiplier: f64,
    pub tail: Tail,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self {
            scm: ScmConfig::default(),
            mspe_multiplier: 2.0,
            tail: Tail::Abs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRun {
    pub unit: String,
    pub fit: Option<ScmFit>,
    /// Error code and message when the placebo fit failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRatio {
    pub unit: String,
    pub pre_rmse: f64,
    pub post_rmse: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboDistribution {
    pub treated_fit: ScmFit,
    /// One entry per donor, in donor order.
    pub placebos: Vec<PlaceboRun>,
    /// Treated unit first, then every successful placebo.
    pub rmse_ratios: Vec<RmseRatio>,
    /// Placebo units surviving the MSPE filter.
    pub kept: Vec<String>,
    pub mspe_multiplier: f64,
    pub tail: Tail,
    /// Post-period times, aligned with `p_values`.
    pub post_times: Vec<i64>,
    pub p_values: Vec<f64>,
    /// Share of kept placebos whose RMSE ratio is at least the treated one.
    pub ratio_p_value: f64,
}

impl PlaceboDistribution {
    fn successful(&self) -> impl Iterator<Item = &ScmFit> {
        self.placebos.iter().filter_map(|p| p.fit.as_ref())
    }

    fn kept_fits(&self) -> Vec<&ScmFit> {
        self.successful().filter(|f| self.kept.contains(&f.treated)).collect()
    }

    /// Number of placebo units the p-values are computed over.
    pub fn n_kept(&self) -> usize {
        self.kept.len()
    }

    fn recompute(&mut self) {
        let kept = self.kept_fits();
        let n = kept.len() as f64;
        let t0 = self.treated_fit.t0_index;
        let treated = self.treated_fit.effects().to_vec();
        let extreme = |placebo: f64, actual: f64| match self.tail {
            Tail::Abs => placebo.abs() >= actual.abs(),
            Tail::Upper => placebo >= actual,
        };
        let p_values: Vec<f64> = treated
            .iter()
            .enumerate()
            .map(|(s, &th)| {
                let m = kept.iter().filter(|f| extreme(f.gaps[t0 + s], th)).count();
                m as f64 / n
            })
            .collect();
        let treated_ratio = self.rmse_ratios[0].ratio;
        let m = self
            .rmse_ratios
            .iter()
            .skip(1)
            .filter(|r| self.kept.contains(&r.unit) && r.ratio >= treated_ratio)
            .count();
        self.ratio_p_value = m as f64 / n;
        self.p_values = p_values;
    }
}

fn ratio_of(fit: &ScmFit) -> RmseRatio {
    RmseRatio {
        unit: fit.treated.clone(),
        pre_rmse: fit.pre_rmse,
        post_rmse: fit.post_rmse,
        ratio: if fit.pre_rmse > 0.0 {
            fit.post_rmse / fit.pre_rmse
        } else {
            f64::INFINITY
        },
    }
}

/// Refits the panel with each donor as a placebo treated unit, then filters
/// by `config.mspe_multiplier` and computes p-values.
pub fn in_space_placebos(panel: &Panel, config: &PlaceboConfig) -> Result<PlaceboDistribution> {
    if panel.n_donors() < 2 {
        return Err(Error::InvalidArgument("in-space placebos need at least 2 donors".into()));
    }
    let treated_fit = scm::fit(panel, &config.scm)?;
    let donors = panel.donor_pool().members().to_vec();
    let placebos: Vec<PlaceboRun> = donors
        .par_iter()
        .map(|unit| {
            let res = panel.reassign_treated(unit).and_then(|p| scm::fit(&p, &config.scm));
            match res {
                Ok(fit) => PlaceboRun {
                    unit: unit.clone(),
                    fit: Some(fit),
                    error: None,
                },
                Err(e) => PlaceboRun {
                    unit: unit.clone(),
                    fit: None,
                    error: Some(format!("{}: {e}", e.code())),
                },
            }
        })
        .collect();
    if placebos.iter().all(|p| p.fit.is_none()) {
        return Err(Error::AllPlacebosFailed);
    }
    let mut rmse_ratios = vec![ratio_of(&treated_fit)];
    rmse_ratios.extend(placebos.iter().filter_map(|p| p.fit.as_ref()).map(ratio_of));
    let post_times = panel.times()[panel.t0_index()..].to_vec();
    let dist = PlaceboDistribution {
        treated_fit,
        kept: Vec::new(),
        placebos,
        rmse_ratios,
        mspe_multiplier: f64::INFINITY,
        tail: config.tail,
        post_times,
        p_values: Vec::new(),
        ratio_p_value: f64::NAN,
    };
    filter_mspe(&dist, config.mspe_multiplier)
}

/// Keeps placebos whose pre-period MSPE is at most `multiplier ×` the
/// treated unit's and recomputes the p-values over them. The filter always
/// starts from the full set of successful placebos.
pub fn filter_mspe(dist: &PlaceboDistribution, multiplier: f64) -> Result<PlaceboDistribution> {
    if !(multiplier > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "MSPE multiplier must be positive, got {multiplier}"
        )));
    }
    let bound = multiplier * dist.treated_fit.pre_mspe();
    let kept: Vec<String> = dist
        .successful()
        .filter(|f| multiplier == f64::INFINITY || f.pre_mspe() <= bound)
        .map(|f| f.treated.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::NoSurvivingPlacebos);
    }
    let mut out = dist.clone();
    out.kept = kept;
    out.mspe_multiplier = multiplier;
    out.recompute();
    Ok(out)
}

/// Backdated fit: drops every period from the true intervention on and
/// pretends the intervention happened at `fake_t0`. Its "post" gaps cover
/// `[fake_t0, T0)`. When `fake_t0` is the true intervention period the
/// ordinary fit is returned, whose pre-period part is the requested fit.
pub fn in_time_placebo(panel: &Panel, fake_t0: i64, config: &ScmConfig) -> Result<ScmFit> {
    if fake_t0 == panel.t0() {
        return scm::fit(panel, config);
    }
    let idx = panel
        .times()
        .iter()
        .position(|&t| t == fake_t0)
        .ok_or(Error::T0OutOfRange(fake_t0))?;
    if idx < 2 || idx + 2 > panel.t0_index() {
        return Err(Error::T0OutOfRange(fake_t0));
    }
    let backdated = panel.backdate(fake_t0)?;
    scm::fit(&backdated, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn toy() -> Panel {
        // treated tracks donor A closely; donor C is far off
        let rows: [[f64; 6]; 4] = [
            [1.0, 2.0, 3.0, 4.0, 6.0, 7.0],
            [1.1, 2.0, 3.1, 4.0, 5.0, 5.1],
            [2.0, 1.0, 2.5, 3.0, 3.5, 3.9],
            [9.0, 4.0, 8.0, 1.0, 7.0, 2.0],
        ];
        let m = DMatrix::from_fn(4, 6, |i, j| rows[i][j]);
        let units = ["T", "A", "B", "C"].iter().map(|s| s.to_string()).collect();
        Panel::new(units, (2000..2006).collect(), m, "T", 4).unwrap()
    }

    fn config() -> PlaceboConfig {
        PlaceboConfig {
            scm: ScmConfig::uniform(),
            mspe_multiplier: f64::INFINITY,
            tail: Tail::Abs,
        }
    }

    #[test]
    fn p_values_are_fractions_of_kept() {
        let d = in_space_placebos(&toy(), &config()).unwrap();
        assert_eq!(d.placebos.len(), 3);
        assert_eq!(d.n_kept(), 3);
        for p in &d.p_values {
            let m = p * 3.0;
            assert!((m - m.round()).abs() < 1e-12 && (0.0..=1.0).contains(p));
        }
        assert_eq!(d.rmse_ratios[0].unit, "T");
        // placebo donor pools never contain the treated unit
        for p in &d.placebos {
            assert!(!p.fit.as_ref().unwrap().donors.contains(&"T".to_string()));
        }
    }

    #[test]
    fn filter_drops_poor_fits_and_is_monotone() {
        let d = in_space_placebos(&toy(), &config()).unwrap();
        let mut last = usize::MAX;
        for m in [f64::INFINITY, 1e6, 100.0, 10.0, 2.0, 1.0] {
            match filter_mspe(&d, m) {
                Ok(f) => {
                    assert!(f.n_kept() <= last);
                    last = f.n_kept();
                }
                Err(Error::NoSurvivingPlacebos) => last = 0,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(filter_mspe(&d, 0.0).is_err());
    }

    #[test]
    fn upper_tail_counts_signed_effects() {
        let mut c = config();
        c.tail = Tail::Upper;
        let d = in_space_placebos(&toy(), &c).unwrap();
        let t0 = d.treated_fit.t0_index;
        for (s, p) in d.p_values.iter().enumerate() {
            let th = d.treated_fit.gaps[t0 + s];
            let m = d.placebos.iter().filter(|r| r.fit.as_ref().unwrap().gaps[t0 + s] >= th).count();
            assert_eq!(*p, m as f64 / 3.0);
        }
    }

    #[test]
    fn in_time_bounds() {
        let rows = DMatrix::from_fn(3, 10, |i, j| (i + 1) as f64 + j as f64 * 0.1);
        let units = ["T", "A", "B"].iter().map(|s| s.to_string()).collect();
        let p = Panel::new(units, (1990..2000).collect(), rows, "T", 7).unwrap();
        let c = ScmConfig::uniform();
        let f = in_time_placebo(&p, 1994, &c).unwrap();
        assert_eq!(f.times.len(), 7);
        assert_eq!(f.t0_index, 4);
        assert!(matches!(in_time_placebo(&p, 1996, &c), Err(Error::T0OutOfRange(1996))));
        assert!(matches!(in_time_placebo(&p, 1991, &c), Err(Error::T0OutOfRange(1991))));
        assert!(matches!(in_time_placebo(&p, 1980, &c), Err(Error::T0OutOfRange(1980))));
        assert_eq!(in_time_placebo(&p, 1997, &c).unwrap().times.len(), 10);
    }
}
