//! Command-line front-end logic: configuration layering, estimator dispatch
//! and report files.
//!
//! Settings come from an optional TOML file of `key = value` pairs, then
//! from flags (flags win). The seed falls back to `COUNTERFACT_SEED` and
//! then to 0. Every output is a pure function of data, configuration and
//! seed, so repeated runs produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, ErrorClass, Result};
use crate::gsc::{self, GscConfig};
use crate::inference::{self, PlaceboConfig, Tail};
use crate::lasso::{self, LassoConfig};
use crate::panel::{self, format_value, Panel};
use crate::robustness::{self, DiffTrendConfig};
use crate::scm::{self, gap_to_deaths, OuterSearch, ScmConfig, ScmFit, VMode};
use crate::sdid;

pub const SEED_ENV: &str = "COUNTERFACT_SEED";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Scm,
    Gsc,
    Sdid,
    Lasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlaceboMode {
    #[default]
    None,
    Space,
    Time,
}

/// How SCM predictor weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VModeName {
    /// Cross-fitted search over an early/late split of the pre-period.
    #[default]
    Optimized,
    /// Search scored on the whole pre-period.
    Insample,
    Uniform,
}

macro_rules! parse_via_serde {
    ($($t:ty),*) => {$(
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                serde_json::from_value(Value::String(s.to_ascii_lowercase()))
                    .map_err(|_| format!("invalid value `{s}`"))
            }
        }
    )*};
}
parse_via_serde!(Method, PlaceboMode, VModeName);

/// One layer of settings; unset keys fall through to lower layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub treated: Option<String>,
    pub t0: Option<i64>,
    pub donors: Option<Vec<String>>,
    pub method: Option<Method>,
    pub placebo: Option<PlaceboMode>,
    pub fake_t0: Option<i64>,
    pub mspe_multiplier: Option<f64>,
    pub v_mode: Option<VModeName>,
    pub lambda: Option<f64>,
    pub r_max: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub live_births: Option<f64>,
}

fn need<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidArgument(format!("missing required setting `{name}`")))
}

impl ConfigLayer {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))
    }

    /// `top` wins wherever it sets a value.
    pub fn overlay(self, top: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            data: top.data.or(self.data),
            outcome: top.outcome.or(self.outcome),
            treated: top.treated.or(self.treated),
            t0: top.t0.or(self.t0),
            donors: top.donors.or(self.donors),
            method: top.method.or(self.method),
            placebo: top.placebo.or(self.placebo),
            fake_t0: top.fake_t0.or(self.fake_t0),
            mspe_multiplier: top.mspe_multiplier.or(self.mspe_multiplier),
            v_mode: top.v_mode.or(self.v_mode),
            lambda: top.lambda.or(self.lambda),
            r_max: top.r_max.or(self.r_max),
            seed: top.seed.or(self.seed),
            jobs: top.jobs.or(self.jobs),
            out: top.out.or(self.out),
            live_births: top.live_births.or(self.live_births),
        }
    }

    /// Fills defaults and validates. `env_seed` is the value of
    /// [`SEED_ENV`], if set.
    pub fn resolve(self, env_seed: Option<&str>) -> Result<RunConfig> {
        let seed = match (self.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(s)) => s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
            (None, None) => 0,
        };
        let cfg = RunConfig {
            data: need(self.data, "data")?,
            outcome: need(self.outcome, "outcome")?,
            treated: need(self.treated, "treated")?,
            t0: need(self.t0, "t0")?,
            donors: self.donors,
            method: self.method.unwrap_or_default(),
            placebo: self.placebo.unwrap_or_default(),
            fake_t0: self.fake_t0,
            mspe_multiplier: self.mspe_multiplier.unwrap_or(2.0),
            v_mode: self.v_mode.unwrap_or_default(),
            lambda: self.lambda,
            r_max: self.r_max.unwrap_or(5),
            seed,
            jobs: self.jobs.unwrap_or(1),
            out: need(self.out, "out")?,
            live_births: self.live_births,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub outcome: String,
    pub treated: String,
    pub t0: i64,
    pub donors: Option<Vec<String>>,
    pub method: Method,
    pub placebo: PlaceboMode,
    pub fake_t0: Option<i64>,
    pub mspe_multiplier: f64,
    pub v_mode: VModeName,
    /// LASSO penalty; chosen by cross-validation when absent.
    pub lambda: Option<f64>,
    pub r_max: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    /// Annual live births for converting rate gaps into deaths.
    pub live_births: Option<f64>,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.placebo == PlaceboMode::Time && self.fake_t0.is_none() {
            return bad("placebo mode `time` needs fake_t0".into());
        }
        if !(self.mspe_multiplier > 0.0) {
            return bad(format!("mspe_multiplier must be positive, got {}", self.mspe_multiplier));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return bad(format!("lambda must be ≥ 0, got {l}"));
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if let Some(b) = self.live_births {
            if !(b >= 0.0) {
                return Err(Error::NegativeBirths(b));
            }
        }
        Ok(())
    }

    pub fn scm_config(&self) -> ScmConfig {
        let v_mode = match self.v_mode {
            VModeName::Optimized => VMode::default(),
            VModeName::Insample => VMode::Optimized { train_fraction: 1.0 },
            VModeName::Uniform => VMode::Uniform,
        };
        ScmConfig {
            v_mode,
            search: OuterSearch {
                seed: self.seed,
                ..OuterSearch::default()
            },
            ..ScmConfig::default()
        }
    }

    fn gsc_config(&self) -> GscConfig {
        GscConfig {
            r_max: self.r_max,
            seed: self.seed,
            ..GscConfig::default()
        }
    }

    fn load(&self, outcome: &str) -> Result<Panel> {
        let p = panel::load_csv(&self.data, outcome, &self.treated, self.t0)?;
        match &self.donors {
            Some(keep) => p.restrict_donors(keep),
            None => Ok(p),
        }
    }

    /// Runs `f` on a thread pool limited to `jobs` threads.
    pub fn with_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Solver => 4,
    }
}

/// Machine-readable error record.
pub fn error_record(err: &Error) -> Value {
    json!({
        "status": "error",
        "code": err.code(),
        "class": match err.class() {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Solver => "solver",
        },
        "message": err.to_string(),
        "exit_code": exit_code(err),
    })
}

/// Writes `error.json` into the output directory (best effort).
pub fn write_error(out: &Path, err: &Error) {
    if fs::create_dir_all(out).is_ok() {
        let _ = write_json(&out.join("error.json"), &error_record(err));
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format_value(v)
}

fn provenance(cfg: &RunConfig) -> Value {
    json!({
        "toolkit": "counterfact",
        "version": VERSION,
        "config": cfg,
    })
}

fn scm_json(fit: &ScmFit) -> Value {
    let weights: serde_json::Map<String, Value> = fit.donors.iter().zip(&fit.weights.0).map(|(d, w)| (d.clone(), json!(w))).collect();
    json!({
        "treated": fit.treated,
        "t0": fit.times[fit.t0_index],
        "att": fit.att,
        "pre_rmse": fit.pre_rmse,
        "post_rmse": fit.post_rmse,
        "objective": fit.objective,
        "hull_distance": fit.hull_distance,
        "weights": weights,
        "v": fit.predictor_labels.iter().zip(&fit.v.0).map(|(l, v)| json!({"predictor": l, "v": v})).collect::<Vec<_>>(),
        "effects": fit.times[fit.t0_index..].iter().zip(fit.effects()).map(|(t, g)| json!({"time": t, "gap": g})).collect::<Vec<_>>(),
        "pre_bias_pct": fit.times[..fit.t0_index].iter().zip(&fit.pre_bias_pct).map(|(t, b)| json!({"time": t, "bias_pct": b})).collect::<Vec<_>>(),
    })
}

fn gap_rows(times: &[i64], actual: &[f64], synthetic: &[f64], gaps: &[f64]) -> Vec<Vec<String>> {
    (0..times.len())
        .map(|t| vec![times[t].to_string(), num(actual[t]), num(synthetic[t]), num(gaps[t])])
        .collect()
}

fn deaths_json(effects: &[f64], births: Option<f64>) -> Result<Value> {
    let Some(b) = births else {
        return Ok(Value::Null);
    };
    let per_year = effects.iter().map(|g| gap_to_deaths(*g, b)).collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "live_births": b,
        "per_year": per_year,
        "total": per_year.iter().sum::<f64>(),
    }))
}

/// Status wrapper so one failing analysis does not hide the others.
fn cell(r: Result<Value>) -> Value {
    match r {
        Ok(mut v) => {
            if let Value::Object(m) = &mut v {
                m.insert("status".into(), json!("ok"));
            }
            v
        }
        Err(e) => error_record(&e),
    }
}

/// Executes one estimator run and writes its report files into `cfg.out`.
/// Returns the report that was written to `report.json`.
pub fn run(cfg: &RunConfig) -> Result<Value> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let panel = cfg.load(&cfg.outcome)?;
    let out = &cfg.out;
    let result = cfg.with_pool(|| match cfg.method {
        Method::Scm => run_scm(cfg, &panel, out),
        Method::Gsc => run_gsc(cfg, &panel, out),
        Method::Sdid => run_sdid(cfg, &panel, out),
        Method::Lasso => run_lasso(cfg, &panel, out),
    })??;
    let report = json!({
        "provenance": provenance(cfg),
        "method": cfg.method,
        "result": result,
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn run_scm(cfg: &RunConfig, panel: &Panel, out: &Path) -> Result<Value> {
    let sc = cfg.scm_config();
    let fit = scm::fit(panel, &sc)?;
    write_table(
        &out.join("gaps.csv"),
        &["time", "actual", "synthetic", "gap"],
        gap_rows(&fit.times, &fit.actual, &fit.synthetic, &fit.gaps),
    )?;
    let mut res = scm_json(&fit);
    res["deaths"] = deaths_json(fit.effects(), cfg.live_births)?;

    res["diff_trend"] = cell(
        robustness::diff_trend_test_with(
            &fit.gaps,
            fit.t0_index,
            DiffTrendConfig {
                seed: cfg.seed,
                ..DiffTrendConfig::default()
            },
        )
        .map(|d| json!(d)),
    );
    res["leave_one_out"] = cell(robustness::leave_one_out(panel, &sc, None).and_then(|loo| {
        write_table(
            &out.join("loo_summary.csv"),
            &["removed_unit", "att", "pre_rmse"],
            loo.refits
                .iter()
                .map(|r| vec![r.removed.clone(), num(r.fit.att), num(r.fit.pre_rmse)]),
        )?;
        Ok(json!({
            "refits": loo.refits.iter().map(|r| json!({
                "removed": r.removed,
                "att": r.fit.att,
                "pre_rmse": r.fit.pre_rmse,
                "weights": r.fit.nonzero_weights(robustness::WEIGHT_TOL).into_iter().map(|(d, w)| json!({"unit": d, "weight": w})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>()
        }))
    }));
    res["sparsity_ci"] = cell(robustness::sparsity_ci(panel, &fit, 0.95, &sc).and_then(|ci| {
        write_table(
            &out.join("ci.csv"),
            &["time", "lo", "hi", "gap"],
            ci.rows.iter().map(|r| vec![r.time.to_string(), num(r.lo), num(r.hi), num(r.gap)]),
        )?;
        Ok(json!(ci))
    }));

    match cfg.placebo {
        PlaceboMode::None => {}
        PlaceboMode::Space => {
            let pc = PlaceboConfig {
                scm: sc.clone(),
                mspe_multiplier: cfg.mspe_multiplier,
                tail: Tail::Abs,
            };
            let d = inference::in_space_placebos(panel, &pc)?;
            write_placebo_files(&d, out)?;
            res["placebo_space"] = json!({
                "mspe_multiplier": d.mspe_multiplier,
                "kept": d.kept,
                "failed": d.placebos.iter().filter(|p| p.fit.is_none()).map(|p| json!({"unit": p.unit, "error": p.error})).collect::<Vec<_>>(),
                "p_values": d.post_times.iter().zip(&d.p_values).map(|(t, p)| json!({"time": t, "p": p})).collect::<Vec<_>>(),
                "ratio_p_value": d.ratio_p_value,
                "treated_rmse_ratio": d.rmse_ratios[0].ratio,
            });
        }
        PlaceboMode::Time => {
            let fake = cfg.fake_t0.expect("validated");
            let f = inference::in_time_placebo(panel, fake, &sc)?;
            write_table(
                &out.join("in_time_gaps.csv"),
                &["time", "actual", "synthetic", "gap"],
                gap_rows(&f.times, &f.actual, &f.synthetic, &f.gaps),
            )?;
            let mean_abs = f.effects().iter().map(|g| g.abs()).sum::<f64>() / f.effects().len().max(1) as f64;
            res["placebo_time"] = json!({
                "fake_t0": fake,
                "fit": scm_json(&f),
                "mean_abs_gap_after_fake_t0": mean_abs,
            });
        }
    }
    Ok(res)
}

fn write_placebo_files(d: &inference::PlaceboDistribution, out: &Path) -> Result<()> {
    let fits = std::iter::once(&d.treated_fit).chain(d.placebos.iter().filter_map(|p| p.fit.as_ref()));
    let rows: Vec<Vec<String>> = fits
        .flat_map(|f| {
            f.times
                .iter()
                .zip(&f.gaps)
                .map(|(t, g)| vec![f.treated.clone(), t.to_string(), num(*g)])
                .collect::<Vec<_>>()
        })
        .collect();
    write_table(&out.join("placebo_gaps.csv"), &["unit", "time", "gap"], rows)?;
    write_table(
        &out.join("rmse_ratios.csv"),
        &["unit", "pre_rmse", "post_rmse", "ratio"],
        d.rmse_ratios
            .iter()
            .map(|r| vec![r.unit.clone(), num(r.pre_rmse), num(r.post_rmse), num(r.ratio)]),
    )?;
    write_table(
        &out.join("pvalues.csv"),
        &["time", "p"],
        d.post_times.iter().zip(&d.p_values).map(|(t, p)| vec![t.to_string(), num(*p)]),
    )
}

fn run_gsc(cfg: &RunConfig, panel: &Panel, out: &Path) -> Result<Value> {
    let g = gsc::estimate_att(panel, &cfg.gsc_config())?;
    write_table(
        &out.join("gsc_counterfactual.csv"),
        &["time", "actual", "counterfactual", "gap"],
        gap_rows(&g.times, &g.actual, &g.counterfactual, &g.gaps),
    )?;
    let t0 = g.t0_index;
    Ok(json!({
        "att": g.att,
        "se": g.se,
        "ci": [g.ci.0, g.ci.1],
        "p_value": g.p_value,
        "r": g.model.r,
        "cv_errors": g.cv_errors,
        "sigma2": g.model.sigma2,
        "als_iterations": g.model.iterations,
        "treated_intercept": g.treated_intercept,
        "treated_loadings": g.treated_loadings,
        "effects": g.times[t0..].iter().zip(&g.gaps[t0..]).map(|(t, e)| json!({"time": t, "gap": e})).collect::<Vec<_>>(),
        "combined_placebo": g.placebo,
        "deaths": deaths_json(&g.gaps[t0..], cfg.live_births)?,
    }))
}

fn run_sdid(cfg: &RunConfig, panel: &Panel, out: &Path) -> Result<Value> {
    let w = sdid::solve_sdid_weights(panel)?;
    let e = sdid::estimate_att(panel, &w)?;
    let donors = panel.donor_pool().members().to_vec();
    write_table(
        &out.join("omega.csv"),
        &["unit", "omega"],
        donors.iter().zip(&w.omega).map(|(d, o)| vec![d.clone(), num(*o)]),
    )?;
    write_table(
        &out.join("lambda.csv"),
        &["time", "lambda"],
        panel.times().iter().zip(&w.lambda).map(|(t, l)| vec![t.to_string(), num(*l)]),
    )?;
    Ok(json!({
        "att": e.att,
        "se": e.se,
        "p_value": e.p_value,
        "ci": [e.ci.0, e.ci.1],
        "zeta": w.zeta,
        "omega": donors.iter().zip(&w.omega).map(|(d, o)| json!({"unit": d, "omega": o})).collect::<Vec<_>>(),
        "lambda": panel.times().iter().zip(&w.lambda).map(|(t, l)| json!({"time": t, "lambda": l})).collect::<Vec<_>>(),
        "deaths": deaths_json(&vec![e.att; panel.n_post()], cfg.live_births)?,
    }))
}

fn run_lasso(cfg: &RunConfig, panel: &Panel, out: &Path) -> Result<Value> {
    let lc = LassoConfig::default();
    let (lambda, cv) = match cfg.lambda {
        Some(l) => (l, None),
        None => {
            let grid = lasso::default_grid(panel, &lc);
            let (l, errs) = lasso::cv_lambda_with(panel, &grid, &lc)?;
            (l, Some(json!({"grid": grid, "cv_error": errs})))
        }
    };
    let f = lasso::fit_lasso_sc_with(panel, lambda, &lc)?;
    write_table(
        &out.join("gaps.csv"),
        &["time", "actual", "synthetic", "gap"],
        gap_rows(&f.times, &f.actual, &f.synthetic, &f.gaps),
    )?;
    write_table(
        &out.join("signed_weights.csv"),
        &["unit", "weight"],
        f.donors.iter().zip(&f.weights.w).map(|(d, w)| vec![d.clone(), num(*w)]),
    )?;
    Ok(json!({
        "att": f.att,
        "lambda": lambda,
        "intercept": f.weights.intercept,
        "pre_rmse": f.pre_rmse,
        "post_rmse": f.post_rmse,
        "weights": f.donors.iter().zip(&f.weights.w).map(|(d, w)| json!({"unit": d, "weight": w})).collect::<Vec<_>>(),
        "effects": f.times[f.t0_index..].iter().zip(f.effects()).map(|(t, g)| json!({"time": t, "gap": g})).collect::<Vec<_>>(),
        "cv": cv,
        "deaths": deaths_json(f.effects(), cfg.live_births)?,
    }))
}

/// Outcome columns in a panel CSV (everything after `unit,time`).
pub fn outcome_columns(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?;
    Ok(h.iter().skip(2).map(|s| s.to_string()).collect())
}

/// Runs the full analysis matrix and writes `replicate.json`.
///
/// Baseline SCM for every outcome column; for the configured outcome also
/// in-space and in-time placebos, leave-one-out, the break test, sparsity
/// intervals, GSC, SDID and LASSO. When `donors` is set, the configured
/// outcome is additionally fitted on that restricted pool. Each cell
/// records its own status.
pub fn replicate(cfg: &RunConfig) -> Result<Value> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let columns = outcome_columns(&cfg.data)?;
    if !columns.contains(&cfg.outcome) {
        return Err(Error::UnknownColumn(cfg.outcome.clone()));
    }
    let full = RunConfig {
        donors: None,
        ..cfg.clone()
    };
    let sc = cfg.scm_config();
    let doc = cfg.with_pool(|| -> Result<Value> {
        let mut outcomes = serde_json::Map::new();
        for col in &columns {
            let r = full.load(col).and_then(|p| {
                let f = scm::fit(&p, &sc)?;
                write_table(
                    &cfg.out.join(format!("gaps_{col}.csv")),
                    &["time", "actual", "synthetic", "gap"],
                    gap_rows(&f.times, &f.actual, &f.synthetic, &f.gaps),
                )?;
                let mut v = scm_json(&f);
                v["deaths"] = deaths_json(f.effects(), cfg.live_births)?;
                Ok(v)
            });
            outcomes.insert(col.clone(), cell(r));
        }

        let panel = full.load(&cfg.outcome)?;
        let mut main = serde_json::Map::new();
        let pc = PlaceboConfig {
            scm: sc.clone(),
            mspe_multiplier: cfg.mspe_multiplier,
            tail: Tail::Abs,
        };
        main.insert(
            "placebo_space".into(),
            cell(inference::in_space_placebos(&panel, &pc).map(|d| {
                json!({
                    "kept": d.kept,
                    "p_values": d.post_times.iter().zip(&d.p_values).map(|(t, p)| json!({"time": t, "p": p})).collect::<Vec<_>>(),
                    "rmse_ratios": d.rmse_ratios,
                    "ratio_p_value": d.ratio_p_value,
                })
            })),
        );
        let fake = cfg
            .fake_t0
            .unwrap_or_else(|| panel.times()[panel.t0_index() / 2]);
        main.insert(
            "placebo_time".into(),
            cell(inference::in_time_placebo(&panel, fake, &sc).map(|f| {
                json!({"fake_t0": fake, "effects": f.effects(), "pre_rmse": f.pre_rmse})
            })),
        );
        match scm::fit(&panel, &sc) {
            Ok(f) => {
                main.insert(
                    "diff_trend".into(),
                    cell(
                        robustness::diff_trend_test_with(
                            &f.gaps,
                            f.t0_index,
                            DiffTrendConfig {
                                seed: cfg.seed,
                                ..DiffTrendConfig::default()
                            },
                        )
                        .map(|d| json!(d)),
                    ),
                );
                main.insert(
                    "sparsity_ci".into(),
                    cell(robustness::sparsity_ci(&panel, &f, 0.95, &sc).map(|c| json!(c))),
                );
            }
            Err(e) => {
                main.insert("diff_trend".into(), error_record(&e));
                main.insert("sparsity_ci".into(), error_record(&e));
            }
        }
        main.insert(
            "leave_one_out".into(),
            cell(robustness::leave_one_out(&panel, &sc, None).map(|l| {
                let refits: Vec<Value> = l
                    .refits
                    .iter()
                    .map(|r| json!({
                        "removed": r.removed,
                        "att": r.fit.att,
                        "weights": r.fit.nonzero_weights(robustness::WEIGHT_TOL).into_iter().map(|(d, w)| json!({"unit": d, "weight": w})).collect::<Vec<_>>(),
                    }))
                    .collect();
                json!({"baseline_att": l.baseline.att, "refits": refits})
            })),
        );
        main.insert(
            "gsc".into(),
            cell(gsc::estimate_att(&panel, &cfg.gsc_config()).map(|g| {
                json!({"att": g.att, "se": g.se, "ci": [g.ci.0, g.ci.1], "p_value": g.p_value, "r": g.model.r, "combined_placebo": g.placebo})
            })),
        );
        main.insert(
            "sdid".into(),
            cell(sdid::solve_sdid_weights(&panel).and_then(|w| {
                let e = sdid::estimate_att(&panel, &w)?;
                Ok(json!({"att": e.att, "se": e.se, "p_value": e.p_value, "ci": [e.ci.0, e.ci.1]}))
            })),
        );
        main.insert(
            "lasso".into(),
            cell((|| {
                let lc = LassoConfig::default();
                let lambda = match cfg.lambda {
                    Some(l) => l,
                    None => lasso::cv_lambda_with(&panel, &lasso::default_grid(&panel, &lc), &lc)?.0,
                };
                let f = lasso::fit_lasso_sc_with(&panel, lambda, &lc)?;
                Ok(json!({
                    "att": f.att,
                    "lambda": lambda,
                    "weights": f.donors.iter().zip(&f.weights.w).map(|(d, w)| json!({"unit": d, "weight": w})).collect::<Vec<_>>(),
                }))
            })()),
        );
        if let Some(keep) = &cfg.donors {
            main.insert(
                "restricted_pool".into(),
                cell(panel.restrict_donors(keep).and_then(|p| {
                    let f = scm::fit(&p, &sc)?;
                    Ok(scm_json(&f))
                })),
            );
        }
        Ok(json!({
            "provenance": provenance(cfg),
            "outcomes": outcomes,
            "analyses": {cfg.outcome.clone(): main},
        }))
    })??;
    write_json(&cfg.out.join("replicate.json"), &doc)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: ConfigLayer =
            toml::from_str("data = \"a.csv\"\noutcome = \"y\"\ntreated = \"T\"\nt0 = 2000\nout = \"o\"\nmethod = \"gsc\"\nseed = 4\n")
                .unwrap();
        let flags = ConfigLayer {
            method: Some(Method::Sdid),
            ..Default::default()
        };
        let cfg = file.overlay(flags).resolve(Some("9")).unwrap();
        assert_eq!(cfg.method, Method::Sdid);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.outcome, "y");
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let base = ConfigLayer {
            data: Some("a.csv".into()),
            outcome: Some("y".into()),
            treated: Some("T".into()),
            t0: Some(1),
            out: Some("o".into()),
            ..Default::default()
        };
        assert_eq!(base.clone().resolve(Some("17")).unwrap().seed, 17);
        assert_eq!(base.clone().resolve(None).unwrap().seed, 0);
        assert!(base.resolve(Some("x")).is_err());
    }

    #[test]
    fn config_errors_map_to_exit_2() {
        let e = ConfigLayer::default().resolve(None).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let unknown: std::result::Result<ConfigLayer, _> = toml::from_str("colour = 1");
        assert!(unknown.is_err());
        assert_eq!(exit_code(&Error::MissingCell { unit: "A".into(), time: 1 }), 3);
        assert_eq!(exit_code(&Error::NonConvergence(3)), 4);
    }

    #[test]
    fn enum_names_parse() {
        assert_eq!("LASSO".parse::<Method>().unwrap(), Method::Lasso);
        assert_eq!("space".parse::<PlaceboMode>().unwrap(), PlaceboMode::Space);
        assert!("foo".parse::<VModeName>().is_err());
    }
}
