use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use counterfact::cli::{self, ConfigLayer, Method, PlaceboMode, VModeName};
use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::Error;

#[derive(Parser)]
#[command(name = "counterfact", version, about = "Synthetic control estimators for panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator and write its report files.
    Run(RunArgs),
    /// Run the full analysis matrix and write replicate.json.
    Replicate(RunArgs),
    /// Write a simulated factor-model panel as CSV.
    Simulate(SimArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file of key = value settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    treated: Option<String>,
    /// First treated period.
    #[arg(long, allow_hyphen_values = true)]
    t0: Option<i64>,
    /// Comma-separated donor keep-list.
    #[arg(long, value_delimiter = ',')]
    donors: Option<Vec<String>>,
    /// scm, gsc, sdid or lasso.
    #[arg(long)]
    method: Option<Method>,
    /// none, space or time.
    #[arg(long)]
    placebo: Option<PlaceboMode>,
    #[arg(long, allow_hyphen_values = true)]
    fake_t0: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    mspe_multiplier: Option<f64>,
    /// optimized, insample or uniform.
    #[arg(long)]
    v_mode: Option<VModeName>,
    /// LASSO penalty; cross-validated when omitted.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    r_max: Option<usize>,
    /// Falls back to COUNTERFACT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Annual live births, for converting rate gaps into deaths.
    #[arg(long, allow_hyphen_values = true)]
    live_births: Option<f64>,
}

impl RunArgs {
    fn layer(self) -> (Option<PathBuf>, ConfigLayer) {
        (
            self.config,
            ConfigLayer {
                data: self.data,
                outcome: self.outcome,
                treated: self.treated,
                t0: self.t0,
                donors: self.donors,
                method: self.method,
                placebo: self.placebo,
                fake_t0: self.fake_t0,
                mspe_multiplier: self.mspe_multiplier,
                v_mode: self.v_mode,
                lambda: self.lambda,
                r_max: self.r_max,
                seed: self.seed,
                jobs: self.jobs,
                out: self.out,
                live_births: self.live_births,
            },
        )
    }
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_donors: usize,
    #[arg(long, default_value_t = 30)]
    n_times: usize,
    /// Number of pre-periods.
    #[arg(long, default_value_t = 19)]
    n_pre: usize,
    #[arg(long, default_value_t = 2)]
    factors: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Constant post-period effect on the treated unit.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    effect: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "outcome")]
    outcome: String,
}

fn fail(err: &Error, out: Option<&std::path::Path>) -> ExitCode {
    eprintln!("error [{}]: {err}", err.code());
    if let Some(o) = out {
        cli::write_error(o, err);
    }
    ExitCode::from(cli::exit_code(err) as u8)
}

fn run(args: RunArgs, replicate: bool) -> ExitCode {
    let (file, flags) = args.layer();
    let out_hint = flags.out.clone();
    let base = match file.map(ConfigLayer::from_file).transpose() {
        Ok(b) => b.unwrap_or_default(),
        Err(e) => return fail(&e, out_hint.as_deref()),
    };
    let env_seed = std::env::var(cli::SEED_ENV).ok();
    let cfg = match base.overlay(flags).resolve(env_seed.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(&e, out_hint.as_deref()),
    };
    let result = if replicate { cli::replicate(&cfg) } else { cli::run(&cfg) };
    match result {
        Ok(_) => {
            println!("wrote results to {}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, Some(&cfg.out)),
    }
}

fn simulate(a: SimArgs) -> ExitCode {
    let spec = FactorDgpSpec {
        n_donors: a.n_donors,
        n_times: a.n_times,
        t0: a.n_pre,
        n_factors: a.factors,
        noise_sigma: a.noise,
        effect: Effect::Constant(a.effect),
        seed: a.seed,
        ..FactorDgpSpec::default()
    };
    match oracle::simulate_panel(&spec).and_then(|p| p.write_csv(&a.out, &a.outcome)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, None),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(a) => run(a, false),
        Command::Replicate(a) => run(a, true),
        Command::Simulate(a) => simulate(a),
    }
}
