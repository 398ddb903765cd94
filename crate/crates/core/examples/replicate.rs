//! Run the full analysis matrix through the library entry point the binary
//! uses, on a simulated panel with two outcome columns.

use std::fs;

use counterfact::cli::{self, ConfigLayer};
use counterfact::oracle::{self, Effect, FactorDgpSpec};

fn main() -> counterfact::Result<()> {
    let dir = std::env::temp_dir().join("counterfact_replicate");
    fs::create_dir_all(&dir).map_err(|e| counterfact::Error::InvalidArgument(e.to_string()))?;
    let spec = FactorDgpSpec {
        effect: Effect::Constant(-1.0),
        ..FactorDgpSpec::default()
    };
    let a = oracle::simulate_panel(&spec)?;
    let b = oracle::simulate_panel(&FactorDgpSpec { seed: 8, ..spec })?;

    // long CSV with two outcome columns
    let mut csv = String::from("unit,time,total,neonatal\n");
    for (i, unit) in a.units().iter().enumerate() {
        for (t, time) in a.times().iter().enumerate() {
            csv += &format!("{unit},{time},{},{}\n", a.outcomes()[(i, t)], b.outcomes()[(i, t)]);
        }
    }
    let data = dir.join("panel.csv");
    fs::write(&data, csv).map_err(|e| counterfact::Error::InvalidArgument(e.to_string()))?;

    let cfg = ConfigLayer {
        data: Some(data),
        outcome: Some("total".into()),
        treated: Some("TREATED".into()),
        t0: Some(a.t0()),
        out: Some(dir.join("out")),
        ..ConfigLayer::default()
    }
    .resolve(None)?;
    let summary = cli::replicate(&cfg)?;
    for (name, cell) in summary["analyses"]["total"].as_object().into_iter().flatten() {
        println!("{name:>16}: {}", cell["status"]);
    }
    println!("results in {}", cfg.out.display());
    Ok(())
}
