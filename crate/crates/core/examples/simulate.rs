//! Draw a panel from the factor model, write it as long CSV and read it back.

use counterfact::oracle::{self, Effect, FactorDgpSpec};

fn main() -> counterfact::Result<()> {
    let spec = FactorDgpSpec {
        n_donors: 8,
        n_times: 20,
        t0: 12,
        effect: Effect::PerPeriod(vec![0.5, 1.0, 1.5, 2.0]),
        seed: 3,
        ..FactorDgpSpec::default()
    };
    let sim = oracle::simulate(&spec)?;
    let path = std::env::temp_dir().join("counterfact_simulated.csv");
    sim.panel.write_csv(&path, "outcome")?;
    let back = counterfact::load_csv(&path, "outcome", "TREATED", sim.panel.t0())?;
    assert_eq!(back, sim.panel);
    println!(
        "wrote {} ({} units x {} periods)",
        path.display(),
        back.units().len(),
        back.n_times()
    );
    println!("true factors (first 3 periods):");
    for t in 0..3 {
        println!("  {:+.3} {:+.3}", sim.factors[(t, 0)], sim.factors[(t, 1)]);
    }
    Ok(())
}
