//! Synthetic difference in differences with unit and time weights and a
//! placebo standard error.

use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::sdid::{self, SdidWeights};

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 20,
        effect: Effect::Constant(1.0),
        ..FactorDgpSpec::default()
    })?;
    let weights = sdid::solve_sdid_weights(&panel)?;
    let est = sdid::estimate_att(&panel, &weights)?;
    println!("zeta {:.4}", weights.zeta);
    println!("largest unit weights:");
    let mut omega: Vec<(usize, f64)> = weights.omega.iter().copied().enumerate().collect();
    omega.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (j, w) in omega.iter().take(5) {
        println!("  {:>4}  {w:.4}", panel.donor_pool().members()[*j]);
    }
    println!("ATT {:+.3} (true +1), se {:.3}, p {:.3}", est.att, est.se, est.p_value);

    let did = sdid::sdid_effect(&panel, &SdidWeights::uniform(panel.n_donors(), panel.t0_index()))?;
    println!("plain DiD for comparison {did:+.3}");
    Ok(())
}
