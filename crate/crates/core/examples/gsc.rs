//! Generalized synthetic control: interactive fixed effects with the factor
//! count chosen by cross-validation and bootstrap uncertainty.

use counterfact::gsc::{self, GscConfig};
use counterfact::oracle::{self, Effect, FactorDgpSpec};

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 30,
        effect: Effect::Constant(1.0),
        ..FactorDgpSpec::default()
    })?;
    let fit = gsc::estimate_att(
        &panel,
        &GscConfig {
            bootstrap: 200,
            ..GscConfig::default()
        },
    )?;
    println!("CV errors by factor count: {:?}", fit.cv_errors);
    println!("selected r = {}", fit.model.r);
    println!(
        "ATT {:+.3} (true +1), se {:.3}, 95% CI [{:+.3}, {:+.3}], p {:.3}",
        fit.att, fit.se, fit.ci.0, fit.ci.1, fit.p_value
    );
    if let Some(p) = &fit.placebo {
        println!(
            "backdated placebo at {}: effect {:+.3}, p {:.3}",
            p.fake_t0, p.treated_effect, p.p_value
        );
    }
    Ok(())
}
