#![allow(dead_code)]

use std::path::PathBuf;

use counterfact::Panel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_names(n: usize) -> Vec<String> {
    std::iter::once("T".to_string()).chain((1..n).map(|i| format!("D{i:02}"))).collect()
}

/// Panel with uniform(1, 10) outcomes; unit 0 ("T") is treated.
pub fn random_panel(seed: u64, n_units: usize, n_times: usize, t0_index: usize) -> Panel {
    let mut r = rng(seed);
    let y = DMatrix::from_fn(n_units, n_times, |_, _| r.random_range(1.0..10.0));
    Panel::new(
        unit_names(n_units),
        (0..n_times as i64).map(|t| 2000 + t).collect(),
        y,
        "T",
        t0_index,
    )
    .unwrap()
}

/// Plain two-group difference in differences, computed from raw cells.
pub fn did(p: &Panel) -> f64 {
    let y = p.outcomes();
    let t0 = p.t0_index();
    let t = p.n_times();
    let tr = p.treated_index();
    let mut pre_c = 0.0;
    let mut post_c = 0.0;
    let mut nc = 0.0;
    for i in 0..y.nrows() {
        if i == tr {
            continue;
        }
        nc += 1.0;
        for s in 0..t {
            if s < t0 {
                pre_c += y[(i, s)];
            } else {
                post_c += y[(i, s)];
            }
        }
    }
    let pre_t: f64 = (0..t0).map(|s| y[(tr, s)]).sum::<f64>() / t0 as f64;
    let post_t: f64 = (t0..t).map(|s| y[(tr, s)]).sum::<f64>() / (t - t0) as f64;
    (post_t - pre_t) - (post_c / (nc * (t - t0) as f64) - pre_c / (nc * t0 as f64))
}

/// Published overall series: actual minus synthetic for 1991–2009 and the
/// per-year effects for 2010–2020. Returns the gaps and the index of 2010.
pub fn published_gaps() -> (Vec<f64>, usize) {
    let actual = [
        8.60, 8.20, 8.00, 7.70, 7.40, 7.10, 6.80, 6.40, 6.00, 5.60, 5.20, 4.90, 4.60, 4.30, 4.00, 3.80, 3.60, 3.50, 3.40,
    ];
    let synthetic = [
        8.52, 8.31, 8.01, 7.71, 7.38, 7.07, 6.74, 6.37, 5.98, 5.61, 5.24, 4.89, 4.59, 4.33, 4.02, 3.84, 3.66, 3.48, 3.34,
    ];
    let mut gaps: Vec<f64> = actual.iter().zip(&synthetic).map(|(a, s)| a - s).collect();
    gaps.extend(PUBLISHED_EFFECTS);
    (gaps, actual.len())
}

/// Per-year overall effects, 2010–2020.
pub const PUBLISHED_EFFECTS: [f64; 11] = [0.21, 0.41, 0.49, 0.71, 0.99, 1.06, 1.21, 1.17, 1.14, 1.00, 0.97];

/// Location of the replication panel, if one is available.
pub fn replication_csv() -> Option<PathBuf> {
    let p = std::env::var_os("COUNTERFACT_REPLICATION_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/replication.csv"));
    p.is_file().then_some(p)
}
