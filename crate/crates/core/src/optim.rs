//! Derivative-free minimization (Nelder–Mead) used by the outer V search.

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the simplex spread in objective falls below this.
    pub ftol: f64,
    /// Initial simplex edge length (absolute).
    pub step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 400,
            ftol: 1e-12,
            step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

impl NelderMead {
    /// Minimizes `f` from `x0`. Non-finite objective values are treated as +∞.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let n = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        pts.push(x0.to_vec());
        for i in 0..n {
            let mut p = x0.to_vec();
            p[i] += if p[i].abs() > 1e-12 {
                self.step * p[i].abs().max(0.1)
            } else {
                self.step
            };
            pts.push(p);
        }
        let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
        if n == 0 {
            return Minimum {
                x: x0.to_vec(),
                f: vals[0],
                evals,
            };
        }

        while evals < self.max_evals {
            // order: best first; stable sort keeps earlier vertices on ties
            let mut idx: Vec<usize> = (0..=n).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            pts = idx.iter().map(|&i| pts[i].clone()).collect();
            vals = idx.iter().map(|&i| vals[i]).collect();

            let (best, worst) = (vals[0], vals[n]);
            if worst.is_finite() && (worst - best).abs() <= self.ftol * (best.abs() + 1e-300).max(1e-30) {
                break;
            }
            if worst - best == 0.0 {
                break;
            }

            let centroid: Vec<f64> = (0..n).map(|d| pts[..n].iter().map(|p| p[d]).sum::<f64>() / n as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..n).map(|d| centroid[d] + t * (pts[n][d] - centroid[d])).collect() };

            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    pts[n] = xe;
                    vals[n] = fe;
                } else {
                    pts[n] = xr;
                    vals[n] = fr;
                }
            } else if fr < vals[n - 1] {
                pts[n] = xr;
                vals[n] = fr;
            } else {
                let (xc, fc) = if fr < vals[n] {
                    let x = along(-0.5);
                    let v = eval(&x, &mut evals);
                    (x, v)
                } else {
                    let x = along(0.5);
                    let v = eval(&x, &mut evals);
                    (x, v)
                };
                if fc < vals[n].min(fr) {
                    pts[n] = xc;
                    vals[n] = fc;
                } else {
                    // shrink toward the best vertex
                    for i in 1..=n {
                        let p: Vec<f64> = (0..n).map(|d| pts[0][d] + 0.5 * (pts[i][d] - pts[0][d])).collect();
                        vals[i] = eval(&p, &mut evals);
                        pts[i] = p;
                    }
                }
            }
        }
        let (bi, _) = vals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        Minimum {
            x: pts[bi].clone(),
            f: vals[bi],
            evals,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            max_evals: 5000,
            ftol: 1e-16,
            step: 0.5,
        };
        let m = nm.minimize(|x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2), &[-1.2, 1.0]);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{m:?}");
    }

    #[test]
    fn quadratic_bowl_and_budget() {
        let nm = NelderMead {
            max_evals: 50,
            ..Default::default()
        };
        let m = nm.minimize(|x| x.iter().map(|v| (v - 3.0).powi(2)).sum(), &[0.0, 0.0, 0.0]);
        assert!(m.evals <= 50 + 4);
        assert!(m.f < 9.0 * 3.0);
    }
}
