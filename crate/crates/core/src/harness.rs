//! Error functionals and empirical convergence rates.
//!
//! The three estimators mirror the error quantities the two-stage analysis
//! controls:
//!
//! * `estimate_err_forward` — `E sup_t |X_t - X_t^eps|^2` from a coupled
//!   (coarse, nested-reference) pair, controlled by `sigma(eps)^2`;
//! * `estimate_err_n` — backward discretization error against a self-refined
//!   oracle at the same `eps`: sup-over-nodes for `Y` plus time-integrated
//!   squared differences for `Z` and `Gamma`;
//! * `estimate_err_n_eps` — combined approximation-discretization error
//!   against a `delta`-refined reference solve, including the coupled
//!   stochastic-integral comparison term.
//!
//! All quantities are squared-error functionals; the theoretical rates are
//! stated for their square roots, so rate fits for the backward errors are
//! run on `sqrt(estimate)`. Every SE is a bootstrap (200 resamples default).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardPaths;
use crate::mat::Mat;
use crate::schemes::{BackwardSolution, SchemeKind};
use crate::stats::{self, Estimate};
use crate::stream::{substream, CH_BOOTSTRAP};

/// A forward ensemble together with its backward solution.
pub struct SolvedRun {
    pub paths: ForwardPaths,
    pub solution: BackwardSolution,
}

/// Estimate with its bootstrap replicates, so downstream rate fits can
/// propagate sampling noise into slope confidence bands.
#[derive(Clone, Debug)]
pub struct ErrEstimate {
    pub value: f64,
    pub se: f64,
    pub reps: Vec<f64>,
}

impl ErrEstimate {
    fn from_contributions(contrib: &[f64], resamples: usize, seed: u64, tag: u64) -> Self {
        let reps = stats::bootstrap_means(contrib, resamples, seed, tag);
        ErrEstimate {
            value: stats::mean(contrib),
            se: stats::sd(&reps),
            reps,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            se: self.se,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ErrNReport {
    pub y: Estimate,
    pub z: Estimate,
    pub gamma: Estimate,
    pub combined: ErrEstimate,
}

fn check_coupled(coarse: &ForwardPaths, fine: &ForwardPaths) -> Result<usize> {
    if !coarse.shares_noise_with(fine) {
        return Err(Error::Uncoupled(
            "runs were not produced from the same master seed".into(),
        ));
    }
    if coarse.grid.horizon() != fine.grid.horizon() {
        return Err(Error::Uncoupled("horizons differ".into()));
    }
    if fine.m < coarse.m {
        return Err(Error::Uncoupled(format!(
            "reference has fewer paths ({}) than the coarse run ({})",
            fine.m, coarse.m
        )));
    }
    let (nc, nf) = (coarse.grid.n(), fine.grid.n());
    if nf % nc != 0 {
        return Err(Error::Uncoupled(format!(
            "grid sizes do not nest: {nf} vs {nc}"
        )));
    }
    Ok(nf / nc)
}

/// `E sup_i |X_{t_i} - X^ref_{t_i}|^2` over the shared (coarse) nodes of a
/// coupled pair, with bootstrap SE.
pub fn estimate_err_forward(
    coarse: &ForwardPaths,
    reference: &ForwardPaths,
    resamples: usize,
) -> Result<ErrEstimate> {
    let ratio = check_coupled(coarse, reference)?;
    if ratio > 1 && reference.coupling.is_none() {
        return Err(Error::Uncoupled(
            "reference run carries no coupling record".into(),
        ));
    }
    let n = coarse.grid.n();
    let contrib: Vec<f64> = (0..coarse.m)
        .into_par_iter()
        .map(|p| {
            let mut sup = 0.0_f64;
            for i in 0..=n {
                let d = coarse.x.get(p, i) - reference.x.get(p, i * ratio);
                sup = sup.max(d * d);
            }
            sup
        })
        .collect();
    Ok(ErrEstimate::from_contributions(
        &contrib,
        resamples,
        coarse.seed ^ 0xF0,
        0,
    ))
}

/// Backward discretization error of `coarse` against a self-refining oracle
/// at the same truncation level: per coupled path,
/// `max_i |dY_i|^2 + sum_i dt (|dZ_i|^2 + |dGamma_i|^2)`, node values taken
/// from each solution's fitted node functions on its own path.
pub fn estimate_err_n(
    oracle: &SolvedRun,
    coarse: &SolvedRun,
    resamples: usize,
) -> Result<ErrNReport> {
    let ratio = check_coupled(&coarse.paths, &oracle.paths)?;
    if ratio != 1 && ratio < 8 {
        return Err(Error::Config(format!(
            "oracle grid must refine by a factor of at least 8, got {ratio}"
        )));
    }
    if ratio != 1 && oracle.paths.m < 4 * coarse.paths.m {
        return Err(Error::Config(format!(
            "oracle needs at least 4x the coarse path count ({} vs {})",
            oracle.paths.m, coarse.paths.m
        )));
    }
    if (oracle.paths.eps - coarse.paths.eps).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "mismatched eps: oracle {} vs coarse {}",
            oracle.paths.eps, coarse.paths.eps
        )));
    }
    let n = coarse.paths.grid.n();
    let dt = coarse.paths.grid.dt();
    let m = coarse.paths.m;
    let terms: Vec<(f64, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut y_sup = 0.0_f64;
            let mut z_int = 0.0;
            let mut g_int = 0.0;
            for i in 0..=n {
                let xc = coarse.paths.x.get(p, i);
                let xf = oracle.paths.x.get(p, i * ratio);
                let dy = coarse.solution.eval_y(i, xc) - oracle.solution.eval_y(i * ratio, xf);
                y_sup = y_sup.max(dy * dy);
                if i < n {
                    let dz = coarse.solution.eval_z(i, xc) - oracle.solution.eval_z(i * ratio, xf);
                    let dg = coarse.solution.eval_gamma(i, xc)
                        - oracle.solution.eval_gamma(i * ratio, xf);
                    z_int += dt * dz * dz;
                    g_int += dt * dg * dg;
                }
            }
            (y_sup, z_int, g_int)
        })
        .collect();
    let y: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let z: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let g: Vec<f64> = terms.iter().map(|t| t.2).collect();
    let combined: Vec<f64> = terms.iter().map(|t| t.0 + t.1 + t.2).collect();
    let seed = coarse.paths.seed ^ 0xF1;
    Ok(ErrNReport {
        y: stats::bootstrap_mean(&y, resamples, seed, 1),
        z: stats::bootstrap_mean(&z, resamples, seed, 2),
        gamma: stats::bootstrap_mean(&g, resamples, seed, 3),
        combined: ErrEstimate::from_contributions(&combined, resamples, seed, 4),
    })
}

/// Combined approximation-discretization error of `coarse` against a
/// `delta`-refined reference solve.
///
/// For the Euler scheme the functional takes the sup-of-mean form (sup over
/// fine nodes of `E|dY|^2`, sup over coarse nodes of the coupled
/// stochastic-integral gap, `H^2` integral for `Gamma`); for the Malliavin
/// scheme the mean-of-max form with the terminal-integral `Z` term. The `Y`
/// intra-interval sup is approximated on the fine grid in both cases.
pub fn estimate_err_n_eps(
    reference: &SolvedRun,
    coarse: &SolvedRun,
    resamples: usize,
) -> Result<ErrNReport> {
    let ratio = check_coupled(&coarse.paths, &reference.paths)?;
    if reference.paths.eps > coarse.paths.eps {
        return Err(Error::Config(
            "reference truncation level must not exceed the coarse level".into(),
        ));
    }
    let n_c = coarse.paths.grid.n();
    let n_f = reference.paths.grid.n();
    let dt_f = reference.paths.grid.dt();
    let m = coarse.paths.m;
    let seed = coarse.paths.seed ^ 0xF2;

    // per-(path, fine-node) squared Y differences and per-path Gamma integral
    let mut y_sq = Mat::zeros(m, n_f + 1);
    let mut z_gap = Mat::zeros(m, n_c + 1); // coupled integral difference at coarse nodes
    let gamma_contrib: Vec<f64> = {
        let per: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..m)
            .into_par_iter()
            .map(|p| {
                let mut yrow = vec![0.0; n_f + 1];
                let mut zrow = vec![0.0; n_c + 1];
                let mut g_int = 0.0;
                let mut i_ref = 0.0;
                let mut i_coarse = 0.0;
                for j in 0..=n_f {
                    let xf = reference.paths.x.get(p, j);
                    let ci = (j / ratio).min(n_c);
                    let xc = coarse.paths.x.get(p, ci);
                    let dy = reference.solution.eval_y(j, xf) - coarse.solution.eval_y(ci, xc);
                    yrow[j] = dy * dy;
                    if j < n_f {
                        let cg = j / ratio; // coarse interval containing t_j
                        let dgm = reference.solution.eval_gamma(j, xf)
                            - coarse.solution.eval_gamma(cg, coarse.paths.x.get(p, cg));
                        g_int += dt_f * dgm * dgm;
                    }
                    if j % ratio == 0 {
                        let i = j / ratio;
                        let gap = i_ref - i_coarse;
                        zrow[i] = gap;
                        if i < n_c {
                            i_coarse += coarse.solution.eval_z(i, coarse.paths.x.get(p, i))
                                * coarse.paths.dw.get(p, i);
                        }
                    }
                    if j < n_f {
                        i_ref += reference.solution.eval_z(j, xf) * reference.paths.dw.get(p, j);
                    }
                }
                (yrow, zrow, g_int)
            })
            .collect();
        let mut g = Vec::with_capacity(m);
        for (p, (yrow, zrow, gi)) in per.into_iter().enumerate() {
            y_sq.row_mut(p).copy_from_slice(&yrow);
            z_gap.row_mut(p).copy_from_slice(&zrow);
            g.push(gi);
        }
        g
    };

    match coarse.solution.scheme {
        SchemeKind::Euler => {
            // sup_t E|dY|^2 + sup_t E|int gap|^2 + H^2(Gamma)
            let col_mean = |mat: &Mat, sq: bool| -> Vec<f64> {
                (0..mat.cols())
                    .map(|c| {
                        let mut s = 0.0;
                        for p in 0..m {
                            let v = mat.get(p, c);
                            s += if sq { v * v } else { v };
                        }
                        s / m as f64
                    })
                    .collect()
            };
            let y_means = col_mean(&y_sq, false);
            let z_means = col_mean(&z_gap, true);
            let y_val = y_means.iter().cloned().fold(0.0_f64, f64::max);
            let z_val = z_means.iter().cloned().fold(0.0_f64, f64::max);
            let g_val = stats::mean(&gamma_contrib);

            // full-recompute bootstrap over paths for each replicate
            let reps: Vec<(f64, f64, f64)> = (0..resamples)
                .into_par_iter()
                .map(|b| {
                    let mut s = substream(seed, b as u64, CH_BOOTSTRAP ^ 5);
                    let mut ysum = vec![0.0; n_f + 1];
                    let mut zsum = vec![0.0; n_c + 1];
                    let mut gsum = 0.0;
                    for _ in 0..m {
                        let p = s.next_index(m);
                        for (acc, j) in ysum.iter_mut().zip(0..=n_f) {
                            *acc += y_sq.get(p, j);
                        }
                        for (acc, i) in zsum.iter_mut().zip(0..=n_c) {
                            let v = z_gap.get(p, i);
                            *acc += v * v;
                        }
                        gsum += gamma_contrib[p];
                    }
                    let y_b = ysum.iter().cloned().fold(0.0_f64, f64::max) / m as f64;
                    let z_b = zsum.iter().cloned().fold(0.0_f64, f64::max) / m as f64;
                    (y_b, z_b, gsum / m as f64)
                })
                .collect();
            let y_reps: Vec<f64> = reps.iter().map(|r| r.0).collect();
            let z_reps: Vec<f64> = reps.iter().map(|r| r.1).collect();
            let g_reps: Vec<f64> = reps.iter().map(|r| r.2).collect();
            let comb_reps: Vec<f64> = reps.iter().map(|r| r.0 + r.1 + r.2).collect();
            Ok(ErrNReport {
                y: Estimate {
                    value: y_val,
                    se: stats::sd(&y_reps),
                },
                z: Estimate {
                    value: z_val,
                    se: stats::sd(&z_reps),
                },
                gamma: Estimate {
                    value: g_val,
                    se: stats::sd(&g_reps),
                },
                combined: ErrEstimate {
                    value: y_val + z_val + g_val,
                    se: stats::sd(&comb_reps),
                    reps: comb_reps,
                },
            })
        }
        SchemeKind::Malliavin => {
            // E max_j |dY|^2 + E|terminal integral gap|^2 + H^2(Gamma)
            let y_contrib: Vec<f64> = (0..m)
                .map(|p| (0..=n_f).map(|j| y_sq.get(p, j)).fold(0.0_f64, f64::max))
                .collect();
            let z_contrib: Vec<f64> = (0..m)
                .map(|p| {
                    let g = z_gap.get(p, n_c);
                    g * g
                })
                .collect();
            let combined: Vec<f64> = (0..m)
                .map(|p| y_contrib[p] + z_contrib[p] + gamma_contrib[p])
                .collect();
            Ok(ErrNReport {
                y: stats::bootstrap_mean(&y_contrib, resamples, seed, 6),
                z: stats::bootstrap_mean(&z_contrib, resamples, seed, 7),
                gamma: stats::bootstrap_mean(&gamma_contrib, resamples, seed, 8),
                combined: ErrEstimate::from_contributions(&combined, resamples, seed, 9),
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `log e` on `log h`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::RateFit(format!("{} points", points.len())));
    }
    for &(h, e) in points {
        if !(h > 0.0 && e > 0.0) {
            return Err(Error::RateFit(format!("nonpositive point ({h}, {e})")));
        }
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(h, e)| (h.ln(), e.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::RateFit("all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Rate fit with a bootstrap slope band: replicate `b` refits the line
/// through the `b`-th bootstrap replicate of every point estimate.
/// `transform` maps each estimate before fitting (e.g. square root for the
/// backward error functionals whose theoretical rate is stated for the root).
pub fn fit_rate_with_band(
    points: &[(f64, &ErrEstimate)],
    transform: impl Fn(f64) -> f64,
) -> Result<(RateFit, f64, f64)> {
    let base: Vec<(f64, f64)> = points
        .iter()
        .map(|&(h, e)| (h, transform(e.value)))
        .collect();
    let fit = fit_rate(&base)?;
    let resamples = points.iter().map(|(_, e)| e.reps.len()).min().unwrap_or(0);
    let mut slopes = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .map(|&(h, e)| (h, transform(e.reps[b].max(1e-300))))
            .collect();
        if let Ok(f) = fit_rate(&pts) {
            slopes.push(f.slope);
        }
    }
    if slopes.is_empty() {
        return Ok((fit, fit.slope, fit.slope));
    }
    slopes.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[(slopes.len() as f64 * 0.025) as usize];
    let hi = slopes[((slopes.len() as f64 * 0.975) as usize).min(slopes.len() - 1)];
    Ok((fit, lo, hi))
}

/// Mean squared increment of stored per-path `Z` values across a node gap,
/// averaged over all admissible starting nodes (terminal node excluded: its
/// value comes from the terminal formula, not a regression).
pub fn holder_increments(
    solution: &BackwardSolution,
    gaps: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<Vec<(f64, ErrEstimate)>> {
    let stored = solution
        .paths_values
        .as_ref()
        .ok_or_else(|| Error::Config("holder probe needs store_paths".into()))?;
    let n = solution.grid.n();
    let dt = solution.grid.dt();
    let m = stored.z.rows();
    let mut out = Vec::new();
    for (gi, &gap) in gaps.iter().enumerate() {
        if gap == 0 || gap >= n {
            return Err(Error::Config(format!("gap {gap} out of range for n={n}")));
        }
        let contrib: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|p| {
                let mut acc = 0.0;
                let mut count = 0usize;
                let mut s = 0usize;
                while s + gap <= n - 1 {
                    let d = stored.z.get(p, s + gap) - stored.z.get(p, s);
                    acc += d * d;
                    count += 1;
                    s += gap;
                }
                acc / count as f64
            })
            .collect();
        out.push((
            gap as f64 * dt,
            ErrEstimate::from_contributions(&contrib, resamples, seed ^ 0xF3, gi as u64),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{self, ScalarFn};
    use crate::forward::{simulate_forward, simulate_reference, Grid};
    use crate::levy::{make_truncation, Family, LevyModel};
    use crate::regression::BasisSpec;
    use crate::schemes::{solve, SolveConfig};

    fn model() -> LevyModel {
        LevyModel::with_defaults(Family::SymmetricStable { alpha: 0.5 }).unwrap()
    }

    #[test]
    fn err_forward_zero_on_identical_inputs() {
        let cs = coeffs::zero_f_identity_g();
        let m = model();
        let view = make_truncation(&m, 0.25).unwrap();
        let paths =
            simulate_forward(&m, &view, &cs, Grid::new(16, 1.0).unwrap(), 64, 1.0, 5).unwrap();
        let est = estimate_err_forward(&paths, &paths, 50).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn err_forward_drift_only_is_quadratic_in_dt() {
        let cs = crate::coeffs::CoefficientSet {
            drift: ScalarFn::Linear {
                slope: -1.0,
                intercept: 0.0,
            },
            diffusion: ScalarFn::Zero,
            terminal: ScalarFn::Identity,
            generator: crate::coeffs::Generator::Zero,
        };
        let m = model();
        let view = make_truncation(&m, 0.25).unwrap();
        let grid = Grid::new(16, 1.0).unwrap();
        let paths = simulate_forward(&m, &view, &cs, grid, 32, 1.0, 7).unwrap();
        let reference =
            simulate_reference(&m, &cs, Grid::new(256, 1.0).unwrap(), 0.25, &paths, 32).unwrap();
        let est = estimate_err_forward(&paths, &reference, 50).unwrap();
        let dt = grid.dt();
        assert!(est.value < 4.0 * dt * dt, "value {} dt {dt}", est.value);
    }

    #[test]
    fn err_forward_rejects_uncoupled() {
        let cs = coeffs::zero_f_identity_g();
        let m = model();
        let view = make_truncation(&m, 0.25).unwrap();
        let a = simulate_forward(&m, &view, &cs, Grid::new(16, 1.0).unwrap(), 32, 1.0, 5).unwrap();
        let b = simulate_forward(&m, &view, &cs, Grid::new(16, 1.0).unwrap(), 32, 1.0, 6).unwrap();
        assert!(matches!(
            estimate_err_forward(&a, &b, 50),
            Err(Error::Uncoupled(_))
        ));
    }

    #[test]
    fn err_n_zero_on_identical_inputs() {
        let cs = coeffs::linear_bsde(0.5, 0.0);
        let m = model();
        let view = make_truncation(&m, 0.25).unwrap();
        let paths =
            simulate_forward(&m, &view, &cs, Grid::new(8, 1.0).unwrap(), 256, 1.0, 9).unwrap();
        let cfg = SolveConfig::new(BasisSpec::polynomial(3));
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).unwrap();
        let run = SolvedRun {
            paths,
            solution: sol,
        };
        let rep = estimate_err_n(&run, &run, 50).unwrap();
        assert_eq!(rep.combined.value, 0.0);
        assert_eq!(rep.y.value, 0.0);
    }

    #[test]
    fn err_n_rejects_mismatched_eps() {
        let cs = coeffs::linear_bsde(0.5, 0.0);
        let m = model();
        let v1 = make_truncation(&m, 0.25).unwrap();
        let v2 = make_truncation(&m, 0.5).unwrap();
        let cfg = SolveConfig::new(BasisSpec::polynomial(3));
        let coarse = {
            let paths =
                simulate_forward(&m, &v1, &cs, Grid::new(8, 1.0).unwrap(), 128, 1.0, 9).unwrap();
            let sol = solve(&paths, &v1, &cs, &cfg, SchemeKind::Euler).unwrap();
            SolvedRun {
                paths,
                solution: sol,
            }
        };
        let fine = {
            let paths =
                simulate_forward(&m, &v2, &cs, Grid::new(64, 1.0).unwrap(), 512, 1.0, 9).unwrap();
            let sol = solve(&paths, &v2, &cs, &cfg, SchemeKind::Euler).unwrap();
            SolvedRun {
                paths,
                solution: sol,
            }
        };
        assert!(estimate_err_n(&fine, &coarse, 50).is_err());
    }

    #[test]
    fn fit_rate_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.125, 0.0625]
            .iter()
            .map(|&h| (h, h * h))
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);

        let pts: Vec<(f64, f64)> = [1.0_f64, 0.5, 0.25]
            .iter()
            .map(|&h| (h, 3.0 * h.sqrt()))
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.intercept - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_with_multiplicative_noise() {
        let mut s = substream(3, 0, 11);
        let truth = 1.5;
        let pts: Vec<(f64, f64)> = (0..6)
            .map(|k| {
                let h = 0.5_f64.powi(k);
                let noise = 1.0 + 0.05 * (2.0 * s.next_f64() - 1.0);
                (h, 2.0 * h.powf(truth) * noise)
            })
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope - truth).abs() < 0.1, "slope {}", f.slope);
    }

    #[test]
    fn fit_rate_rescaling_invariance() {
        let pts: Vec<(f64, f64)> = (1..6)
            .map(|k| (0.5_f64.powi(k), 0.25_f64.powi(k)))
            .collect();
        let a = fit_rate(&pts).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(h, e)| (7.0 * h, e)).collect();
        let b = fit_rate(&scaled).unwrap();
        assert!((a.slope - b.slope).abs() < 1e-12);
        assert!((b.intercept - (a.intercept - a.slope * 7.0_f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn fit_rate_rejects_bad_input() {
        assert!(fit_rate(&[(1.0, 1.0), (0.5, 0.5)]).is_err());
        assert!(fit_rate(&[(1.0, 1.0), (0.5, 0.5), (0.25, -0.1)]).is_err());
        assert!(fit_rate(&[(1.0, 1.0), (0.5, 0.0), (0.25, 0.1)]).is_err());
    }

    #[test]
    fn monotone_refinement_chain() {
        // self-refining chain n -> 2n -> 4n: err_n nonincreasing up to 2 SE
        let m = LevyModel::new(
            crate::levy::Family::SymmetricStable { alpha: 0.5 },
            0.5,
            crate::levy::Rho::Constant(1.0),
            2.0,
        )
        .unwrap();
        let cs = crate::coeffs::linear_bsde_with(0.3, 0.0, 0.5, 0.0);
        let spec = crate::experiments::RunSpec {
            basis: BasisSpec::polynomial(3),
            ..crate::experiments::RunSpec::new(2000, 99)
        };
        let res = crate::experiments::backward_rate_sweep(
            &m,
            &cs,
            &spec,
            0.1,
            &[8, 16, 32],
            256,
            8000,
            SchemeKind::Euler,
        )
        .unwrap();
        for w in res.points.windows(2) {
            let (a, b) = (&w[0].report.combined, &w[1].report.combined);
            assert!(
                b.value <= a.value + 2.0 * (a.se + b.se),
                "err_n grew along the chain: {} -> {}",
                a.value,
                b.value
            );
        }
    }

    #[test]
    fn err_n_eps_vanishes_on_constant_terminal() {
        // f = 0, g = const: Y is constant, Z and Gamma vanish; the combined
        // error is zero up to exact cancellation
        let cs = crate::coeffs::CoefficientSet {
            drift: ScalarFn::Zero,
            diffusion: ScalarFn::Constant(1.0),
            terminal: ScalarFn::Constant(2.0),
            generator: crate::coeffs::Generator::Zero,
        };
        let m = model();
        let eps = 0.25;
        let view = make_truncation(&m, eps).unwrap();
        let cfg = SolveConfig::new(BasisSpec::polynomial(2));
        let paths =
            simulate_forward(&m, &view, &cs, Grid::new(8, 1.0).unwrap(), 512, 1.0, 21).unwrap();
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).unwrap();
        let coarse = SolvedRun {
            paths,
            solution: sol,
        };
        let delta = eps / 8.0;
        let view_d = make_truncation(&m, delta).unwrap();
        let ref_paths = simulate_reference(
            &m,
            &cs,
            Grid::new(64, 1.0).unwrap(),
            delta,
            &coarse.paths,
            2048,
        )
        .unwrap();
        let ref_sol = solve(&ref_paths, &view_d, &cs, &cfg, SchemeKind::Euler).unwrap();
        let reference = SolvedRun {
            paths: ref_paths,
            solution: ref_sol,
        };
        let rep = estimate_err_n_eps(&reference, &coarse, 20).unwrap();
        assert!(
            rep.combined.value < 1e-20,
            "combined {}",
            rep.combined.value
        );
    }

    #[test]
    fn holder_probe_requires_stored_paths() {
        let cs = coeffs::linear_bsde(0.5, 0.0);
        let m = model();
        let view = make_truncation(&m, 0.25).unwrap();
        let paths =
            simulate_forward(&m, &view, &cs, Grid::new(16, 1.0).unwrap(), 128, 1.0, 9).unwrap();
        let cfg = SolveConfig::new(BasisSpec::polynomial(3));
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).unwrap();
        assert!(holder_increments(&sol, &[4], 50, 1).is_err());
    }
}
