//! The two backward solvers.
//!
//! `solve_backward_euler` is the regression-based backward Euler scheme: at
//! each node the conditional expectations
//!
//! ```text
//! Z_i     = E[ Y_{i+1} dW_{i+1} | X_i ] / dt
//! Gamma_i = E[ Y_{i+1} (sum_k rho(e_k) w(e_k) - dt ∫ rho w nu) | X_i ] / dt
//! Y_i     = E[ Y_{i+1} | X_i ] + dt f(t_i, X_i, Y_i, Gamma_i)
//! ```
//!
//! are least-squares projections on a basis of functions of `X_i`; the `Y_i`
//! step is implicit in `Y` and solved in closed form when the generator is
//! linear, by fixed-point iteration otherwise. The covariation estimators are
//! normalized by `dt`, the only dimensionally consistent scaling. Regression
//! targets are centered by the fitted `E[Y_{i+1}|X_i]`, which changes no
//! conditional expectation but removes the dominant variance term.
//!
//! `solve_malliavin` instead represents `Z` and `Gamma` as conditional
//! expectations of weighted terminal data: Doleans-type exponential weights
//! accumulated in log space, the Brownian Malliavin derivative `D_{t_i}X_T`
//! from suffix products of the variation factors, and the jump derivative
//! from a coupled shifted path. It requires the linear generator form
//! `f = f1(t) + f2(t) y + f3(t) gamma` (which in particular has no
//! x-dependence, so the `d_x f` sum in the Z representation vanishes).

use rayon::prelude::*;

use crate::coeffs::CoefficientSet;
use crate::error::{Error, Result};
use crate::forward::{variational_factors, ForwardPaths, Grid, VariationalData, PATH_CHUNK};
use crate::levy::{GammaKernel, TruncationView};
use crate::mat::Mat;
use crate::regression::{fit, BasisSpec, CondExpEstimator};
use crate::stats::{self, Estimate};

const WEIGHT_LOG_GUARD: f64 = 700.0;
const ALPHA_DENOM_GUARD: f64 = 1e-12;
const FIXED_POINT_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    Euler,
    Malliavin,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Euler => "euler",
            SchemeKind::Malliavin => "malliavin",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveConfig {
    pub basis: BasisSpec,
    pub kernel: GammaKernel,
    /// Keep per-path node values (needed by the Hoelder probe).
    pub store_paths: bool,
    /// Compute per-node mean/SE summaries.
    pub node_stats: bool,
    pub bootstrap: usize,
    pub seed: u64,
    /// Width (in grid steps) of the covariation window behind the Euler
    /// `Gamma` regression. The default 1 is the plain scheme; oracle and
    /// reference solves on much finer grids use the refinement ratio, which
    /// divides the estimator's variance by the window while keeping the
    /// effective time resolution of the coarse run they are compared with.
    pub gamma_window: usize,
}

impl SolveConfig {
    pub fn new(basis: BasisSpec) -> Self {
        SolveConfig {
            basis,
            kernel: GammaKernel::WithMark,
            store_paths: false,
            node_stats: false,
            bootstrap: stats::DEFAULT_RESAMPLES,
            seed: 0,
            gamma_window: 1,
        }
    }
}

/// Per-node solution function: a fitted regression away from the terminal
/// node, the exact terminal formulas at `i = n`.
#[derive(Clone, Debug)]
pub enum NodeFn {
    Fitted(CondExpEstimator),
    TerminalY,
    TerminalZ,
    TerminalGamma,
}

#[derive(Clone, Copy, Debug)]
pub struct NodeStats {
    pub y: Estimate,
    pub z: Estimate,
    pub gamma: Estimate,
}

pub struct SolutionPaths {
    pub y: Mat,
    pub z: Mat,
    pub gamma: Mat,
    /// Big-jump integrand aggregate whose kernel integral is `Gamma`.
    pub u: Mat,
}

pub struct BackwardSolution {
    pub scheme: SchemeKind,
    pub grid: Grid,
    pub eps: f64,
    pub sigma_eps: f64,
    pub kernel: GammaKernel,
    /// `∫ rho(e) w(e) e nu(de)` over the big-jump region.
    pub kappa: f64,
    pub coeffs: CoefficientSet,
    pub y_fits: Vec<NodeFn>,
    pub z_fits: Vec<NodeFn>,
    pub gamma_fits: Vec<NodeFn>,
    pub y0: Estimate,
    pub z0: Estimate,
    pub gamma0: Estimate,
    pub node_stats: Option<Vec<NodeStats>>,
    pub paths_values: Option<SolutionPaths>,
}

impl BackwardSolution {
    pub fn terminal_y(&self, x: f64) -> f64 {
        self.coeffs.terminal.eval(x)
    }

    /// `Z_n = sigma(eps) g'(X_T) beta(X_T)`
    pub fn terminal_z(&self, x: f64) -> f64 {
        self.sigma_eps * self.coeffs.terminal.deriv(x) * self.coeffs.diffusion.eval(x)
    }

    /// `U_n = g(X_T + beta(X_T)) - g(X_T)`
    pub fn terminal_u(&self, x: f64) -> f64 {
        self.coeffs.terminal.eval(x + self.coeffs.diffusion.eval(x)) - self.coeffs.terminal.eval(x)
    }

    pub fn terminal_gamma(&self, x: f64) -> f64 {
        self.kappa * self.terminal_u(x)
    }

    fn eval(&self, f: &NodeFn, x: f64) -> f64 {
        match f {
            NodeFn::Fitted(e) => e.predict_one(x),
            NodeFn::TerminalY => self.terminal_y(x),
            NodeFn::TerminalZ => self.terminal_z(x),
            NodeFn::TerminalGamma => self.terminal_gamma(x),
        }
    }

    pub fn eval_y(&self, node: usize, x: f64) -> f64 {
        self.eval(&self.y_fits[node], x)
    }

    pub fn eval_z(&self, node: usize, x: f64) -> f64 {
        self.eval(&self.z_fits[node], x)
    }

    pub fn eval_gamma(&self, node: usize, x: f64) -> f64 {
        self.eval(&self.gamma_fits[node], x)
    }
}

fn check_view_matches(paths: &ForwardPaths, view: &TruncationView) -> Result<()> {
    if (paths.sigma_eps - view.sigma_eps()).abs() > 1e-12 * (1.0 + view.sigma_eps()) {
        return Err(Error::Config(format!(
            "paths were simulated at eps={} but the view is at eps={}",
            paths.eps, view.eps
        )));
    }
    Ok(())
}

/// Parallel map over path indices producing one f64 per path, chunked in
/// fixed blocks for scheduling-independent output.
fn per_path<F: Fn(usize) -> f64 + Sync>(m: usize, f: F) -> Vec<f64> {
    let chunks: Vec<Vec<f64>> = (0..m.div_ceil(PATH_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * PATH_CHUNK;
            let hi = (lo + PATH_CHUNK).min(m);
            (lo..hi).map(&f).collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Solve `y = a + dt f(t, x, y, gamma)` for `y`.
fn implicit_step(
    coeffs: &CoefficientSet,
    t: f64,
    dt: f64,
    node: usize,
    x: f64,
    a: f64,
    gamma: f64,
) -> Result<f64> {
    if let Some((_, f2, _)) = coeffs.generator.linear_form() {
        let denom = 1.0 - dt * f2.eval(t);
        if denom <= 0.0 {
            return Err(Error::FixedPoint { node, iters: 0 });
        }
        return Ok((a + dt * coeffs.generator.eval(t, x, 0.0, gamma)) / denom);
    }
    let mut y = a;
    for _ in 0..FIXED_POINT_ITERS {
        let y_new = a + dt * coeffs.generator.eval(t, x, y, gamma);
        if (y_new - y).abs() <= 1e-13 * (1.0 + y_new.abs()) {
            return Ok(y_new);
        }
        y = y_new;
    }
    Err(Error::FixedPoint {
        node,
        iters: FIXED_POINT_ITERS,
    })
}

struct NodeAccumulator {
    store: bool,
    stats: bool,
    y: Option<Mat>,
    z: Option<Mat>,
    gamma: Option<Mat>,
    u: Option<Mat>,
    node_stats: Vec<Option<NodeStats>>,
}

impl NodeAccumulator {
    fn new(cfg: &SolveConfig, m: usize, n: usize) -> Self {
        NodeAccumulator {
            store: cfg.store_paths,
            stats: cfg.node_stats,
            y: cfg.store_paths.then(|| Mat::zeros(m, n + 1)),
            z: cfg.store_paths.then(|| Mat::zeros(m, n + 1)),
            gamma: cfg.store_paths.then(|| Mat::zeros(m, n + 1)),
            u: cfg.store_paths.then(|| Mat::zeros(m, n + 1)),
            node_stats: vec![None; n + 1],
        }
    }

    /// `*_vals` are the per-path node values to store; the `*_boot` vectors
    /// carry the per-path quantities whose sample mean equals the recorded
    /// node mean (regression targets; a terminal/rollout composite for `Y`),
    /// so bootstrapping them gives the SE of that mean.
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        cfg: &SolveConfig,
        node: usize,
        kappa: f64,
        y_vals: &[f64],
        z_vals: &[f64],
        g_vals: &[f64],
        y_boot: &[f64],
        z_boot: &[f64],
        g_boot: &[f64],
    ) {
        if self.store {
            for (p, (&y, (&z, &g))) in y_vals
                .iter()
                .zip(z_vals.iter().zip(g_vals.iter()))
                .enumerate()
            {
                self.y.as_mut().unwrap().set(p, node, y);
                self.z.as_mut().unwrap().set(p, node, z);
                self.gamma.as_mut().unwrap().set(p, node, g);
                let u = if kappa != 0.0 { g / kappa } else { 0.0 };
                self.u.as_mut().unwrap().set(p, node, u);
            }
        }
        if self.stats {
            let tag = node as u64;
            self.node_stats[node] = Some(NodeStats {
                y: Estimate {
                    value: stats::mean(y_vals),
                    se: stats::bootstrap_se_of_mean(y_boot, cfg.bootstrap, cfg.seed, tag * 4),
                },
                z: stats::bootstrap_mean(z_boot, cfg.bootstrap, cfg.seed, tag * 4 + 1),
                gamma: stats::bootstrap_mean(g_boot, cfg.bootstrap, cfg.seed, tag * 4 + 2),
            });
        }
    }

    fn finish(self) -> (Option<Vec<NodeStats>>, Option<SolutionPaths>) {
        let stats = if self.stats {
            Some(self.node_stats.into_iter().map(|s| s.unwrap()).collect())
        } else {
            None
        };
        let paths = if self.store {
            Some(SolutionPaths {
                y: self.y.unwrap(),
                z: self.z.unwrap(),
                gamma: self.gamma.unwrap(),
                u: self.u.unwrap(),
            })
        } else {
            None
        };
        (stats, paths)
    }
}

/// Regression-based backward Euler scheme.
pub fn solve_backward_euler(
    paths: &ForwardPaths,
    view: &TruncationView,
    coeffs: &CoefficientSet,
    cfg: &SolveConfig,
) -> Result<BackwardSolution> {
    check_view_matches(paths, view)?;
    cfg.basis.validate()?;
    let n = paths.grid.n();
    let m = paths.m;
    let dt = paths.grid.dt();
    let kappa = view.gamma_scalar(cfg.kernel);
    let comp_w = view.gamma_compensator(cfg.kernel);
    let rho = view.rho;
    let kernel = cfg.kernel;

    let mut sol = BackwardSolution {
        scheme: SchemeKind::Euler,
        grid: paths.grid,
        eps: paths.eps,
        sigma_eps: paths.sigma_eps,
        kernel,
        kappa,
        coeffs: *coeffs,
        y_fits: Vec::new(),
        z_fits: Vec::new(),
        gamma_fits: Vec::new(),
        y0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        z0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        gamma0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        node_stats: None,
        paths_values: None,
    };

    let mut y_fits: Vec<NodeFn> = vec![NodeFn::TerminalY; n + 1];
    let mut z_fits: Vec<NodeFn> = vec![NodeFn::TerminalZ; n + 1];
    let mut gamma_fits: Vec<NodeFn> = vec![NodeFn::TerminalGamma; n + 1];
    let mut acc = NodeAccumulator::new(cfg, m, n);

    // terminal node: Y_n = g(X_n) bitwise, Z_n / Gamma_n by the closed formulas
    let mut y_next: Vec<f64> = per_path(m, |p| coeffs.terminal.eval(paths.x.get(p, n)));
    // pathwise rollout g(X_T) + sum dt f(Theta_hat): its mean equals the
    // recorded Y node mean exactly, and it sees terminal dispersion
    let mut rollout = y_next.clone();
    {
        let z_term = per_path(m, |p| sol.terminal_z(paths.x.get(p, n)));
        let g_term = per_path(m, |p| sol.terminal_gamma(paths.x.get(p, n)));
        acc.record(
            cfg, n, kappa, &y_next, &z_term, &g_term, &rollout, &z_term, &g_term,
        );
    }

    let window = cfg.gamma_window.max(1);
    // y values at the nodes ahead of the sweep, most recent first; entry 0 is
    // node i+1 when processing node i
    let mut future_y: std::collections::VecDeque<Vec<f64>> =
        std::collections::VecDeque::from([y_next.clone()]);
    let mut node0: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for i in (0..n).rev() {
        let feats = paths.x.col(i);
        let t_i = paths.grid.node(i);

        let fit_y_cond = fit(&feats, &y_next, &cfg.basis)?;
        let a: Vec<f64> = per_path(m, |p| fit_y_cond.predict_one(feats[p]));

        let tz: Vec<f64> = per_path(m, |p| (y_next[p] - a[p]) * paths.dw.get(p, i) / dt);
        let fit_z = fit(&feats, &tz, &cfg.basis)?;
        let z_vals: Vec<f64> = per_path(m, |p| fit_z.predict_one(feats[p]));

        let j = (i + window).min(n);
        let span = (j - i) as f64 * dt;
        let y_far = &future_y[j - i - 1];
        let tg: Vec<f64> = per_path(m, |p| {
            let jump_w = paths.weighted_mark_sum_range(p, i, j, |e| rho.eval(e) * kernel.w(e));
            (y_far[p] - a[p]) * (jump_w - span * comp_w) / span
        });
        let fit_g = fit(&feats, &tg, &cfg.basis)?;
        let g_vals: Vec<f64> = per_path(m, |p| fit_g.predict_one(feats[p]));

        // implicit in Y only: one scalar solve per path
        let y_vals_res: Vec<Result<f64>> = (0..m)
            .into_par_iter()
            .map(|p| implicit_step(coeffs, t_i, dt, i, feats[p], a[p], g_vals[p]))
            .collect();
        let mut y_vals = Vec::with_capacity(m);
        for r in y_vals_res {
            y_vals.push(r?);
        }

        rollout = per_path(m, |p| {
            rollout[p] + dt * coeffs.generator.eval(t_i, feats[p], y_vals[p], g_vals[p])
        });
        acc.record(cfg, i, kappa, &y_vals, &z_vals, &g_vals, &rollout, &tz, &tg);
        if i == 0 {
            node0 = Some((y_next.clone(), tz, tg));
        }
        y_fits[i] = NodeFn::Fitted(fit_y_cond);
        z_fits[i] = NodeFn::Fitted(fit_z);
        gamma_fits[i] = NodeFn::Fitted(fit_g);
        y_next = y_vals;
        future_y.push_front(y_next.clone());
        if future_y.len() > window {
            future_y.pop_back();
        }
    }

    // node-0 estimates: degenerate features make the fits plain means; the
    // SEs come from a joint bootstrap over the per-path targets
    let (ty0, tz0, tg0) = node0.expect("n >= 1");
    let z0 = stats::mean(&tz0);
    let g0 = stats::mean(&tg0);
    let a0 = stats::mean(&ty0);
    let y0 = implicit_step(coeffs, 0.0, dt, 0, paths.x0, a0, g0)?;
    // the estimator's sampling dispersion lives in the pathwise rollout
    // g(X_T) + sum dt f: its mean equals y0 exactly
    let y0_se = stats::bootstrap_se_of_mean(&rollout, cfg.bootstrap, cfg.seed, 0xE0);
    let z0_se = stats::bootstrap_se_of_mean(&tz0, cfg.bootstrap, cfg.seed, 0xE1);
    let g0_se = stats::bootstrap_se_of_mean(&tg0, cfg.bootstrap, cfg.seed, 0xE2);

    sol.y0 = Estimate {
        value: y0,
        se: y0_se,
    };
    sol.z0 = Estimate {
        value: z0,
        se: z0_se,
    };
    sol.gamma0 = Estimate {
        value: g0,
        se: g0_se,
    };
    if let Some(ns) = acc.node_stats.get_mut(0) {
        *ns = ns.map(|mut st| {
            st.y.se = st.y.se.max(sol.y0.se);
            st.z = sol.z0;
            st.gamma = sol.gamma0;
            st
        });
    }
    sol.y_fits = y_fits;
    sol.z_fits = z_fits;
    sol.gamma_fits = gamma_fits;
    let (node_stats, paths_values) = acc.finish();
    sol.node_stats = node_stats;
    sol.paths_values = paths_values;
    Ok(sol)
}

/// Doleans-type exponential weights, accumulated as cumulative log sums so
/// the multiplicative identity `E(i,k) = E(i,j) E(j,k)` holds by
/// construction.
pub struct MalliavinWeights {
    /// `m x (n+1)`: cumulative log weight from node 0.
    pub log_cum: Mat,
}

impl MalliavinWeights {
    #[inline]
    pub fn log_weight(&self, p: usize, i: usize, j: usize) -> f64 {
        debug_assert!(i <= j);
        self.log_cum.get(p, j) - self.log_cum.get(p, i)
    }

    #[inline]
    pub fn weight(&self, p: usize, i: usize, j: usize) -> f64 {
        self.log_weight(p, i, j).exp()
    }
}

/// Build the Brownian-direction weights for a linear generator:
/// `log E(0,k+1) - log E(0,k) = (f2 - f3^2/2 ∫rho^2 m) dt + f3 (sum rho(e)e - dt ∫rho e nu)`.
pub fn build_weights(
    paths: &ForwardPaths,
    view: &TruncationView,
    coeffs: &CoefficientSet,
) -> Result<MalliavinWeights> {
    let (_, f2, f3) = coeffs.generator.linear_form().ok_or_else(|| {
        Error::Config("Malliavin weights require the linear generator form".into())
    })?;
    let n = paths.grid.n();
    let dt = paths.grid.dt();
    let rho = view.rho;
    let mut log_cum = Mat::zeros(paths.m, n + 1);
    let bad: Vec<Option<usize>> = log_cum
        .par_row_chunks_mut(PATH_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let base = ci * PATH_CHUNK;
            let rows = chunk.len() / (n + 1);
            let mut first_bad = None;
            for r in 0..rows {
                let p = base + r;
                let row = &mut chunk[r * (n + 1)..(r + 1) * (n + 1)];
                row[0] = 0.0;
                for k in 0..n {
                    let t_k = paths.grid.node(k);
                    let f2k = f2.eval(t_k);
                    let f3k = f3.eval(t_k);
                    let drift = (f2k - 0.5 * f3k * f3k * view.rho2_m_big) * dt;
                    let jump = if f3k != 0.0 {
                        let s = paths.weighted_mark_sum(p, k, |e| rho.eval(e) * e);
                        f3k * (s - dt * view.rho_e_nu_big)
                    } else {
                        0.0
                    };
                    row[k + 1] = row[k] + drift + jump;
                    if row[k + 1].abs() > WEIGHT_LOG_GUARD && first_bad.is_none() {
                        first_bad = Some(k);
                    }
                }
            }
            first_bad
        })
        .collect();
    if let Some(k) = bad.into_iter().flatten().min() {
        return Err(Error::WeightOverflow {
            interval: k,
            log_weight: WEIGHT_LOG_GUARD,
        });
    }
    Ok(MalliavinWeights { log_cum })
}

/// Malliavin-weight backward scheme. Requires the linear generator form; the
/// e-independence of the jump derivative lets the mark integral in `Gamma`
/// factor out into the scalar `kappa`.
pub fn solve_malliavin(
    paths: &ForwardPaths,
    var: &VariationalData,
    view: &TruncationView,
    coeffs: &CoefficientSet,
    cfg: &SolveConfig,
) -> Result<BackwardSolution> {
    check_view_matches(paths, view)?;
    cfg.basis.validate()?;
    if coeffs.generator.linear_form().is_none() {
        return Err(Error::Config(
            "the Malliavin scheme requires the linear generator form f1 + f2 y + f3 gamma".into(),
        ));
    }
    let n = paths.grid.n();
    let m = paths.m;
    let dt = paths.grid.dt();
    let sigma = paths.sigma_eps;
    let kappa = view.gamma_scalar(cfg.kernel);
    let rho = view.rho;
    let weights = build_weights(paths, view, coeffs)?;

    // per-path per-interval compensated raw mark sums, reused by every
    // shifted-path propagation
    let mut comp_sums = Mat::zeros(m, n);
    comp_sums
        .par_row_chunks_mut(PATH_CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let base = ci * PATH_CHUNK;
            let rows = chunk.len() / n;
            for r in 0..rows {
                let p = base + r;
                for i in 0..n {
                    chunk[r * n + i] = paths.compensated_mark_sum(p, i);
                }
            }
        });
    let rho_e_sums = if matches!(coeffs.generator.linear_form(), Some((_, _, f3)) if f3.bound_on(paths.grid.horizon()) != 0.0)
    {
        let mut s = Mat::zeros(m, n);
        s.par_row_chunks_mut(PATH_CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let base = ci * PATH_CHUNK;
                let rows = chunk.len() / n;
                for r in 0..rows {
                    let p = base + r;
                    for i in 0..n {
                        chunk[r * n + i] = paths.weighted_mark_sum(p, i, |e| rho.eval(e) * e);
                    }
                }
            });
        Some(s)
    } else {
        None
    };

    let mut sol = BackwardSolution {
        scheme: SchemeKind::Malliavin,
        grid: paths.grid,
        eps: paths.eps,
        sigma_eps: sigma,
        kernel: cfg.kernel,
        kappa,
        coeffs: *coeffs,
        y_fits: vec![NodeFn::TerminalY; n + 1],
        z_fits: vec![NodeFn::TerminalZ; n + 1],
        gamma_fits: vec![NodeFn::TerminalGamma; n + 1],
        y0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        z0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        gamma0: Estimate {
            value: 0.0,
            se: 0.0,
        },
        node_stats: None,
        paths_values: None,
    };
    let mut acc = NodeAccumulator::new(cfg, m, n);

    let mut y_roll: Vec<f64> = per_path(m, |p| sol.terminal_y(paths.x.get(p, n)));
    let mut gamma_roll: Vec<f64> = per_path(m, |p| sol.terminal_gamma(paths.x.get(p, n)));
    let mut rollout = y_roll.clone();
    {
        let z_term = per_path(m, |p| sol.terminal_z(paths.x.get(p, n)));
        acc.record(
            cfg,
            n,
            kappa,
            &y_roll,
            &z_term,
            &gamma_roll,
            &rollout,
            &z_term,
            &gamma_roll,
        );
    }

    let mut node0: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for i in (0..n).rev() {
        let feats = paths.x.col(i);
        let t_next = paths.grid.node(i + 1);

        // Z: weighted terminal representation (the d_x f sum vanishes: the
        // linear form has no x-dependence)
        let tz: Vec<f64> = per_path(m, |p| {
            weights.weight(p, i + 1, n)
                * coeffs.terminal.deriv(paths.x.get(p, n))
                * sigma
                * coeffs.diffusion.eval(feats[p])
                * var.suffix.get(p, i)
        });
        let fit_z = fit(&feats, &tz, &cfg.basis)?;
        let z_vals: Vec<f64> = per_path(m, |p| fit_z.predict_one(feats[p]));

        // Gamma: coupled shifted path from theta = t_i, alpha quotients with
        // the zero-denominator indicator, jump-direction weights in log space
        let tg: Vec<f64> = per_path(m, |p| {
            let x_theta = feats[p];
            let mut shifted = x_theta + coeffs.diffusion.eval(x_theta);
            let mut log_e = 0.0_f64;
            let mut sum = 0.0_f64;
            for k in (i + 1)..=n {
                let prev = k - 1;
                shifted = shifted
                    + coeffs.drift.eval(shifted) * dt
                    + sigma * coeffs.diffusion.eval(shifted) * paths.dw.get(p, prev)
                    + coeffs.diffusion.eval(shifted) * comp_sums.get(p, prev);
                let xk = paths.x.get(p, k);
                let dx_e = shifted - xk;
                let t_k = paths.grid.node(k);
                let (y_k, g_k, y_s, g_s) = if k == n {
                    (
                        sol.terminal_y(xk),
                        sol.terminal_gamma(xk),
                        sol.terminal_y(shifted),
                        sol.terminal_gamma(shifted),
                    )
                } else {
                    (
                        sol.eval_y(k, xk),
                        sol.eval_gamma(k, xk),
                        sol.eval_y(k, shifted),
                        sol.eval_gamma(k, shifted),
                    )
                };
                let dy = y_s - y_k;
                let dg = g_s - g_k;
                let denom = dx_e + dy + dg;
                let alpha = if denom.abs() < ALPHA_DENOM_GUARD {
                    0.0
                } else {
                    (coeffs.generator.eval(t_k, shifted, y_s, g_s)
                        - coeffs.generator.eval(t_k, xk, y_k, g_k))
                        / denom
                };
                sum += log_e.exp() * alpha * dx_e * dt;
                if k < n {
                    // extend E^{e}(t_{i+1}, ·) across interval k
                    let jump = if alpha != 0.0 {
                        let s = match &rho_e_sums {
                            Some(mat) => mat.get(p, k),
                            None => paths.weighted_mark_sum(p, k, |e| rho.eval(e) * e),
                        };
                        alpha * (s - dt * view.rho_e_nu_big)
                    } else {
                        0.0
                    };
                    log_e += (alpha - 0.5 * alpha * alpha * view.rho2_m_big) * dt + jump;
                }
            }
            let dg_term = sol.terminal_y(shifted) - sol.terminal_y(paths.x.get(p, n));
            kappa * (log_e.exp() * dg_term + sum)
        });
        let fit_g = fit(&feats, &tg, &cfg.basis)?;
        let g_vals: Vec<f64> = per_path(m, |p| fit_g.predict_one(feats[p]));

        // Y: explicit step through the generator at t_{i+1}
        let ty: Vec<f64> = per_path(m, |p| {
            y_roll[p]
                + dt * coeffs.generator.eval(
                    t_next,
                    paths.x.get(p, i + 1),
                    y_roll[p],
                    gamma_roll[p],
                )
        });
        let fit_y = fit(&feats, &ty, &cfg.basis)?;
        let y_vals: Vec<f64> = per_path(m, |p| fit_y.predict_one(feats[p]));

        rollout = per_path(m, |p| {
            rollout[p]
                + dt * coeffs.generator.eval(
                    t_next,
                    paths.x.get(p, i + 1),
                    y_roll[p],
                    gamma_roll[p],
                )
        });
        acc.record(cfg, i, kappa, &y_vals, &z_vals, &g_vals, &rollout, &tz, &tg);
        if i == 0 {
            node0 = Some((ty, tz, tg));
        }
        sol.y_fits[i] = NodeFn::Fitted(fit_y);
        sol.z_fits[i] = NodeFn::Fitted(fit_z);
        sol.gamma_fits[i] = NodeFn::Fitted(fit_g);
        y_roll = y_vals;
        gamma_roll = g_vals;
    }

    let (ty0, tz0, tg0) = node0.expect("n >= 1");
    sol.y0 = Estimate {
        value: stats::mean(&ty0),
        se: stats::bootstrap_se_of_mean(&rollout, cfg.bootstrap, cfg.seed, 0xA0),
    };
    sol.z0 = stats::bootstrap_mean(&tz0, cfg.bootstrap, cfg.seed, 0xA1);
    sol.gamma0 = stats::bootstrap_mean(&tg0, cfg.bootstrap, cfg.seed, 0xA2);
    if let Some(ns) = acc.node_stats.get_mut(0) {
        *ns = ns.map(|mut st| {
            st.y.se = st.y.se.max(sol.y0.se);
            st.z = sol.z0;
            st.gamma = sol.gamma0;
            st
        });
    }
    let (node_stats, paths_values) = acc.finish();
    sol.node_stats = node_stats;
    sol.paths_values = paths_values;
    Ok(sol)
}

/// Convenience dispatcher used by the harness and CLI.
pub fn solve(
    paths: &ForwardPaths,
    view: &TruncationView,
    coeffs: &CoefficientSet,
    cfg: &SolveConfig,
    scheme: SchemeKind,
) -> Result<BackwardSolution> {
    match scheme {
        SchemeKind::Euler => solve_backward_euler(paths, view, coeffs, cfg),
        SchemeKind::Malliavin => {
            let var = variational_factors(paths, coeffs);
            solve_malliavin(paths, &var, view, coeffs, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{self, Generator, ScalarFn, TimeFn};
    use crate::forward::simulate_forward;
    use crate::levy::{make_truncation, Family, LevyModel};

    fn setup(
        coeffs: &CoefficientSet,
        eps: f64,
        n: usize,
        m: usize,
        seed: u64,
    ) -> (TruncationView, ForwardPaths) {
        let model = LevyModel::with_defaults(Family::SymmetricStable { alpha: 0.5 }).unwrap();
        let view = make_truncation(&model, eps).unwrap();
        let grid = Grid::new(n, 1.0).unwrap();
        let paths = simulate_forward(&model, &view, coeffs, grid, m, 1.0, seed).unwrap();
        (view, paths)
    }

    fn cfg_with(basis_degree: usize, store: bool, stats: bool) -> SolveConfig {
        let mut cfg = SolveConfig::new(BasisSpec::polynomial(basis_degree));
        cfg.store_paths = store;
        cfg.node_stats = stats;
        cfg.seed = 17;
        cfg
    }

    #[test]
    fn terminal_y_is_bitwise_g_of_x() {
        let cs = coeffs::lipschitz_smooth(0.5, 0.3, 1.0);
        let (view, paths) = setup(&cs, 0.25, 8, 512, 3);
        let cfg = cfg_with(3, true, false);
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        let stored = sol.paths_values.as_ref().unwrap();
        for p in 0..512 {
            assert_eq!(stored.y.get(p, 8), cs.terminal.eval(paths.x.get(p, 8)));
        }
    }

    #[test]
    fn euler_martingale_projection() {
        // f = 0, g identity, b = 0: Y should track the martingale X
        let cs = coeffs::zero_f_identity_g();
        let (view, paths) = setup(&cs, 0.25, 8, 20_000, 5);
        let cfg = cfg_with(4, true, true);
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        let stats = sol.node_stats.as_ref().unwrap();
        for (i, st) in stats.iter().enumerate() {
            let tol = 3.0 * st.y.se + 1e-12;
            assert!(
                (st.y.value - 1.0).abs() < tol,
                "node {i}: mean {} se {}",
                st.y.value,
                st.y.se
            );
        }
        // per-path tracking: fitted Y explains most of X's variance
        let stored = sol.paths_values.as_ref().unwrap();
        for i in 1..8 {
            let mut num = 0.0;
            let mut den = 0.0;
            let mean_x: f64 = (0..paths.m).map(|p| paths.x.get(p, i)).sum::<f64>() / paths.m as f64;
            for p in 0..paths.m {
                let d = stored.y.get(p, i) - paths.x.get(p, i);
                num += d * d;
                let c = paths.x.get(p, i) - mean_x;
                den += c * c;
            }
            assert!(
                num / den < 0.05,
                "node {i}: relative tracking error {}",
                num / den
            );
        }
        assert!((sol.y0.value - 1.0).abs() < 3.0 * sol.y0.se + 1e-12);
    }

    #[test]
    fn euler_z_recovers_sigma() {
        let cs = coeffs::zero_f_identity_g();
        let (view, paths) = setup(&cs, 0.25, 8, 20_000, 7);
        let cfg = cfg_with(4, false, true);
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        let sigma = view.sigma_eps();
        for (i, st) in sol.node_stats.as_ref().unwrap().iter().enumerate().take(8) {
            assert!(
                (st.z.value - sigma).abs() < 3.0 * st.z.se + 1e-12,
                "node {i}: z {} se {} target {sigma}",
                st.z.value,
                st.z.se
            );
        }
    }

    #[test]
    fn euler_gamma_recovers_m_big() {
        // U = 1, rho = 1, w(e) = e: Gamma estimates m(E_eps)
        let cs = coeffs::zero_f_identity_g();
        let (view, paths) = setup(&cs, 0.25, 8, 20_000, 9);
        let cfg = cfg_with(4, false, true);
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        let target = view.m_big;
        for (i, st) in sol.node_stats.as_ref().unwrap().iter().enumerate().take(8) {
            assert!(
                (st.gamma.value - target).abs() < 3.0 * st.gamma.se,
                "node {i}: gamma {} se {} target {target}",
                st.gamma.value,
                st.gamma.se
            );
        }
    }

    #[test]
    fn windowed_gamma_recovers_same_target() {
        // U = 1 model: the window-averaged Gamma target is m(E_eps) for any
        // window width
        let cs = coeffs::zero_f_identity_g();
        let (view, paths) = setup(&cs, 0.25, 16, 20_000, 9);
        let mut cfg = cfg_with(4, false, true);
        cfg.gamma_window = 4;
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        let target = view.m_big;
        for (i, st) in sol.node_stats.as_ref().unwrap().iter().enumerate().take(16) {
            assert!(
                (st.gamma.value - target).abs() < 3.0 * st.gamma.se,
                "node {i}: gamma {} se {} target {target}",
                st.gamma.value,
                st.gamma.se
            );
        }
    }

    #[test]
    fn malliavin_zero_generator_gives_exact_z() {
        let cs = coeffs::zero_f_identity_g();
        let (view, paths) = setup(&cs, 0.25, 8, 4_096, 11);
        let cfg = cfg_with(4, true, false);
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Malliavin).unwrap();
        let sigma = view.sigma_eps();
        let stored = sol.paths_values.as_ref().unwrap();
        for p in (0..paths.m).step_by(101) {
            for i in 0..8 {
                assert!(
                    (stored.z.get(p, i) - sigma).abs() < 1e-10,
                    "p {p} node {i}: {}",
                    stored.z.get(p, i)
                );
            }
        }
        let weights = build_weights(&paths, &view, &cs).unwrap();
        for p in (0..paths.m).step_by(97) {
            assert_eq!(weights.weight(p, 3, 3), 1.0);
            assert!((weights.weight(p, 0, 8) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn malliavin_terminal_conditions() {
        let cs = coeffs::lipschitz_smooth(0.5, 0.3, 1.0);
        let (view, paths) = setup(&cs, 0.25, 8, 256, 13);
        let cfg = cfg_with(3, true, false);
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Malliavin).unwrap();
        let stored = sol.paths_values.as_ref().unwrap();
        for p in 0..256 {
            let x = paths.x.get(p, 8);
            let z_expect = paths.sigma_eps * cs.terminal.deriv(x) * cs.diffusion.eval(x);
            let u_expect = cs.terminal.eval(x + cs.diffusion.eval(x)) - cs.terminal.eval(x);
            assert_eq!(stored.z.get(p, 8), z_expect);
            assert!((stored.u.get(p, 8) - u_expect).abs() < 1e-12 * u_expect.abs().max(1.0));
            assert_eq!(stored.y.get(p, 8), cs.terminal.eval(x));
        }
    }

    #[test]
    fn weight_multiplicativity_in_log_space() {
        let cs = CoefficientSet {
            drift: ScalarFn::Zero,
            diffusion: ScalarFn::Constant(1.0),
            terminal: ScalarFn::Identity,
            generator: Generator::Linear {
                f1: TimeFn::Constant(0.1),
                f2: TimeFn::Affine { a: 0.3, b: -0.1 },
                f3: TimeFn::Constant(0.2),
            },
        };
        let (view, paths) = setup(&cs, 0.25, 16, 1000, 15);
        let w = build_weights(&paths, &view, &cs).unwrap();
        for p in 0..1000 {
            assert_eq!(w.weight(p, 5, 5), 1.0);
            for (i, j, k) in [(0usize, 4usize, 9usize), (2, 8, 16), (1, 2, 3)] {
                let lhs = w.log_weight(p, i, k);
                let rhs = w.log_weight(p, i, j) + w.log_weight(p, j, k);
                assert!((lhs - rhs).abs() < 1e-12, "p {p}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn deterministic_weights_when_f3_zero() {
        let cs = coeffs::linear_bsde(0.5, 0.0);
        let (view, paths) = setup(&cs, 0.25, 8, 64, 17);
        let w = build_weights(&paths, &view, &cs).unwrap();
        let dt = paths.grid.dt();
        for p in 0..64 {
            for j in 0..=8 {
                let expect = (0.5 * dt * j as f64).exp();
                assert!((w.weight(p, 0, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_bsde_y0_matches_closed_form_both_schemes() {
        let f2 = 0.5;
        let cs = coeffs::linear_bsde(f2, 0.0);
        let (view, paths) = setup(&cs, 0.25, 32, 20_000, 19);
        let cfg = cfg_with(4, false, false);
        let euler = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).unwrap();
        let mall = solve(&paths, &view, &cs, &cfg, SchemeKind::Malliavin).unwrap();
        let target = 1.0 * (f2 * 1.0_f64).exp(); // x0 e^{f2 T}, X is a martingale
        for (name, sol) in [("euler", &euler), ("malliavin", &mall)] {
            assert!(
                (sol.y0.value - target).abs() < 3.0 * sol.y0.se + 0.02,
                "{name}: y0 {} se {} target {target}",
                sol.y0.value,
                sol.y0.se
            );
        }
        let combined = (euler.y0.se * euler.y0.se + mall.y0.se * mall.y0.se).sqrt();
        assert!(
            (euler.y0.value - mall.y0.value).abs() < 3.0 * combined + 0.02,
            "schemes disagree: {} vs {}",
            euler.y0.value,
            mall.y0.value
        );
    }

    #[test]
    fn implicit_step_rejects_large_k_dt() {
        let cs = coeffs::linear_bsde(20.0, 0.0); // f2 dt = 2.5 at n = 8
        let (view, paths) = setup(&cs, 0.25, 8, 128, 21);
        let cfg = cfg_with(2, false, false);
        match solve_backward_euler(&paths, &view, &cs, &cfg) {
            Err(Error::FixedPoint { .. }) => {}
            other => panic!("expected FixedPoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn nonlinear_generator_fixed_point_converges() {
        let cs = CoefficientSet {
            drift: ScalarFn::Zero,
            diffusion: ScalarFn::Constant(1.0),
            terminal: ScalarFn::Identity,
            generator: Generator::TanhY { scale: 0.5 },
        };
        let (view, paths) = setup(&cs, 0.25, 16, 4_000, 23);
        let cfg = cfg_with(3, false, false);
        let sol = solve_backward_euler(&paths, &view, &cs, &cfg).unwrap();
        // y0 close to the ODE solution of y' = -0.5 tanh(y), y(1) = E[X_1] = 1,
        // integrated backward: rough bounds suffice
        assert!(
            sol.y0.value > 1.0 && sol.y0.value < 1.6,
            "y0 {}",
            sol.y0.value
        );
    }

    #[test]
    fn zero_diffusion_hits_alpha_indicator_without_nan() {
        let cs = CoefficientSet {
            drift: ScalarFn::Linear {
                slope: -1.0,
                intercept: 0.0,
            },
            diffusion: ScalarFn::Zero,
            terminal: ScalarFn::Identity,
            generator: Generator::Linear {
                f1: TimeFn::Constant(0.0),
                f2: TimeFn::Constant(0.5),
                f3: TimeFn::Constant(0.2),
            },
        };
        let (view, paths) = setup(&cs, 0.25, 8, 64, 25);
        let cfg = cfg_with(2, true, false);
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Malliavin).unwrap();
        let stored = sol.paths_values.as_ref().unwrap();
        for p in 0..64 {
            for i in 0..=8 {
                assert!(stored.gamma.get(p, i).is_finite());
                assert_eq!(stored.gamma.get(p, i), 0.0);
                assert_eq!(stored.z.get(p, i), 0.0);
            }
        }
    }

    #[test]
    fn node_values_are_functions_of_current_state() {
        // measurability by construction: stored values re-evaluate bitwise
        let cs = coeffs::lipschitz_smooth(0.5, 0.3, 1.0);
        let (view, paths) = setup(&cs, 0.25, 8, 2_048, 27);
        let cfg = cfg_with(4, true, false);
        for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
            let sol = solve(&paths, &view, &cs, &cfg, scheme).unwrap();
            let stored = sol.paths_values.as_ref().unwrap();
            for p in (0..paths.m).step_by(59) {
                for i in 1..8 {
                    let x = paths.x.get(p, i);
                    assert_eq!(stored.z.get(p, i), sol.eval_z(i, x));
                    assert_eq!(stored.gamma.get(p, i), sol.eval_gamma(i, x));
                }
            }
        }
    }

    #[test]
    fn weight_overflow_is_reported() {
        let cs = coeffs::linear_bsde(1e6, 0.0);
        let (view, paths) = setup(&cs, 0.25, 8, 32, 29);
        match build_weights(&paths, &view, &cs) {
            Err(Error::WeightOverflow { .. }) => {}
            other => panic!("expected WeightOverflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn solve_requires_matching_view() {
        let cs = coeffs::zero_f_identity_g();
        let (_, paths) = setup(&cs, 0.25, 8, 64, 31);
        let model = LevyModel::with_defaults(Family::SymmetricStable { alpha: 0.5 }).unwrap();
        let other_view = make_truncation(&model, 0.5).unwrap();
        let cfg = cfg_with(2, false, false);
        assert!(solve_backward_euler(&paths, &other_view, &cs, &cfg).is_err());
    }

    #[test]
    fn malliavin_requires_linear_form() {
        let cs = CoefficientSet {
            drift: ScalarFn::Zero,
            diffusion: ScalarFn::Constant(1.0),
            terminal: ScalarFn::Identity,
            generator: Generator::TanhY { scale: 0.5 },
        };
        let (view, paths) = setup(&cs, 0.25, 8, 64, 33);
        let cfg = cfg_with(2, false, false);
        assert!(matches!(
            solve(&paths, &view, &cs, &cfg, SchemeKind::Malliavin),
            Err(Error::Config(_))
        ));
    }
}
