//! Experiment drivers shared by the acceptance suite and the CLI: each one
//! wires simulation, solves, error estimation and rate fitting for one
//! experiment family. Every driver is deterministic in its seed and
//! independent of thread count.

use crate::coeffs::CoefficientSet;
use crate::error::Result;
use crate::forward::{simulate_forward, simulate_reference, Grid};
use crate::harness::{
    estimate_err_forward, estimate_err_n, estimate_err_n_eps, fit_rate_with_band,
    holder_increments, ErrEstimate, ErrNReport, RateFit, SolvedRun,
};
use crate::levy::{make_truncation, GammaKernel, LevyModel, TruncationView};
use crate::regression::BasisSpec;
use crate::schemes::{solve, SchemeKind, SolveConfig};

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub m: usize,
    pub x0: f64,
    pub horizon: f64,
    pub seed: u64,
    pub basis: BasisSpec,
    pub kernel: GammaKernel,
    pub resamples: usize,
}

impl RunSpec {
    pub fn new(m: usize, seed: u64) -> Self {
        RunSpec {
            m,
            x0: 1.0,
            horizon: 1.0,
            seed,
            basis: BasisSpec::polynomial(4),
            kernel: GammaKernel::WithMark,
            resamples: crate::stats::DEFAULT_RESAMPLES,
        }
    }

    fn solve_cfg(&self) -> SolveConfig {
        let mut cfg = SolveConfig::new(self.basis);
        cfg.kernel = self.kernel;
        cfg.seed = self.seed;
        cfg.bootstrap = self.resamples;
        cfg
    }
}

/// Simulate and solve one `(n, eps)` point with the given scheme.
pub fn run_single(
    model: &LevyModel,
    coeffs: &CoefficientSet,
    spec: &RunSpec,
    n: usize,
    eps: f64,
    scheme: SchemeKind,
    store_paths: bool,
    node_stats: bool,
) -> Result<(TruncationView, SolvedRun)> {
    let view = make_truncation(model, eps)?;
    let grid = Grid::new(n, spec.horizon)?;
    let paths = simulate_forward(model, &view, coeffs, grid, spec.m, spec.x0, spec.seed)?;
    let mut cfg = spec.solve_cfg();
    cfg.store_paths = store_paths;
    cfg.node_stats = node_stats;
    let solution = solve(&paths, &view, coeffs, &cfg, scheme)?;
    Ok((view, SolvedRun { paths, solution }))
}

pub struct ForwardRatePoint {
    pub eps: f64,
    pub sigma2: f64,
    pub sigma_eps: f64,
    pub est: ErrEstimate,
}

pub struct ForwardRateResult {
    pub points: Vec<ForwardRatePoint>,
    pub fit: RateFit,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

/// Strong forward error `E sup |X - X^eps|^2` across an `eps` sweep, each
/// point against a nested reference at `delta = eps / delta_div`, and the
/// log-log rate against `sigma(eps)^2`.
pub fn forward_rate_sweep(
    model: &LevyModel,
    coeffs: &CoefficientSet,
    spec: &RunSpec,
    eps_list: &[f64],
    n: usize,
    refine: usize,
    delta_div: f64,
) -> Result<ForwardRateResult> {
    let grid = Grid::new(n, spec.horizon)?;
    let fine = Grid::new(n * refine, spec.horizon)?;
    let mut points = Vec::new();
    for &eps in eps_list {
        let view = make_truncation(model, eps)?;
        let coarse = simulate_forward(model, &view, coeffs, grid, spec.m, spec.x0, spec.seed)?;
        let reference = simulate_reference(model, coeffs, fine, eps / delta_div, &coarse, spec.m)?;
        let est = estimate_err_forward(&coarse, &reference, spec.resamples)?;
        points.push(ForwardRatePoint {
            eps,
            sigma2: view.sigma2,
            sigma_eps: view.sigma_eps(),
            est,
        });
    }
    let pts: Vec<(f64, &ErrEstimate)> = points.iter().map(|p| (p.sigma2, &p.est)).collect();
    let (fit, slope_lo, slope_hi) = fit_rate_with_band(&pts, |e| e)?;
    Ok(ForwardRateResult {
        points,
        fit,
        slope_lo,
        slope_hi,
    })
}

pub struct BackwardRatePoint {
    pub n: usize,
    pub report: ErrNReport,
}

pub struct BackwardRateResult {
    pub points: Vec<BackwardRatePoint>,
    /// Rate of `sqrt(combined)` vs `n` (the theoretical statements are for
    /// the unsquared error functionals).
    pub fit: RateFit,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

/// Backward discretization rate at fixed `eps`: an `n` sweep against one
/// shared self-refining oracle (Euler solve at `oracle_n`, `oracle_m`).
pub fn backward_rate_sweep(
    model: &LevyModel,
    coeffs: &CoefficientSet,
    spec: &RunSpec,
    eps: f64,
    n_list: &[usize],
    oracle_n: usize,
    oracle_m: usize,
    scheme: SchemeKind,
) -> Result<BackwardRateResult> {
    let view = make_truncation(model, eps)?;
    let base_grid = Grid::new(n_list[0], spec.horizon)?;
    let base = simulate_forward(model, &view, coeffs, base_grid, spec.m, spec.x0, spec.seed)?;
    let oracle_grid = Grid::new(oracle_n, spec.horizon)?;
    let oracle_paths = simulate_reference(model, coeffs, oracle_grid, eps, &base, oracle_m)?;
    let cfg = spec.solve_cfg();
    // the oracle's Gamma regression runs over windows matching the finest
    // coarse grid, which removes the 1/dt variance penalty of the fine grid
    let mut oracle_cfg = cfg.clone();
    let max_n = n_list.iter().copied().max().unwrap_or(oracle_n);
    oracle_cfg.gamma_window = (oracle_n / max_n).max(1);
    let oracle_solution = solve(&oracle_paths, &view, coeffs, &oracle_cfg, SchemeKind::Euler)?;
    let oracle = SolvedRun {
        paths: oracle_paths,
        solution: oracle_solution,
    };
    drop(base);

    let mut points = Vec::new();
    for &n in n_list {
        let grid = Grid::new(n, spec.horizon)?;
        let paths = simulate_forward(model, &view, coeffs, grid, spec.m, spec.x0, spec.seed)?;
        let solution = solve(&paths, &view, coeffs, &cfg, scheme)?;
        let run = SolvedRun { paths, solution };
        let report = estimate_err_n(&oracle, &run, spec.resamples)?;
        points.push(BackwardRatePoint { n, report });
    }
    let pts: Vec<(f64, &ErrEstimate)> = points
        .iter()
        .map(|p| (p.n as f64, &p.report.combined))
        .collect();
    let (fit, slope_lo, slope_hi) = fit_rate_with_band(&pts, f64::sqrt)?;
    Ok(BackwardRateResult {
        points,
        fit,
        slope_lo,
        slope_hi,
    })
}

pub struct SchedulePoint {
    pub n: usize,
    pub eps: f64,
    pub sigma_eps: f64,
    pub report: ErrNReport,
}

pub struct ScheduleResult {
    pub points: Vec<SchedulePoint>,
    pub fit: RateFit,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

/// Combined approximation-discretization error along the schedule
/// `eps = n^{-1/2}`, each point against a `delta = eps/delta_div` reference
/// solve on an `refine`-times finer grid with `ref_m_factor * m` paths.
pub fn schedule_sweep(
    model: &LevyModel,
    coeffs: &CoefficientSet,
    spec: &RunSpec,
    n_list: &[usize],
    scheme: SchemeKind,
    refine: usize,
    delta_div: f64,
    ref_m_factor: usize,
) -> Result<ScheduleResult> {
    let cfg = spec.solve_cfg();
    let mut points = Vec::new();
    for &n in n_list {
        let eps = (n as f64).powf(-0.5);
        let view = make_truncation(model, eps)?;
        let grid = Grid::new(n, spec.horizon)?;
        let paths = simulate_forward(model, &view, coeffs, grid, spec.m, spec.x0, spec.seed)?;
        let solution = solve(&paths, &view, coeffs, &cfg, scheme)?;
        let coarse = SolvedRun { paths, solution };

        let delta = eps / delta_div;
        let view_d = make_truncation(model, delta)?;
        let fine_grid = Grid::new(refine * n, spec.horizon)?;
        let ref_paths = simulate_reference(
            model,
            coeffs,
            fine_grid,
            delta,
            &coarse.paths,
            ref_m_factor * spec.m,
        )?;
        let mut ref_cfg = cfg.clone();
        ref_cfg.gamma_window = refine.max(1);
        let ref_solution = solve(&ref_paths, &view_d, coeffs, &ref_cfg, SchemeKind::Euler)?;
        let reference = SolvedRun {
            paths: ref_paths,
            solution: ref_solution,
        };
        let report = estimate_err_n_eps(&reference, &coarse, spec.resamples)?;
        points.push(SchedulePoint {
            n,
            eps,
            sigma_eps: view.sigma_eps(),
            report,
        });
    }
    let pts: Vec<(f64, &ErrEstimate)> = points
        .iter()
        .map(|p| (p.n as f64, &p.report.combined))
        .collect();
    let (fit, slope_lo, slope_hi) = fit_rate_with_band(&pts, f64::sqrt)?;
    Ok(ScheduleResult {
        points,
        fit,
        slope_lo,
        slope_hi,
    })
}

pub struct HolderResult {
    pub increments: Vec<(f64, ErrEstimate)>,
    pub fit: RateFit,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

/// Empirical `E|Z_t - Z_s|^2` across dyadic node gaps on a solved run.
pub fn holder_run(
    model: &LevyModel,
    coeffs: &CoefficientSet,
    spec: &RunSpec,
    eps: f64,
    n: usize,
    gaps: &[usize],
    scheme: SchemeKind,
) -> Result<HolderResult> {
    let view = make_truncation(model, eps)?;
    let grid = Grid::new(n, spec.horizon)?;
    let paths = simulate_forward(model, &view, coeffs, grid, spec.m, spec.x0, spec.seed)?;
    let mut cfg = spec.solve_cfg();
    cfg.store_paths = true;
    let solution = solve(&paths, &view, coeffs, &cfg, scheme)?;
    let increments = holder_increments(&solution, gaps, spec.resamples, spec.seed)?;
    let pts: Vec<(f64, &ErrEstimate)> = increments.iter().map(|(g, e)| (*g, e)).collect();
    let (fit, slope_lo, slope_hi) = fit_rate_with_band(&pts, |e| e)?;
    Ok(HolderResult {
        increments,
        fit,
        slope_lo,
        slope_hi,
    })
}
