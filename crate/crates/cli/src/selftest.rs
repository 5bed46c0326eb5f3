//! Fast self-checks over the closed-form and exactness contracts; each check
//! prints one line and the command exits nonzero if any fails. Intended to
//! finish well under a minute.

use levy_fbsde::coeffs::{self, CoefficientSet, Generator, ScalarFn, TimeFn};
use levy_fbsde::forward::{
    propagate_malliavin_jump, propagate_malliavin_w, simulate_forward, Grid,
};
use levy_fbsde::harness::{estimate_err_forward, estimate_err_n, fit_rate, SolvedRun};
use levy_fbsde::levy::{make_truncation, sample_big_jumps, Family, LevyModel};
use levy_fbsde::regression::{fit, BasisKind, BasisSpec, CondExpEstimator};
use levy_fbsde::report::{fmt_g17, render_csv, Row, CSV_HEADER};
use levy_fbsde::schemes::{build_weights, solve, SchemeKind, SolveConfig};
use levy_fbsde::stream::substream;

type Check = (&'static str, fn() -> Result<(), String>);

fn ok(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn model() -> LevyModel {
    LevyModel::with_defaults(Family::SymmetricStable { alpha: 0.5 }).unwrap()
}

fn small_paths(
    coeffs: &CoefficientSet,
    n: usize,
    m: usize,
) -> (
    levy_fbsde::levy::TruncationView,
    levy_fbsde::forward::ForwardPaths,
) {
    let model = model();
    let view = make_truncation(&model, 0.25).unwrap();
    let grid = Grid::new(n, 1.0).unwrap();
    let paths = simulate_forward(&model, &view, coeffs, grid, m, 1.0, 7).unwrap();
    (view, paths)
}

fn check_truncation_at_e_max() -> Result<(), String> {
    let view = make_truncation(&model(), 1.0).map_err(|e| e.to_string())?;
    ok(view.nu_big == 0.0, "nu(E_eps) should be 0 at eps = e_max")?;
    ok(
        (view.sigma2 - view.total_m).abs() < 1e-9 * view.total_m,
        "sigma^2 should equal the full second moment",
    )
}

fn check_stable_closed_forms() -> Result<(), String> {
    let view = make_truncation(&model(), 0.25).map_err(|e| e.to_string())?;
    ok(
        (view.sigma2 - 1.0 / 12.0).abs() < 1e-9,
        "sigma^2(0.25) != 1/12",
    )?;
    ok((view.nu_big - 2.0).abs() < 1e-8, "nu(E_0.25) != 2")
}

fn check_zero_intensity_jumps() -> Result<(), String> {
    let view = make_truncation(&model(), 1.0).map_err(|e| e.to_string())?;
    let jumps = sample_big_jumps(&view, 1.0, &mut substream(1, 0, 2));
    ok(
        jumps.is_empty(),
        "zero intensity must give an empty sequence",
    )
}

fn check_constant_paths() -> Result<(), String> {
    let cs = CoefficientSet {
        drift: ScalarFn::Zero,
        diffusion: ScalarFn::Zero,
        terminal: ScalarFn::Identity,
        generator: Generator::Zero,
    };
    let (_, paths) = small_paths(&cs, 8, 16);
    for p in 0..16 {
        for i in 0..=8 {
            ok(
                paths.x.get(p, i) == 1.0,
                "no-dynamics paths must be constant",
            )?;
        }
    }
    Ok(())
}

fn check_deterministic_recursion() -> Result<(), String> {
    let cs = CoefficientSet {
        drift: ScalarFn::Linear {
            slope: -1.0,
            intercept: 0.0,
        },
        diffusion: ScalarFn::Zero,
        terminal: ScalarFn::Identity,
        generator: Generator::Zero,
    };
    let n = 16;
    let (_, paths) = small_paths(&cs, n, 4);
    let dt = 1.0 / n as f64;
    let mut y = 1.0;
    for _ in 0..n {
        y += -y * dt;
    }
    ok(
        paths.x.get(0, n) == y,
        "deterministic Euler recursion must be exact",
    )
}

fn check_malliavin_trivial() -> Result<(), String> {
    let cs = coeffs::zero_f_identity_g();
    let (view, paths) = small_paths(&cs, 8, 8);
    let dw = propagate_malliavin_w(&paths, &cs, 3);
    let dj = propagate_malliavin_jump(&paths, &cs, 3);
    for p in 0..8 {
        for i in 3..=8 {
            ok(
                (dw.get(p, i) - view.sigma_eps()).abs() < 1e-13,
                "D_theta X should be sigma for constant coefficients",
            )?;
            ok(
                (dj.get(p, i) - 1.0).abs() < 1e-13,
                "jump derivative should be 1",
            )?;
        }
        ok(
            dw.get(p, 1) == 0.0 && dj.get(p, 2) == 0.0,
            "zero before theta",
        )?;
    }
    Ok(())
}

fn check_regression_exactness() -> Result<(), String> {
    let xs: Vec<f64> = (0..64).map(|i| -2.0 + 0.125 * i as f64).collect();
    let constant = vec![2.5; 64];
    let est = fit(&xs, &constant, &BasisSpec::polynomial(3)).map_err(|e| e.to_string())?;
    ok((est.predict_one(0.3) - 2.5).abs() < 1e-12, "constant fit")?;
    let line: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let est = fit(&xs, &line, &BasisSpec::polynomial(1)).map_err(|e| e.to_string())?;
    let mono = est.monomial_coefficients().unwrap();
    ok(
        (mono[0] - 1.0).abs() < 1e-10 && (mono[1] - 2.0).abs() < 1e-10,
        "line coefficients",
    )?;
    let ident = CondExpEstimator::from_parts(
        BasisKind::Polynomial { degree: 1 },
        (-10.0, 10.0),
        vec![0.0, 1.0],
    );
    ok(ident.predict_one(2.0) == 2.0, "identity prediction")?;
    ok(
        ident.predict_one(25.0) == 10.0,
        "clipping at the guard range",
    )
}

fn check_terminal_and_weights() -> Result<(), String> {
    let cs = coeffs::linear_bsde(0.5, 0.0);
    let (view, paths) = small_paths(&cs, 8, 256);
    let mut cfg = SolveConfig::new(BasisSpec::polynomial(2));
    cfg.store_paths = true;
    cfg.seed = 7;
    let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).map_err(|e| e.to_string())?;
    let stored = sol.paths_values.as_ref().unwrap();
    for p in 0..256 {
        ok(
            stored.y.get(p, 8) == cs.terminal.eval(paths.x.get(p, 8)),
            "terminal Y must equal g(X_T) bitwise",
        )?;
    }
    let w = build_weights(&paths, &view, &cs).map_err(|e| e.to_string())?;
    ok(w.weight(0, 3, 3) == 1.0, "weight identity")?;
    let dt = paths.grid.dt();
    ok(
        (w.weight(0, 0, 8) - (0.5_f64 * dt * 8.0).exp()).abs() < 1e-12,
        "deterministic weights when f3 = 0",
    )
}

fn check_error_estimators_vanish() -> Result<(), String> {
    let cs = coeffs::linear_bsde(0.5, 0.0);
    let (view, paths) = small_paths(&cs, 8, 128);
    let est = estimate_err_forward(&paths, &paths, 20).map_err(|e| e.to_string())?;
    ok(est.value == 0.0, "err_forward on identical inputs")?;
    let mut cfg = SolveConfig::new(BasisSpec::polynomial(2));
    cfg.seed = 7;
    let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).map_err(|e| e.to_string())?;
    let run = SolvedRun {
        paths,
        solution: sol,
    };
    let rep = estimate_err_n(&run, &run, 20).map_err(|e| e.to_string())?;
    ok(rep.combined.value == 0.0, "err_n on identical inputs")
}

fn check_rate_fit() -> Result<(), String> {
    let pts: Vec<(f64, f64)> = [0.5_f64, 0.25, 0.125, 0.0625]
        .iter()
        .map(|&h| (h, h * h))
        .collect();
    let f = fit_rate(&pts).map_err(|e| e.to_string())?;
    ok(
        (f.slope - 2.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12,
        "exact power law",
    )?;
    ok(
        fit_rate(&[(1.0, 1.0), (0.5, 0.5)]).is_err(),
        "too few points",
    )?;
    ok(
        fit_rate(&[(1.0, 1.0), (0.5, 0.5), (0.25, -1.0)]).is_err(),
        "nonpositive input",
    )
}

fn check_csv_contract() -> Result<(), String> {
    ok(
        CSV_HEADER
            == "experiment_id,scheme,n,eps,sigma_eps,M,seed,err_kind,estimate,se,slope,slope_lo,slope_hi",
        "CSV header",
    )?;
    ok(
        fmt_g17(1.0 / 3.0) == "3.3333333333333331e-1",
        "17 significant digits",
    )
}

fn check_thread_count_independence() -> Result<(), String> {
    let run = || {
        let cs = coeffs::linear_bsde(0.5, 0.3);
        let (view, paths) = small_paths(&cs, 8, 1000);
        let mut cfg = SolveConfig::new(BasisSpec::polynomial(3));
        cfg.seed = 7;
        let sol = solve(&paths, &view, &cs, &cfg, SchemeKind::Euler).unwrap();
        let row = Row {
            experiment_id: "selftest".into(),
            scheme: "euler".into(),
            n: 8,
            eps: 0.25,
            sigma_eps: view.sigma_eps(),
            m: 1000,
            seed: 7,
            err_kind: "y0".into(),
            estimate: sol.y0.value,
            se: sol.y0.se,
            slope: None,
            slope_lo: None,
            slope_hi: None,
        };
        render_csv(&[row], None)
    };
    let a = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?
        .install(run);
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .map_err(|e| e.to_string())?
        .install(run);
    ok(a == b, "CSV must not depend on the thread count")
}

fn check_generator_linear_form() -> Result<(), String> {
    let g = Generator::Linear {
        f1: TimeFn::Constant(0.1),
        f2: TimeFn::Constant(0.5),
        f3: TimeFn::Constant(-0.2),
    };
    let (f1, f2, f3) = g.linear_form().unwrap();
    for (t, y, gamma) in [(0.0, 1.0, -0.5), (0.7, -2.0, 0.3)] {
        let lhs = g.eval(t, 3.0, y, gamma);
        let rhs = f1.eval(t) + f2.eval(t) * y + f3.eval(t) * gamma;
        ok((lhs - rhs).abs() < 1e-12, "linear form consistency")?;
    }
    Ok(())
}

pub fn run_all() -> bool {
    let checks: Vec<Check> = vec![
        ("truncation at e_max", check_truncation_at_e_max),
        ("stable closed forms", check_stable_closed_forms),
        ("zero-intensity jumps", check_zero_intensity_jumps),
        ("constant paths", check_constant_paths),
        ("deterministic recursion", check_deterministic_recursion),
        ("malliavin trivial cases", check_malliavin_trivial),
        ("regression exactness", check_regression_exactness),
        ("terminal values and weights", check_terminal_and_weights),
        (
            "error estimators vanish on identical input",
            check_error_estimators_vanish,
        ),
        ("rate fitting", check_rate_fit),
        ("csv contract", check_csv_contract),
        ("thread-count independence", check_thread_count_independence),
        ("generator linear form", check_generator_linear_form),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("selftest: {name} ... ok"),
            Err(e) => {
                failures += 1;
                println!("selftest: {name} ... FAIL ({e})");
            }
        }
    }
    if failures == 0 {
        println!("selftest: all checks passed");
        true
    } else {
        println!("selftest: {failures} check(s) failed");
        false
    }
}
