//! Batch front-end: parses experiment configs, runs sweeps, writes CSV/JSON
//! reports and gnuplot-ready rate tables.
//!
//! Exit codes: 0 success, 1 runtime failure (the failing experiment is named
//! on stderr), 2 configuration errors.

mod config;
mod runner;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{
    parse_config, BasisConfig, CoefficientConfig, EpsConfig, ExperimentConfig, ExperimentKind,
    FamilyConfig, GridConfig, ModelConfig, RhoConfig, SchemeConfig,
};

#[derive(Parser)]
#[command(
    name = "fbsde",
    about = "Monte Carlo experiments for FBSDEs driven by pure-jump Levy noise"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, clap::Args)]
struct Overrides {
    /// Optional config file overriding the subcommand's built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    /// Path count override
    #[arg(long = "M")]
    m: Option<usize>,
    /// Suppress the timestamp comment line in the CSV
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full experiment config (JSON)
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Strong forward-approximation error across an eps sweep
    RatesForward {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve one (n, eps) point and report (Y0, Z0, Gamma0)
    Solve {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Backward discretization rates over an n sweep
    RatesBackward {
        #[command(flatten)]
        overrides: Overrides,
        /// `sqrt` applies the eps = n^{-1/2} schedule
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Hoelder-continuity probe for the Z increments
    Holder {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fast self-checks; nonzero exit on any failure
    Selftest,
}

fn stable_model(alpha: f64, e_max: f64) -> ModelConfig {
    ModelConfig {
        family: FamilyConfig::SymmetricStable { alpha },
        e_max,
        rho: RhoConfig::Constant { value: 1.0 },
        rho_bound: 2.0,
    }
}

fn base_config(kind: ExperimentKind) -> ExperimentConfig {
    let text = r#"{"experiment":"solve","model":{"family":{"kind":"symmetric_stable","alpha":0.5}},
        "coefficients":{"preset":"zero_f_identity_g"},"grid":{"n":32},"eps":0.25,"M":10000}"#;
    let mut cfg = parse_config(text).expect("builtin config");
    cfg.experiment = kind;
    cfg
}

fn default_config(kind: ExperimentKind, schedule: bool) -> ExperimentConfig {
    let mut cfg = base_config(kind.clone());
    match kind {
        ExperimentKind::Solve => {
            cfg.coefficients = CoefficientConfig::LinearBsde {
                f1: 0.0,
                f2: 0.5,
                beta_amp: 0.0,
                drift_rate: 0.0,
            };
            cfg.scheme = SchemeConfig::Both;
            cfg.m = 20_000;
        }
        ExperimentKind::RatesForward => {
            cfg.coefficients = CoefficientConfig::LipschitzSmooth {
                f2: 0.0,
                beta_amp: 0.1,
                drift_rate: 1.0,
            };
            cfg.grid = GridConfig {
                horizon: 1.0,
                n: Some(64),
                n_sweep: None,
            };
            cfg.eps = Some(EpsConfig::Sweep {
                sweep: vec![0.4, 0.2, 0.1, 0.05],
            });
            cfg.m = 4000;
        }
        ExperimentKind::RatesBackward => {
            cfg.model = stable_model(0.5, 0.5);
            cfg.coefficients = CoefficientConfig::LinearBsde {
                f1: 0.3,
                f2: 0.0,
                beta_amp: 0.5,
                drift_rate: 0.0,
            };
            cfg.basis = BasisConfig::Polynomial { degree: 3 };
            cfg.scheme = SchemeConfig::Both;
            if schedule {
                cfg.grid = GridConfig {
                    horizon: 1.0,
                    n: None,
                    n_sweep: Some(vec![16, 64, 256]),
                };
                cfg.eps = Some(EpsConfig::Schedule {
                    schedule: "sqrt".into(),
                });
                cfg.scheme = SchemeConfig::Euler;
                cfg.m = 2000;
            } else {
                cfg.grid = GridConfig {
                    horizon: 1.0,
                    n: None,
                    n_sweep: Some(vec![8, 16, 32]),
                };
                cfg.eps = Some(EpsConfig::Fixed(0.1));
                cfg.m = 10_000;
                cfg.oracle = config::OracleConfig {
                    n: 256,
                    m_factor: 4,
                };
            }
        }
        ExperimentKind::Holder => {
            cfg.coefficients = CoefficientConfig::LinearBsde {
                f1: 0.0,
                f2: 0.5,
                beta_amp: 0.5,
                drift_rate: 0.0,
            };
            cfg.grid = GridConfig {
                horizon: 1.0,
                n: Some(64),
                n_sweep: None,
            };
            cfg.eps = Some(EpsConfig::Fixed(0.3));
            cfg.m = 20_000;
        }
    }
    cfg
}

fn load_or_default(
    kind: ExperimentKind,
    overrides: &Overrides,
    schedule: Option<&str>,
) -> Result<ExperimentConfig, String> {
    let mut cfg = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let mut cfg = parse_config(&text)?;
            cfg.experiment = kind;
            cfg
        }
        None => default_config(kind, schedule == Some("sqrt")),
    };
    if let Some(s) = schedule {
        if s != "sqrt" {
            return Err(format!("unknown schedule `{s}`"));
        }
        cfg.eps = Some(EpsConfig::Schedule {
            schedule: "sqrt".into(),
        });
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    if let Some(m) = overrides.m {
        cfg.m = m;
    }
    if overrides.no_timestamp {
        cfg.suppress_timestamp = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), (u8, String)> = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out,
            no_timestamp,
        } => (|| {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| (2u8, format!("cannot read {}: {e}", config.display())))?;
            let mut cfg = parse_config(&text).map_err(|e| (2u8, e))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if no_timestamp {
                cfg.suppress_timestamp = true;
            }
            runner::run(&cfg).map_err(|e| (1u8, e))
        })(),
        Cmd::RatesForward { overrides } => dispatch(ExperimentKind::RatesForward, &overrides, None),
        Cmd::Solve { overrides } => dispatch(ExperimentKind::Solve, &overrides, None),
        Cmd::RatesBackward {
            overrides,
            schedule,
        } => dispatch(
            ExperimentKind::RatesBackward,
            &overrides,
            schedule.as_deref(),
        ),
        Cmd::Holder { overrides } => dispatch(ExperimentKind::Holder, &overrides, None),
        Cmd::Selftest => {
            return if selftest::run_all() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(
    kind: ExperimentKind,
    overrides: &Overrides,
    schedule: Option<&str>,
) -> Result<(), (u8, String)> {
    let cfg = load_or_default(kind, overrides, schedule).map_err(|e| (2u8, e))?;
    runner::run(&cfg).map_err(|e| (1u8, e))
}
