//! JSON experiment configuration: schema, defaults, validation, and
//! conversion into core types. The effective (defaulted) config is echoed
//! next to every report so a run can be reproduced from its own output.

use serde::{Deserialize, Serialize};

use levy_fbsde::coeffs::{self, CoefficientSet};
use levy_fbsde::levy::{Family, GammaKernel, LevyModel, Rho};
use levy_fbsde::regression::{BasisKind, BasisSpec};
use levy_fbsde::schemes::SchemeKind;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    RatesForward,
    RatesBackward,
    Holder,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    SymmetricStable { alpha: f64 },
    TemperedStable { alpha: f64, lambda: f64 },
    ExponentialTails { lambda: f64, c: f64 },
}

impl FamilyConfig {
    fn to_family(&self) -> Family {
        match *self {
            FamilyConfig::SymmetricStable { alpha } => Family::SymmetricStable { alpha },
            FamilyConfig::TemperedStable { alpha, lambda } => {
                Family::TemperedStable { alpha, lambda }
            }
            FamilyConfig::ExponentialTails { lambda, c } => Family::ExponentialTails { lambda, c },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RhoConfig {
    Constant { value: f64 },
    Damped { scale: f64 },
}

impl Default for RhoConfig {
    fn default() -> Self {
        RhoConfig::Constant { value: 1.0 }
    }
}

fn default_e_max() -> f64 {
    1.0
}

fn default_rho_bound() -> f64 {
    2.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: FamilyConfig,
    #[serde(default = "default_e_max")]
    pub e_max: f64,
    #[serde(default)]
    pub rho: RhoConfig,
    #[serde(default = "default_rho_bound")]
    pub rho_bound: f64,
}

impl ModelConfig {
    pub fn build(&self) -> Result<LevyModel, String> {
        let rho = match self.rho {
            RhoConfig::Constant { value } => Rho::Constant(value),
            RhoConfig::Damped { scale } => Rho::Damped { scale },
        };
        LevyModel::new(self.family.to_family(), self.e_max, rho, self.rho_bound)
            .map_err(|e| format!("model: {e}"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientConfig {
    ZeroFIdentityG,
    LinearBsde {
        #[serde(default)]
        f1: f64,
        #[serde(default)]
        f2: f64,
        #[serde(default)]
        beta_amp: f64,
        #[serde(default)]
        drift_rate: f64,
    },
    LipschitzSmooth {
        #[serde(default)]
        f2: f64,
        #[serde(default)]
        beta_amp: f64,
        #[serde(default)]
        drift_rate: f64,
    },
}

impl CoefficientConfig {
    pub fn build(&self) -> CoefficientSet {
        match *self {
            CoefficientConfig::ZeroFIdentityG => coeffs::zero_f_identity_g(),
            CoefficientConfig::LinearBsde {
                f1,
                f2,
                beta_amp,
                drift_rate,
            } => coeffs::linear_bsde_with(f1, f2, beta_amp, drift_rate),
            CoefficientConfig::LipschitzSmooth {
                f2,
                beta_amp,
                drift_rate,
            } => coeffs::lipschitz_smooth(f2, beta_amp, drift_rate),
        }
    }
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sweep: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged, deny_unknown_fields)]
pub enum EpsConfig {
    Fixed(f64),
    Sweep { sweep: Vec<f64> },
    Schedule { schedule: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    Polynomial { degree: usize },
    LocalPartition { cells: usize },
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig::Polynomial { degree: 4 }
    }
}

impl BasisConfig {
    pub fn build(&self) -> BasisSpec {
        match *self {
            BasisConfig::Polynomial { degree } => BasisSpec {
                kind: BasisKind::Polynomial { degree },
                clip: None,
            },
            BasisConfig::LocalPartition { cells } => BasisSpec {
                kind: BasisKind::LocalPartition { cells },
                clip: None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    #[default]
    Euler,
    Malliavin,
    Both,
}

impl SchemeConfig {
    pub fn kinds(&self) -> Vec<SchemeKind> {
        match self {
            SchemeConfig::Euler => vec![SchemeKind::Euler],
            SchemeConfig::Malliavin => vec![SchemeKind::Malliavin],
            SchemeConfig::Both => vec![SchemeKind::Euler, SchemeKind::Malliavin],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum KernelConfig {
    #[default]
    WithMark,
    Plain,
}

impl KernelConfig {
    pub fn build(&self) -> GammaKernel {
        match self {
            KernelConfig::WithMark => GammaKernel::WithMark,
            KernelConfig::Plain => GammaKernel::Plain,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_x0() -> f64 {
    1.0
}

fn default_output_dir() -> String {
    "out".into()
}

fn default_bootstrap() -> usize {
    200
}

fn default_oracle() -> OracleConfig {
    OracleConfig {
        n: 256,
        m_factor: 4,
    }
}

fn default_reference() -> ReferenceConfig {
    ReferenceConfig {
        refine: 8,
        delta_div: 8.0,
        m_factor: 4,
    }
}

fn default_holder_gaps() -> Vec<usize> {
    vec![16, 8, 4]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub n: usize,
    pub m_factor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub refine: usize,
    pub delta_div: f64,
    pub m_factor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment")]
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    pub coefficients: CoefficientConfig,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<EpsConfig>,
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub gamma_kernel: KernelConfig,
    #[serde(default)]
    pub suppress_timestamp: bool,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_oracle")]
    pub oracle: OracleConfig,
    #[serde(default = "default_reference")]
    pub reference: ReferenceConfig,
    #[serde(default = "default_holder_gaps")]
    pub holder_gaps: Vec<usize>,
    #[serde(default)]
    pub gnuplot: bool,
}

fn default_experiment() -> ExperimentKind {
    ExperimentKind::Solve
}

impl ExperimentConfig {
    /// Grid sizes for the run, a single `n` or a sweep.
    pub fn n_values(&self) -> Result<Vec<usize>, String> {
        match (&self.grid.n, &self.grid.n_sweep) {
            (Some(n), None) => Ok(vec![*n]),
            (None, Some(sweep)) if !sweep.is_empty() => Ok(sweep.clone()),
            (Some(_), Some(_)) => Err("grid: set exactly one of `n` and `n_sweep`".into()),
            _ => Err("grid: one of `n` and `n_sweep` is required".into()),
        }
    }

    /// Resolved eps values paired with each `n`; the `sqrt` schedule sets
    /// `eps = n^{-1/2}` and is mutually exclusive with explicit values.
    pub fn eps_for(&self, n_values: &[usize]) -> Result<Vec<f64>, String> {
        match &self.eps {
            Some(EpsConfig::Fixed(e)) => Ok(vec![*e; n_values.len()]),
            Some(EpsConfig::Sweep { sweep }) => {
                if sweep.is_empty() {
                    return Err("eps.sweep must be nonempty".into());
                }
                Ok(sweep.clone())
            }
            Some(EpsConfig::Schedule { schedule }) => {
                if schedule != "sqrt" {
                    return Err(format!("unknown eps schedule `{schedule}`"));
                }
                Ok(n_values.iter().map(|&n| (n as f64).powf(-0.5)).collect())
            }
            None => Err("eps is required".into()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.build()?;
        if self.m == 0 {
            return Err("M must be positive".into());
        }
        if !(self.grid.horizon > 0.0) {
            return Err("grid.horizon must be positive".into());
        }
        let ns = self.n_values()?;
        for &n in &ns {
            if n == 0 {
                return Err("grid sizes must be positive".into());
            }
        }
        if matches!(self.experiment, ExperimentKind::RatesBackward)
            && ns.iter().any(|n| !n.is_power_of_two())
        {
            return Err("rate sweeps need power-of-two grid sizes (coupled refinement)".into());
        }
        match &self.eps {
            Some(EpsConfig::Fixed(e)) if !(e > &0.0) => {
                return Err(format!("eps must be positive, got {e}"));
            }
            Some(EpsConfig::Sweep { sweep }) if sweep.iter().any(|e| !(*e > 0.0)) => {
                return Err("eps sweep values must be positive".into());
            }
            _ => {}
        }
        if let Some(EpsConfig::Sweep { sweep }) = &self.eps {
            if matches!(self.experiment, ExperimentKind::RatesBackward) && sweep.len() != 1 {
                return Err(
                    "rates-backward uses a single eps or the sqrt schedule, not an eps sweep"
                        .into(),
                );
            }
        }
        self.basis.build().validate().map_err(|e| e.to_string())?;
        if self.bootstrap < 2 {
            return Err("bootstrap must be at least 2".into());
        }
        if self.oracle.m_factor < 4 {
            return Err("oracle.m_factor must be at least 4".into());
        }
        if self.reference.refine < 8 || self.reference.delta_div < 8.0 {
            return Err("reference refinement and delta divisor must be at least 8".into());
        }
        Ok(())
    }

    pub fn is_schedule(&self) -> bool {
        matches!(&self.eps, Some(EpsConfig::Schedule { .. }))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}
