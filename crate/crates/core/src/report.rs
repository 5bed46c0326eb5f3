//! Report rows with the pinned CSV schema.
//!
//! Header and row rendering are bit-exact: floats carry 17 significant
//! digits, so identical runs produce identical bytes.

pub const CSV_HEADER: &str =
    "experiment_id,scheme,n,eps,sigma_eps,M,seed,err_kind,estimate,se,slope,slope_lo,slope_hi";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub experiment_id: String,
    pub scheme: String,
    pub n: usize,
    pub eps: f64,
    pub sigma_eps: f64,
    pub m: usize,
    pub seed: u64,
    pub err_kind: String,
    pub estimate: f64,
    pub se: f64,
    pub slope: Option<f64>,
    pub slope_lo: Option<f64>,
    pub slope_hi: Option<f64>,
}

/// 17 significant digits, locale-free.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_g17).unwrap_or_default()
}

impl Row {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment_id,
            self.scheme,
            self.n,
            fmt_g17(self.eps),
            fmt_g17(self.sigma_eps),
            self.m,
            self.seed,
            self.err_kind,
            fmt_g17(self.estimate),
            fmt_g17(self.se),
            fmt_opt(self.slope),
            fmt_opt(self.slope_lo),
            fmt_opt(self.slope_hi),
        )
    }
}

pub fn render_csv(rows: &[Row], timestamp: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(ts) = timestamp {
        out.push_str(&format!("# generated {ts}\n"));
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
