//! Iteration records, convergence reports and their CSV form.

use serde::{Deserialize, Serialize};

/// One iterate `n` of a scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub phi_n: f64,
    /// `V^n`.
    pub value: f64,
    /// Monte-Carlo standard error of `value`; absent in grid mode.
    pub stderr: Option<f64>,
    /// `V^n - V_ref` when a reference exists.
    pub err: Option<f64>,
    /// Path average of `int |Z^n - Z^{n-1}|^2 ds` (grid mode: window
    /// average of the gradient fields).
    pub z_distance: f64,
    /// Same for `u*(Z^n)` against `u*(Z^{n-1})`.
    pub control_distance: f64,
    /// Zero unless timing is enabled.
    pub wall_ms: u64,
    /// Time average of `|u*(Z^n) - nu*|^2` when the optimal control is known.
    pub control_error: Option<f64>,
    pub control_error_stderr: Option<f64>,
    /// Grid mode: `sup |v^n - v_ref|` over the central window.
    pub sup_gap: Option<f64>,
    pub z_clips: usize,
    pub ratio_clamps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    PdeOracle,
    BsdeOracle,
    None,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Analytic => "analytic",
            Provenance::PdeOracle => "pde_oracle",
            Provenance::BsdeOracle => "bsde_oracle",
            Provenance::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub value: Option<f64>,
    pub provenance: Provenance,
    pub tolerance: Option<f64>,
}

impl Reference {
    pub fn none() -> Self {
        Self {
            value: None,
            provenance: Provenance::None,
            tolerance: None,
        }
    }
}

/// Entropic penalization against the explicit iterate at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckResult {
    pub n: usize,
    pub v_tilde: f64,
    pub v_n: f64,
    pub gap: f64,
    pub stderr_tilde: f64,
    pub stderr_n: f64,
    pub combined_stderr: f64,
    /// `gap <= 3 combined_stderr`.
    pub passed: bool,
}

/// Least-squares slope of `log |e_n|` against `n` and the window used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub window: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mode: String,
    pub records: Vec<IterationRecord>,
    pub reference: Reference,
    pub fitted_rate: Option<RateFit>,
    pub crosschecks: Vec<CrosscheckResult>,
    /// Set when the run aborted after producing some records.
    pub partial: bool,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str = "n,phi_n,value,stderr,err,z_distance,control_distance,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ConvergenceReport {
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn errors(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.err).collect()
    }

    fn csv_row(r: &IterationRecord) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.phi_n,
            r.value,
            opt(r.stderr),
            opt(r.err),
            r.z_distance,
            r.control_distance,
            r.wall_ms
        )
    }

    /// CSV with the fixed column set, one row per record.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::csv_row(r));
            s.push('\n');
        }
        s
    }

    /// Long-format rows with a leading schedule label, no header.
    pub fn to_labelled_csv_rows(&self, label: &str) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(label);
            s.push(',');
            s.push_str(&Self::csv_row(r));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let rec = IterationRecord {
            n: 0,
            phi_n: 1.0,
            value: 0.5,
            stderr: Some(0.01),
            err: None,
            z_distance: 1.0,
            control_distance: 0.0,
            wall_ms: 0,
            control_error: None,
            control_error_stderr: None,
            sup_gap: None,
            z_clips: 0,
            ratio_clamps: 0,
        };
        let rep = ConvergenceReport {
            mode: "mc_nonmarkovian".into(),
            records: vec![rec],
            reference: Reference::none(),
            fitted_rate: None,
            crosschecks: vec![],
            partial: false,
            warnings: vec![],
        };
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "0,1,0.5,0.01,,1,0,0");
        assert_eq!(rep.to_labelled_csv_rows("exp4"), "exp4,0,1,0.5,0.01,,1,0,0\n");
    }
}
