use serde::{Deserialize, Serialize};

use crate::error::{PiaError, Result};

/// The penalty weight `phi(n)` applied at iteration `n`.
///
/// Every schedule satisfies `phi(0) = 1` and is non-decreasing; tables are
/// checked by [`PenaltySchedule::validate`]. Tables are held at their last
/// entry past the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltySchedule {
    /// `phi(n) = base^n`.
    Exponential { base: f64 },
    /// `phi(n) = base^(n(n+1)/2)`.
    SuperExponential { base: f64 },
    /// Explicit values `phi(0), phi(1), ...`.
    Table { values: Vec<f64> },
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule::Exponential { base: 4.0 }
    }
}

impl PenaltySchedule {
    pub fn super_exponential() -> Self {
        PenaltySchedule::SuperExponential { base: 2.0 }
    }

    pub fn phi(&self, n: usize) -> f64 {
        match self {
            PenaltySchedule::Exponential { base } => base.powi(n as i32),
            PenaltySchedule::SuperExponential { base } => {
                let e = (n * (n + 1) / 2) as f64;
                base.powf(e)
            }
            PenaltySchedule::Table { values } => {
                let i = n.min(values.len().saturating_sub(1));
                values[i]
            }
        }
    }

    /// Checks `phi(0) = 1`, positivity, finiteness and monotonicity for
    /// `n = 0..=n_max`.
    pub fn validate(&self, n_max: usize) -> Result<()> {
        match self {
            PenaltySchedule::Exponential { base } | PenaltySchedule::SuperExponential { base } => {
                if !(base.is_finite() && *base > 1.0) {
                    return Err(PiaError::config(format!(
                        "penalty schedule base must be a finite number > 1, got {base}"
                    )));
                }
            }
            PenaltySchedule::Table { values } => {
                if values.is_empty() {
                    return Err(PiaError::config("penalty table must not be empty"));
                }
            }
        }
        let phi0 = self.phi(0);
        if phi0 != 1.0 {
            return Err(PiaError::config(format!(
                "penalty schedule must satisfy phi(0) = 1, got phi(0) = {phi0}"
            )));
        }
        let mut prev = phi0;
        for n in 1..=n_max {
            let v = self.phi(n);
            if !v.is_finite() || v <= 0.0 {
                return Err(PiaError::config(format!(
                    "phi({n}) = {v} is not a positive finite number"
                )));
            }
            if v < prev {
                return Err(PiaError::config(format!(
                    "penalty schedule must be non-decreasing: phi({n}) = {v} < phi({}) = {prev}",
                    n - 1
                )));
            }
            prev = v;
        }
        Ok(())
    }

    /// Short label used in long-format reports.
    pub fn label(&self) -> String {
        match self {
            PenaltySchedule::Exponential { base } => format!("exp{base}"),
            PenaltySchedule::SuperExponential { base } => format!("superexp{base}"),
            PenaltySchedule::Table { values } => format!("table{}", values.len()),
        }
    }
}
