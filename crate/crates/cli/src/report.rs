//! Evaluation report and its JSON/CSV renderings.

use std::fmt::Write as _;

use pnde_core::metrics::ErrorSeries;
use pnde_core::models::FieldKind;
use pnde_core::solvers::SolveStats;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub id: String,
    pub kind: FieldKind,
    /// Test trajectories that were integrated to the horizon.
    pub completed: usize,
    pub state_mse_mean: Option<f64>,
    pub state_mse_std: Option<f64>,
    pub constraint_mse_mean: Option<f64>,
    pub constraint_mse_std: Option<f64>,
    /// Mean over trajectories of `‖g‖₂²` at the last saved time.
    pub final_constraint_mse_mean: Option<f64>,
    /// Largest `‖g‖∞` over all trajectories and saved times.
    pub max_constraint_violation: Option<f64>,
    /// Primary error metric at the prediction horizon.
    pub horizon_error_mean: Option<f64>,
    pub horizon_error_std: Option<f64>,
    /// Median over trajectories, stiff ones counted with their partial stats.
    pub f_evals_median: Option<f64>,
    pub stiff: bool,
    pub stiff_trajectories: usize,
    /// Solver stats at the point a stiff solve gave up.
    pub partial_stats: Vec<SolveStats>,
    pub failures: Vec<String>,
    pub series: ErrorSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub system: String,
    /// `relative` or `bounded_relative`.
    pub error_metric: String,
    pub test_trajectories: usize,
    pub horizon: f64,
    pub provenance: Provenance,
    pub models: Vec<ModelReport>,
    #[serde(default)]
    pub checks: Vec<CheckResult>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

impl RunReport {
    pub fn model(&self, kind: FieldKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// One row per model and saved time.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("model,time,rel_err_mean,rel_err_std,constraint_mse_mean,constraint_mse_std\n");
        let bounded = self.error_metric == "bounded_relative";
        for m in &self.models {
            let s = &m.series;
            let (mean, std) = if bounded {
                (&s.bounded_err_mean, &s.bounded_err_std)
            } else {
                (&s.rel_err_mean, &s.rel_err_std)
            };
            for (k, t) in s.times.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:e},{:e},{},{}",
                    m.id,
                    t,
                    mean[k],
                    std[k],
                    opt(s.constraint_mse_mean.get(k).copied()),
                    opt(s.constraint_mse_std.get(k).copied())
                );
            }
        }
        out
    }

    /// One row per model with the table columns.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "model,state_mse_mean,state_mse_std,constraint_mse_mean,constraint_mse_std,f_evals_median,stiff\n",
        );
        for m in &self.models {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.id,
                opt(m.state_mse_mean),
                opt(m.state_mse_std),
                opt(m.constraint_mse_mean),
                opt(m.constraint_mse_std),
                m.f_evals_median.map(|v| v.to_string()).unwrap_or_default(),
                m.stiff
            );
        }
        out
    }
}
