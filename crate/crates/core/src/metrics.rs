//! Error statistics over predicted trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, norm2, norm_inf};
use crate::manifold::ConstraintSet;

fn diff_norm(u: &[f64], u_hat: &[f64]) -> Result<f64> {
    if u.len() != u_hat.len() {
        return Err(shape_err("error metric", u.len(), u_hat.len()));
    }
    Ok(u.iter().zip(u_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `‖u - û‖ / ‖u‖`
pub fn relative_error(u: &[f64], u_hat: &[f64]) -> Result<f64> {
    let d = diff_norm(u, u_hat)?;
    let n = norm2(u);
    if n == 0.0 {
        return Err(Error::UndefinedMetric("relative error of a zero reference"));
    }
    Ok(d / n)
}

/// `‖u - û‖ / (‖u‖ + ‖û‖)`, which always lies in `[0, 1]`.
pub fn bounded_relative_error(u: &[f64], u_hat: &[f64]) -> Result<f64> {
    let d = diff_norm(u, u_hat)?;
    let n = norm2(u) + norm2(u_hat);
    if n == 0.0 {
        return Err(Error::UndefinedMetric("bounded relative error of two zero vectors"));
    }
    Ok(d / n)
}

/// Per-state `‖g(u)‖₂²` and `‖g(u)‖∞`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSeries {
    pub squared: Vec<f64>,
    pub max_abs: Vec<f64>,
}

pub fn constraint_error(c: &dyn ConstraintSet, states: &[Vec<f64>]) -> ConstraintSeries {
    let mut out = ConstraintSeries::default();
    for u in states {
        let g = c.residual(u);
        out.squared.push(dot(&g, &g));
        out.max_abs.push(norm_inf(&g));
    }
    out
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Errors of one predicted trajectory against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryErrors {
    pub relative: Vec<f64>,
    pub bounded: Vec<f64>,
    /// `‖g‖₂²` per time; empty when the system has no constraint set.
    pub constraint: Vec<f64>,
    pub squared_error: Vec<f64>,
}

impl TrajectoryErrors {
    pub fn compute(truth: &[Vec<f64>], pred: &[Vec<f64>], c: Option<&dyn ConstraintSet>) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(shape_err("trajectory length", truth.len(), pred.len()));
        }
        let mut out = Self {
            relative: Vec::with_capacity(truth.len()),
            bounded: Vec::with_capacity(truth.len()),
            constraint: Vec::new(),
            squared_error: Vec::with_capacity(truth.len()),
        };
        for (u, v) in truth.iter().zip(pred) {
            out.relative.push(relative_error(u, v)?);
            out.bounded.push(bounded_relative_error(u, v)?);
            let d = diff_norm(u, v)?;
            out.squared_error.push(d * d / u.len() as f64);
        }
        if let Some(c) = c {
            out.constraint = constraint_error(c, pred).squared;
        }
        Ok(out)
    }

    /// Mean over time and entries of the squared state error.
    pub fn state_mse(&self) -> f64 {
        mean_std(&self.squared_error).0
    }

    pub fn constraint_mse(&self) -> Option<f64> {
        (!self.constraint.is_empty()).then(|| mean_std(&self.constraint).0)
    }
}

/// Mean and spread across test trajectories at every saved time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub rel_err_mean: Vec<f64>,
    pub rel_err_std: Vec<f64>,
    pub bounded_err_mean: Vec<f64>,
    pub bounded_err_std: Vec<f64>,
    pub constraint_mse_mean: Vec<f64>,
    pub constraint_mse_std: Vec<f64>,
}

impl ErrorSeries {
    pub fn aggregate(times: &[f64], runs: &[TrajectoryErrors]) -> Result<Self> {
        let mut out = Self {
            times: times.to_vec(),
            ..Self::default()
        };
        for r in runs {
            if r.relative.len() != times.len() {
                return Err(shape_err("error series", times.len(), r.relative.len()));
            }
        }
        let has_constraints = runs.first().is_some_and(|r| !r.constraint.is_empty());
        let column = |k: usize, pick: &dyn Fn(&TrajectoryErrors) -> &Vec<f64>| -> Vec<f64> {
            runs.iter().map(|r| pick(r)[k]).collect()
        };
        for k in 0..times.len() {
            let (m, s) = mean_std(&column(k, &|r| &r.relative));
            out.rel_err_mean.push(m);
            out.rel_err_std.push(s);
            let (m, s) = mean_std(&column(k, &|r| &r.bounded));
            out.bounded_err_mean.push(m);
            out.bounded_err_std.push(s);
            if has_constraints {
                let (m, s) = mean_std(&column(k, &|r| &r.constraint));
                out.constraint_mse_mean.push(m);
                out.constraint_mse_std.push(s);
            }
        }
        Ok(out)
    }
}
