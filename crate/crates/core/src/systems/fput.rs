//! Periodic Fermi-Pasta-Ulam-Tsingou chain with a quadratic force term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::manifold::ConstraintSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FputSystem {
    pub n: usize,
    pub mass: f64,
    pub spring: f64,
    pub alpha: f64,
}

impl Default for FputSystem {
    fn default() -> Self {
        Self {
            n: 8,
            mass: 1.0,
            spring: 1.0,
            alpha: 0.25,
        }
    }
}

impl FputSystem {
    pub fn new(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(shape_err("fput state", self.dim(), u.len()));
        }
        Ok(())
    }

    /// `x_{j+1} - x_j` with periodic wraparound.
    fn stretch(&self, x: &[f64], j: usize) -> f64 {
        x[(j + 1) % self.n] - x[j]
    }

    /// Force of one spring as a function of its stretch.
    fn spring_force(&self, d: f64) -> f64 {
        self.spring * d * (1.0 + self.alpha * d)
    }

    fn spring_stiffness(&self, d: f64) -> f64 {
        self.spring * (1.0 + 2.0 * self.alpha * d)
    }

    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let n = self.n;
        let (x, v) = u.split_at(n);
        let mut out = Vec::with_capacity(2 * n);
        out.extend_from_slice(v);
        for j in 0..n {
            let next = x[(j + 1) % n];
            let prev = x[(j + n - 1) % n];
            let acc = self.spring / self.mass * (next + prev - 2.0 * x[j]) * (1.0 + self.alpha * (next - prev));
            out.push(acc);
        }
        Ok(out)
    }

    /// Total energy. The cubic coefficient `kα/3` makes this the exact
    /// invariant of [`rhs`](Self::rhs) for any spring constant.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let n = self.n;
        let (x, v) = u.split_at(n);
        let mut e = 0.0;
        for j in 0..n {
            let d = self.stretch(x, j);
            e += 0.5 * self.mass * v[j] * v[j] + 0.5 * self.spring * d * d + self.spring * self.alpha / 3.0 * d * d * d;
        }
        e
    }

    pub fn energy_gradient(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let (x, v) = u.split_at(n);
        let mut out = vec![0.0; 2 * n];
        for j in 0..n {
            let f = self.spring_force(self.stretch(x, j));
            out[(j + 1) % n] += f;
            out[j] -= f;
            out[n + j] = self.mass * v[j];
        }
        out
    }

    /// Hessian of the energy applied to `w`.
    pub fn energy_hessian_apply(&self, u: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let x = &u[..n];
        let mut out = vec![0.0; 2 * n];
        for j in 0..n {
            let s = self.spring_stiffness(self.stretch(x, j)) * self.stretch(w, j);
            out[(j + 1) % n] += s;
            out[j] -= s;
            out[n + j] = self.mass * w[n + j];
        }
        out
    }

    /// Energy level set through `u0`.
    pub fn constraint(&self, u0: &[f64]) -> Result<FputEnergy> {
        self.check(u0)?;
        Ok(FputEnergy {
            system: self.clone(),
            e0: self.energy(u0),
        })
    }

    /// Gaussian bump `exp(-(x - μ)²/σ²)` on the sites `j/N`, released from rest.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mu = 0.5;
        let sigma: f64 = rng.random_range(0.1..0.3);
        let mut u = vec![0.0; 2 * self.n];
        for (j, x) in u[..self.n].iter_mut().enumerate() {
            let s = j as f64 / self.n as f64;
            *x = (-(s - mu).powi(2) / (sigma * sigma)).exp();
        }
        u
    }
}

/// `g(u) = E(u) - E₀`.
#[derive(Clone, Debug)]
pub struct FputEnergy {
    pub system: FputSystem,
    pub e0: f64,
}

impl ConstraintSet for FputEnergy {
    fn ambient_dim(&self) -> usize {
        self.system.dim()
    }

    fn constraint_count(&self) -> usize {
        1
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        vec![self.system.energy(u) - self.e0]
    }

    fn jacobian(&self, u: &[f64]) -> Matrix {
        Matrix::from_raw(1, self.system.dim(), self.system.energy_gradient(u))
    }

    fn jacobian_derivative(&self, u: &[f64], w: &[f64]) -> Matrix {
        Matrix::from_raw(1, self.system.dim(), self.system.energy_hessian_apply(u, w))
    }
}
