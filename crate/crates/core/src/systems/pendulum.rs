//! Planar chain of `N` unit-mass, unit-length pendulums with friction
//! between neighbouring arms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::manifold::ConstraintSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    /// `(θ, θ̇) ∈ ℝ^{2N}`
    #[default]
    Generalized,
    /// `(q, q̇) ∈ ℝ^{4N}`, with `q_i = (x_i, y_i)` interleaved.
    Cartesian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumSystem {
    pub n: usize,
    pub damping: f64,
    pub gravity: f64,
    pub coordinates: Coordinates,
}

impl Default for PendulumSystem {
    fn default() -> Self {
        Self::new(2, Coordinates::Generalized)
    }
}

impl PendulumSystem {
    pub fn new(n: usize, coordinates: Coordinates) -> Self {
        Self {
            n,
            damping: 0.1,
            gravity: 9.81,
            coordinates,
        }
    }

    pub fn dim(&self) -> usize {
        match self.coordinates {
            Coordinates::Generalized => 2 * self.n,
            Coordinates::Cartesian => 4 * self.n,
        }
    }

    /// `a(i, j) = N - max(i, j) + 1` with 1-based indices, i.e. the number
    /// of bobs hanging below both arms.
    fn weight(&self, i: usize, j: usize) -> f64 {
        (self.n - i.max(j)) as f64
    }

    pub fn mass_matrix(&self, theta: &[f64]) -> Matrix {
        let n = self.n;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, self.weight(i, j) * (theta[i] - theta[j]).cos());
            }
        }
        a
    }

    /// Generalized forces: Coriolis, relative friction and gravity.
    pub fn forcing(&self, theta: &[f64], omega: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let coriolis: f64 = (0..n)
                    .map(|j| self.weight(i, j) * omega[j] * omega[j] * (theta[i] - theta[j]).sin())
                    .sum();
                let prev = if i == 0 { 0.0 } else { omega[i - 1] };
                -coriolis - self.damping * (omega[i] - prev) - (n - i) as f64 * self.gravity * theta[i].sin()
            })
            .collect()
    }

    /// Right-hand side in generalized coordinates.
    pub fn rhs_generalized(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != 2 * self.n {
            return Err(shape_err("pendulum state", 2 * self.n, u.len()));
        }
        let (theta, omega) = u.split_at(self.n);
        let a = self.mass_matrix(theta);
        let r = self.forcing(theta, omega);
        let acc = Cholesky::factor(&a)?.solve_vec(&r)?;
        let mut out = omega.to_vec();
        out.extend(acc);
        Ok(out)
    }

    /// Right-hand side in the configured coordinates. Cartesian states are
    /// read back into angles, so this is only meaningful on the manifold.
    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self.coordinates {
            Coordinates::Generalized => self.rhs_generalized(u),
            Coordinates::Cartesian => {
                if u.len() != 4 * self.n {
                    return Err(shape_err("pendulum state", 4 * self.n, u.len()));
                }
                let g = self.generalized_from_cartesian(u);
                let f = self.rhs_generalized(&g)?;
                Ok(self.cartesian_velocity(&g, &f[self.n..]))
            }
        }
    }

    /// Kinetic plus potential energy in generalized coordinates.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let (theta, omega) = u.split_at(self.n);
        let a = self.mass_matrix(theta);
        let av = a.matvec(omega).expect("square mass matrix");
        let kinetic: f64 = 0.5 * omega.iter().zip(&av).map(|(w, x)| w * x).sum::<f64>();
        let potential: f64 = -self.gravity * (0..self.n).map(|i| (self.n - i) as f64 * theta[i].cos()).sum::<f64>();
        kinetic + potential
    }

    pub fn cartesian_from_generalized(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let (theta, omega) = u.split_at(n);
        let mut out = vec![0.0; 4 * n];
        let (mut x, mut y, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (s, c) = theta[i].sin_cos();
            x += s;
            y -= c;
            vx += omega[i] * c;
            vy += omega[i] * s;
            out[2 * i] = x;
            out[2 * i + 1] = y;
            out[2 * n + 2 * i] = vx;
            out[2 * n + 2 * i + 1] = vy;
        }
        out
    }

    /// Inverse of [`cartesian_from_generalized`](Self::cartesian_from_generalized)
    /// on the manifold; angles come back in `(-π, π]`.
    pub fn generalized_from_cartesian(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let (px, py, pvx, pvy) = if i == 0 {
                (0.0, 0.0, 0.0, 0.0)
            } else {
                (u[2 * i - 2], u[2 * i - 1], u[2 * n + 2 * i - 2], u[2 * n + 2 * i - 1])
            };
            let dx = u[2 * i] - px;
            let dy = u[2 * i + 1] - py;
            let dvx = u[2 * n + 2 * i] - pvx;
            let dvy = u[2 * n + 2 * i + 1] - pvy;
            let theta = dx.atan2(-dy);
            let (s, c) = theta.sin_cos();
            out[i] = theta;
            out[n + i] = dvx * c + dvy * s;
        }
        out
    }

    /// Time derivative of the Cartesian state given angles, angular
    /// velocities and angular accelerations.
    fn cartesian_velocity(&self, g: &[f64], alpha: &[f64]) -> Vec<f64> {
        let n = self.n;
        let (theta, omega) = g.split_at(n);
        let mut out = vec![0.0; 4 * n];
        let (mut vx, mut vy, mut ax, mut ay) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (s, c) = theta[i].sin_cos();
            vx += omega[i] * c;
            vy += omega[i] * s;
            ax += alpha[i] * c - omega[i] * omega[i] * s;
            ay += alpha[i] * s + omega[i] * omega[i] * c;
            out[2 * i] = vx;
            out[2 * i + 1] = vy;
            out[2 * n + 2 * i] = ax;
            out[2 * n + 2 * i + 1] = ay;
        }
        out
    }

    pub fn constraints(&self) -> PendulumConstraints {
        PendulumConstraints { n: self.n }
    }

    /// Angles uniform on `[0, 2π)`, angular velocities uniform on `[-1, 1)`,
    /// returned in the configured coordinates.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let g = self.sample_generalized(rng);
        match self.coordinates {
            Coordinates::Generalized => g,
            Coordinates::Cartesian => self.cartesian_from_generalized(&g),
        }
    }

    pub fn sample_generalized<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = Vec::with_capacity(2 * self.n);
        for _ in 0..self.n {
            u.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        for _ in 0..self.n {
            u.push(rng.random_range(-1.0..1.0));
        }
        u
    }
}

/// Arm-length and conjugate velocity constraints in Cartesian coordinates:
/// `‖q_i - q_{i-1}‖² - 1` for each arm, then `(q_i - q_{i-1})·(q̇_i - q̇_{i-1})`.
#[derive(Clone, Debug)]
pub struct PendulumConstraints {
    pub n: usize,
}

impl PendulumConstraints {
    fn diffs(&self, u: &[f64], i: usize) -> ([f64; 2], [f64; 2]) {
        let n = self.n;
        let q = |k: usize| [u[2 * k], u[2 * k + 1]];
        let v = |k: usize| [u[2 * n + 2 * k], u[2 * n + 2 * k + 1]];
        if i == 0 {
            (q(0), v(0))
        } else {
            let (a, b, c, d) = (q(i), q(i - 1), v(i), v(i - 1));
            ([a[0] - b[0], a[1] - b[1]], [c[0] - d[0], c[1] - d[1]])
        }
    }
}

impl ConstraintSet for PendulumConstraints {
    fn ambient_dim(&self) -> usize {
        4 * self.n
    }

    fn constraint_count(&self) -> usize {
        2 * self.n
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n];
        for i in 0..self.n {
            let (dq, dv) = self.diffs(u, i);
            out[i] = dq[0] * dq[0] + dq[1] * dq[1] - 1.0;
            out[self.n + i] = dq[0] * dv[0] + dq[1] * dv[1];
        }
        out
    }

    fn jacobian(&self, u: &[f64]) -> Matrix {
        let n = self.n;
        let mut jac = Matrix::zeros(2 * n, 4 * n);
        for i in 0..n {
            let (dq, dv) = self.diffs(u, i);
            for c in 0..2 {
                jac.set(i, 2 * i + c, 2.0 * dq[c]);
                jac.set(n + i, 2 * i + c, dv[c]);
                jac.set(n + i, 2 * n + 2 * i + c, dq[c]);
                if i > 0 {
                    jac.set(i, 2 * (i - 1) + c, -2.0 * dq[c]);
                    jac.set(n + i, 2 * (i - 1) + c, -dv[c]);
                    jac.set(n + i, 2 * n + 2 * (i - 1) + c, -dq[c]);
                }
            }
        }
        jac
    }

    // Every constraint is a quadratic form plus a constant, so the
    // Jacobian is linear in the state.
    fn jacobian_derivative(&self, _u: &[f64], w: &[f64]) -> Matrix {
        self.jacobian(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::fd_jacobian;
    use crate::solvers::{adaptive_solve, AdaptiveOptions};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn gen(n: usize) -> PendulumSystem {
        PendulumSystem::new(n, Coordinates::Generalized)
    }

    /// Mass-matrix solve through nalgebra's LU, written from the equations
    /// of motion without touching the code under test.
    fn lu_accelerations(n: usize, b: f64, u: &[f64]) -> Vec<f64> {
        let a = |i: usize, j: usize| (n - i.max(j)) as f64;
        let (th, om) = u.split_at(n);
        let m = DMatrix::from_fn(n, n, |i, j| a(i, j) * (th[i] - th[j]).cos());
        let r = DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                s -= a(i, j) * om[j].powi(2) * (th[i] - th[j]).sin();
            }
            let prev = if i == 0 { 0.0 } else { om[i - 1] };
            s - b * (om[i] - prev) - (n - i) as f64 * 9.81 * th[i].sin()
        });
        m.lu().solve(&r).unwrap().iter().copied().collect()
    }

    #[test]
    fn rhs_examples() {
        let s = PendulumSystem {
            damping: 0.0,
            ..gen(1)
        };
        let out = s.rhs(&[FRAC_PI_2, 0.0]).unwrap();
        assert_abs_diff_eq!(out[1], -9.81, epsilon = 1e-14);
        for n in 1..=4 {
            let out = gen(n).rhs(&vec![0.0; 2 * n]).unwrap();
            assert!(out.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rhs_matches_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=4 {
            let s = gen(n);
            for _ in 0..50 {
                let u = s.sample_generalized(&mut rng);
                let out = s.rhs(&u).unwrap();
                let acc = lu_accelerations(n, 0.1, &u);
                for i in 0..n {
                    assert_eq!(out[i], u[n + i]);
                    assert!((out[n + i] - acc[i]).abs() <= 1e-9 * (1.0 + acc[i].abs()));
                }
            }
        }
    }

    #[test]
    fn damping_dissipates_energy() {
        let s = gen(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u0 = s.sample_generalized(&mut rng);
        let opts = AdaptiveOptions::new(1e-10, 0.05);
        let traj = adaptive_solve(&|u: &[f64]| s.rhs(u), &u0, (0.0, 5.0), &opts).unwrap();
        let energies: Vec<f64> = traj.states.iter().map(|u| s.energy(u)).collect();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
        assert!(energies.last().unwrap() < &energies[0]);
    }

    #[test]
    fn cartesian_map_examples() {
        let s = gen(3);
        let q = s.cartesian_from_generalized(&[0.0; 6]);
        assert_eq!(q, vec![0.0, -1.0, 0.0, -2.0, 0.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = gen(1).cartesian_from_generalized(&[FRAC_PI_2, 0.0]);
        assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mapped_states_satisfy_constraints_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in 1..=4 {
            let s = gen(n);
            let c = s.constraints();
            for _ in 0..50 {
                let u = s.sample_generalized(&mut rng);
                let q = s.cartesian_from_generalized(&u);
                assert!(c.residual(&q).iter().all(|r| r.abs() <= 1e-12));
                let back = s.generalized_from_cartesian(&q);
                let again = s.cartesian_from_generalized(&back);
                for (a, b) in q.iter().zip(&again) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn constraint_examples() {
        let c = gen(3).constraints();
        assert!(c.residual(&gen(3).cartesian_from_generalized(&[0.0; 6])).iter().all(|&r| r == 0.0));
        let c1 = PendulumConstraints { n: 1 };
        let r = c1.residual(&[0.6, -0.8, 0.8, 0.6]);
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 0.0, epsilon = 1e-15);
        assert_eq!(c.constraint_count(), 6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for n in [1, 2, 3] {
            let c = PendulumConstraints { n };
            for _ in 0..100 {
                let u: Vec<f64> = (0..4 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fd = fd_jacobian(&c, &u, 1e-6);
                for (a, b) in c.jacobian(&u).as_slice().iter().zip(fd.as_slice()) {
                    assert!((a - b).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn cartesian_rhs_is_derivative_of_mapped_flow() {
        let g = gen(2);
        let c = PendulumSystem::new(2, Coordinates::Cartesian);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let u = g.sample_generalized(&mut rng);
            let f = g.rhs(&u).unwrap();
            let h = 1e-6;
            let up: Vec<f64> = u.iter().zip(&f).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(&f).map(|(a, b)| a - h * b).collect();
            let (qp, qm) = (g.cartesian_from_generalized(&up), g.cartesian_from_generalized(&um));
            let out = c.rhs(&g.cartesian_from_generalized(&u)).unwrap();
            for k in 0..8 {
                let fd = (qp[k] - qm[k]) / (2.0 * h);
                assert!((out[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {} vs {fd}", out[k]);
            }
        }
    }
}
