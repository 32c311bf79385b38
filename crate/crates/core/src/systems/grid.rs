//! Small AC power grid with PQ-bus power constraints and a relaxation field
//! towards a fixed operation point.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::{axpy, norm2, Matrix};
use crate::manifold::{newton_retract, project_tangent, ConstraintSet, ProjectionWorkspace};

/// Configuration of a ring network. The admittance Laplacian, setpoints and
/// operation point are derived from it by [`GridSystem::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub n: usize,
    pub pq_buses: Vec<usize>,
    /// Line admittance as `(re, im)`.
    pub line_admittance: (f64, f64),
    pub kappa: f64,
    pub omega: f64,
    pub noise: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n: 6,
            pq_buses: vec![1, 3, 5],
            line_admittance: (1.0, -5.0),
            kappa: 1.0,
            omega: 2.0,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridSystem {
    pub config: GridConfig,
    laplacian: Vec<Complex64>,
    constraints: GridConstraints,
    u_star: Vec<f64>,
}

/// `P_j - Re(v_j i_j*)` and `Q_j - Im(v_j i_j*)` for every PQ bus `j`, with
/// `i = LY v` and the state laid out as `(Re v₁, Im v₁, …)`.
#[derive(Clone, Debug)]
pub struct GridConstraints {
    n: usize,
    laplacian: Vec<Complex64>,
    pq_buses: Vec<usize>,
    setpoints: Vec<Complex64>,
}

fn voltages(u: &[f64]) -> Vec<Complex64> {
    u.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

impl GridConstraints {
    fn current(&self, v: &[Complex64], j: usize) -> Complex64 {
        (0..self.n).map(|k| self.laplacian[j * self.n + k] * v[k]).sum()
    }

    /// Complex power `v_j i_j*` injected at every bus.
    pub fn power(&self, u: &[f64]) -> Vec<Complex64> {
        let v = voltages(u);
        (0..self.n).map(|j| v[j] * self.current(&v, j).conj()).collect()
    }

    pub fn setpoints(&self) -> &[Complex64] {
        &self.setpoints
    }
}

/// Residual pair `(P - Re s, Q - Im s)` of a bus with voltage `v`, current
/// `i` and setpoint `P + iQ`.
pub fn power_residual(setpoint: Complex64, v: Complex64, i: Complex64) -> [f64; 2] {
    let s = v * i.conj();
    [setpoint.re - s.re, setpoint.im - s.im]
}

impl ConstraintSet for GridConstraints {
    fn ambient_dim(&self) -> usize {
        2 * self.n
    }

    fn constraint_count(&self) -> usize {
        2 * self.pq_buses.len()
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let v = voltages(u);
        let mut out = Vec::with_capacity(self.constraint_count());
        for (&j, &sp) in self.pq_buses.iter().zip(&self.setpoints) {
            out.extend(power_residual(sp, v[j], self.current(&v, j)));
        }
        out
    }

    fn jacobian(&self, u: &[f64]) -> Matrix {
        let n = self.n;
        let v = voltages(u);
        let mut jac = Matrix::zeros(self.constraint_count(), 2 * n);
        for (r, &j) in self.pq_buses.iter().enumerate() {
            let ij = self.current(&v, j).conj();
            for k in 0..n {
                let lc = self.laplacian[j * n + k].conj();
                let mut d_re = v[j] * lc;
                let mut d_im = -Complex64::i() * v[j] * lc;
                if k == j {
                    d_re += ij;
                    d_im += Complex64::i() * ij;
                }
                jac.set(2 * r, 2 * k, -d_re.re);
                jac.set(2 * r, 2 * k + 1, -d_im.re);
                jac.set(2 * r + 1, 2 * k, -d_re.im);
                jac.set(2 * r + 1, 2 * k + 1, -d_im.im);
            }
        }
        jac
    }

    // Power is a real quadratic form in the state.
    fn jacobian_derivative(&self, _u: &[f64], w: &[f64]) -> Matrix {
        self.jacobian(w)
    }
}

impl GridSystem {
    pub fn build(config: GridConfig) -> Result<Self> {
        let n = config.n;
        if n < 3 {
            return Err(crate::Error::Config(format!("grid needs at least 3 buses, got {n}")));
        }
        if config.pq_buses.is_empty() || config.pq_buses.len() >= n {
            return Err(crate::Error::Config(format!(
                "grid needs between 1 and {} PQ buses, got {}",
                n - 1,
                config.pq_buses.len()
            )));
        }
        let mut seen = vec![false; n];
        for &j in &config.pq_buses {
            if j >= n || seen[j] {
                return Err(crate::Error::Config(format!("invalid PQ bus index {j}")));
            }
            seen[j] = true;
        }
        let y = Complex64::new(config.line_admittance.0, config.line_admittance.1);
        let mut laplacian = vec![Complex64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let k = (j + 1) % n;
            laplacian[j * n + j] += y;
            laplacian[k * n + k] += y;
            laplacian[j * n + k] -= y;
            laplacian[k * n + j] -= y;
        }

        // Operation point: magnitudes and angles vary smoothly around the ring.
        let mut u_star = Vec::with_capacity(2 * n);
        for j in 0..n {
            let phase = 0.1 * (j as f64).sin();
            let mag = 1.0 + 0.03 * (2.0 * j as f64).cos();
            let v = Complex64::from_polar(mag, phase);
            u_star.push(v.re);
            u_star.push(v.im);
        }
        let mut constraints = GridConstraints {
            n,
            laplacian: laplacian.clone(),
            pq_buses: config.pq_buses.clone(),
            setpoints: Vec::new(),
        };
        let power = constraints.power(&u_star);
        constraints.setpoints = config.pq_buses.iter().map(|&j| power[j]).collect();

        Ok(Self {
            config,
            laplacian,
            constraints,
            u_star,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.config.n
    }

    pub fn laplacian(&self) -> &[Complex64] {
        &self.laplacian
    }

    pub fn operation_point(&self) -> &[f64] {
        &self.u_star
    }

    pub fn constraints(&self) -> &GridConstraints {
        &self.constraints
    }

    /// Projection of `-κ (u - u*) + ω J (u - u*)`, `J` rotating every bus
    /// voltage by 90°.
    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim() {
            return Err(shape_err("grid state", self.dim(), u.len()));
        }
        let (kappa, omega) = (self.config.kappa, self.config.omega);
        let mut raw = vec![0.0; u.len()];
        for b in 0..self.config.n {
            let dr = u[2 * b] - self.u_star[2 * b];
            let di = u[2 * b + 1] - self.u_star[2 * b + 1];
            raw[2 * b] = -kappa * dr - omega * di;
            raw[2 * b + 1] = -kappa * di + omega * dr;
        }
        project_tangent(&self.constraints, u, &raw)
    }

    /// Operation point plus tangent noise of norm `noise`, retracted back
    /// onto the constraint set.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let xi: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut ws = ProjectionWorkspace::at(&self.constraints, &self.u_star)?;
        let t = ws.project(&xi)?;
        let scale = self.config.noise / norm2(&t);
        let mut u = self.u_star.clone();
        axpy(scale, &t, &mut u);
        newton_retract(&self.constraints, &u, 1e-12, 50)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_inf;
    use crate::manifold::fd_jacobian;
    use crate::solvers::{adaptive_solve, AdaptiveOptions};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSystem {
        GridSystem::build(GridConfig::default()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let one = Complex64::new(1.0, 0.0);
        assert_eq!(power_residual(Complex64::new(1.0, 0.0), one, one), [0.0, 0.0]);
        let r = power_residual(Complex64::new(0.7, 0.4), Complex64::new(1.0, 1.0), Complex64::new(1.0, -1.0));
        assert_abs_diff_eq!(r[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 0.4 - 2.0, epsilon = 1e-15);
    }

    #[test]
    fn laplacian_structure() {
        let g = grid();
        let n = g.config.n;
        let l = g.laplacian();
        for j in 0..n {
            let row: Complex64 = (0..n).map(|k| l[j * n + k]).sum();
            assert!(row.norm() <= 1e-15);
            for k in 0..n {
                assert_eq!(l[j * n + k], l[k * n + j]);
            }
        }
    }

    #[test]
    fn operation_point_is_feasible_equilibrium() {
        let g = grid();
        let c = g.constraints();
        assert!(norm_inf(&c.residual(g.operation_point())) <= 1e-10);
        assert_eq!(c.constraint_count(), 6);
        assert!(g.rhs(g.operation_point()).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let g = grid();
        let c = g.constraints();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let u: Vec<f64> = (0..12).map(|_| rng.random_range(-1.5..1.5)).collect();
            let fd = fd_jacobian(c, &u, 1e-6);
            for (a, b) in c.jacobian(&u).as_slice().iter().zip(fd.as_slice()) {
                assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn samples_lie_on_manifold() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let u = g.sample_initial(&mut rng).unwrap();
            assert!(norm_inf(&g.constraints().residual(&u)) <= 1e-12);
            let f = g.rhs(&u).unwrap();
            let dg = g.constraints().jacobian(&u).matvec(&f).unwrap();
            assert!(norm_inf(&dg) <= 1e-10);
        }
    }

    #[test]
    fn trajectories_relax_and_stay_feasible() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let opts = AdaptiveOptions::new(1e-10, 0.5);
        for _ in 0..5 {
            let u0 = g.sample_initial(&mut rng).unwrap();
            let traj = adaptive_solve(&|u: &[f64]| g.rhs(u), &u0, (0.0, 10.0), &opts).unwrap();
            for u in &traj.states {
                assert!(norm_inf(&g.constraints().residual(u)) <= 1e-9);
            }
            let dist = |u: &[f64]| norm2(&crate::linalg::sub(u, g.operation_point()));
            assert!(dist(traj.last_state().unwrap()) < dist(&u0));
        }
    }
}
