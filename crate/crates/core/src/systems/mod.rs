//! Ground-truth benchmark systems.

pub mod fput;
pub mod grid;
pub mod pendulum;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fput::{FputEnergy, FputSystem};
pub use grid::{GridConfig, GridConstraints, GridSystem};
pub use pendulum::{Coordinates, PendulumConstraints, PendulumSystem};

use crate::error::{Error, Result};
use crate::manifold::ConstraintSet;
use crate::parallel::Parallelism;
use crate::solvers::{adaptive_solve, AdaptiveOptions, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemConfig {
    Fput(FputSystem),
    Pendulum(PendulumSystem),
    Grid(GridConfig),
}

impl SystemConfig {
    pub fn build(&self) -> Result<System> {
        match self {
            SystemConfig::Fput(s) => {
                if s.n < 2 || !(s.mass > 0.0 && s.spring > 0.0) {
                    return Err(Error::Config("fput needs n >= 2 and positive mass and spring".into()));
                }
                Ok(System::Fput(s.clone()))
            }
            SystemConfig::Pendulum(p) => {
                if p.n == 0 {
                    return Err(Error::Config("pendulum needs at least one bob".into()));
                }
                Ok(System::Pendulum(p.clone()))
            }
            SystemConfig::Grid(g) => Ok(System::Grid(Arc::new(GridSystem::build(g.clone())?))),
        }
    }
}

/// A built system, ready to evaluate.
#[derive(Clone, Debug)]
pub enum System {
    Fput(FputSystem),
    Pendulum(PendulumSystem),
    Grid(Arc<GridSystem>),
}

/// Sizes and seeds of a batch of ground-truth trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateSpec {
    pub count: usize,
    /// States per trajectory, including the initial condition.
    pub steps: usize,
    pub dt: f64,
    pub tol: f64,
    pub seed: u64,
    /// Trajectory `i` draws from rng stream `stream + i`.
    pub stream: u64,
}

impl System {
    pub fn tag(&self) -> &'static str {
        match self {
            System::Fput(_) => "fput",
            System::Pendulum(p) => match p.coordinates {
                Coordinates::Generalized => "pendulum",
                Coordinates::Cartesian => "pendulum_cartesian",
            },
            System::Grid(_) => "grid",
        }
    }

    pub fn config(&self) -> SystemConfig {
        match self {
            System::Fput(s) => SystemConfig::Fput(s.clone()),
            System::Pendulum(p) => SystemConfig::Pendulum(p.clone()),
            System::Grid(g) => SystemConfig::Grid(g.config.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            System::Fput(s) => s.dim(),
            System::Pendulum(p) => p.dim(),
            System::Grid(g) => g.dim(),
        }
    }

    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            System::Fput(s) => s.rhs(u),
            System::Pendulum(p) => p.rhs(u),
            System::Grid(g) => g.rhs(u),
        }
    }

    /// Constraint set that trajectories from `u0` live on. Energy levels
    /// depend on `u0`; generalized pendulum coordinates have none.
    pub fn constraints_for(&self, u0: &[f64]) -> Result<Option<Arc<dyn ConstraintSet>>> {
        Ok(match self {
            System::Fput(s) => Some(Arc::new(s.constraint(u0)?)),
            System::Pendulum(p) => match p.coordinates {
                Coordinates::Generalized => None,
                Coordinates::Cartesian => Some(Arc::new(p.constraints())),
            },
            System::Grid(g) => Some(Arc::new(g.constraints().clone())),
        })
    }

    /// Whether [`constraints_for`](Self::constraints_for) depends on the
    /// initial condition.
    pub fn constraints_depend_on_state(&self) -> bool {
        matches!(self, System::Fput(_))
    }

    /// Initial condition for trajectory stream `stream` of `seed`.
    pub fn sample_initial(&self, seed: u64, stream: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match self {
            System::Fput(s) => Ok(s.sample_initial(&mut rng)),
            System::Pendulum(p) => Ok(p.sample_initial(&mut rng)),
            System::Grid(g) => g.sample_initial(&mut rng),
        }
    }

    fn trajectory(&self, spec: &GenerateSpec, index: usize) -> Result<Trajectory> {
        let u0 = self.sample_initial(spec.seed, spec.stream + index as u64)?;
        let t_end = (spec.steps - 1) as f64 * spec.dt;
        let opts = AdaptiveOptions::new(spec.tol, spec.dt);
        let mut traj = match self {
            // Integrate in angles, where the arm constraints hold by construction.
            System::Pendulum(p) if p.coordinates == Coordinates::Cartesian => {
                let g = p.generalized_from_cartesian(&u0);
                let f = |u: &[f64]| p.rhs_generalized(u);
                let mut t = adaptive_solve(&f, &g, (0.0, t_end), &opts)?;
                t.states = t.states.iter().map(|s| p.cartesian_from_generalized(s)).collect();
                t
            }
            _ => adaptive_solve(&|u: &[f64]| self.rhs(u), &u0, (0.0, t_end), &opts)?,
        };
        if traj.states.len() != spec.steps {
            return Err(Error::Numeric(format!(
                "trajectory {index} has {} saved states, expected {}",
                traj.states.len(),
                spec.steps
            )));
        }
        traj.states[0] = u0;
        Ok(traj)
    }

    /// Integrate `spec.count` trajectories from sampled initial conditions.
    pub fn generate(&self, spec: &GenerateSpec, par: Parallelism) -> Result<Vec<Trajectory>> {
        if spec.steps < 2 || !(spec.dt > 0.0) || !(spec.tol > 0.0) {
            return Err(Error::Config("generation needs steps >= 2 and positive dt and tolerance".into()));
        }
        let idx: Vec<usize> = (0..spec.count).collect();
        par.map(&idx, |_, &i| self.trajectory(spec, i)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_inf;

    #[test]
    fn config_round_trips_through_toml() {
        for cfg in [
            SystemConfig::Fput(FputSystem::new(8)),
            SystemConfig::Pendulum(PendulumSystem::new(2, Coordinates::Cartesian)),
            SystemConfig::Grid(GridConfig::default()),
        ] {
            let text = toml::to_string(&cfg).unwrap();
            let back: SystemConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn generation_is_deterministic_and_parallel_safe() {
        let sys = SystemConfig::Pendulum(PendulumSystem::new(2, Coordinates::Generalized))
            .build()
            .unwrap();
        let spec = GenerateSpec {
            count: 4,
            steps: 11,
            dt: 0.1,
            tol: 1e-10,
            seed: 3,
            stream: 0,
        };
        let a = sys.generate(&spec, Parallelism::Auto).unwrap();
        let b = sys.generate(&spec, Parallelism::Sequential).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].states[0], a[1].states[0]);
        assert!(a.iter().all(|t| t.states.len() == 11));
    }

    #[test]
    fn cartesian_pendulum_data_stays_on_manifold() {
        let sys = SystemConfig::Pendulum(PendulumSystem::new(3, Coordinates::Cartesian))
            .build()
            .unwrap();
        let spec = GenerateSpec {
            count: 3,
            steps: 51,
            dt: 0.1,
            tol: 1e-10,
            seed: 5,
            stream: 100,
        };
        let c = sys.constraints_for(&[0.0; 12]).unwrap().unwrap();
        for t in sys.generate(&spec, Parallelism::Auto).unwrap() {
            for u in &t.states {
                assert!(norm_inf(&c.residual(u)) <= 1e-8);
            }
        }
    }

    #[test]
    fn fput_data_conserves_energy() {
        let sys = SystemConfig::Fput(FputSystem::new(8)).build().unwrap();
        let spec = GenerateSpec {
            count: 2,
            steps: 41,
            dt: 0.25,
            tol: 1e-10,
            seed: 6,
            stream: 0,
        };
        for t in sys.generate(&spec, Parallelism::Auto).unwrap() {
            let c = sys.constraints_for(&t.states[0]).unwrap().unwrap();
            let System::Fput(s) = &sys else { unreachable!() };
            let e0 = s.energy(&t.states[0]);
            for u in &t.states {
                assert!(c.residual(u)[0].abs() <= 1e-7 * e0.abs());
            }
        }
    }
}
