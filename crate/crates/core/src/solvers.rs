//! Time integrators.
//!
//! Training differentiates through fixed-step RK4 recorded on a [`Tape`].
//! Evaluation uses the adaptive Dormand-Prince 5(4) pair with FSAL reuse,
//! PI step control, and a continuous extension for the save grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::tape::{NodeId, Tape};

/// Function-evaluation accounting of one adaptive solve.
///
/// For the FSAL 5(4) pair, `f_evals = 1 + 6 (accepted + rejected)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub f_evals: u64,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
}

impl fmt::Display for SolveStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} evals, {} accepted, {} rejected",
            self.f_evals, self.steps_accepted, self.steps_rejected
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }
}

fn check_finite(v: &[f64], step: usize, stage: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step, stage })
    }
}

fn offset(u: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    let mut out = u.to_vec();
    axpy(h, k, &mut out);
    out
}

/// One classic RK4 step.
pub fn rk4_step<F>(f: &F, u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    rk4_step_indexed(f, u, dt, 0)
}

fn rk4_step_indexed<F>(f: &F, u: &[f64], dt: f64, step: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("rk4 step size must be positive, got {dt}")));
    }
    let k1 = f(u)?;
    check_finite(&k1, step, 1)?;
    let k2 = f(&offset(u, 0.5 * dt, &k1))?;
    check_finite(&k2, step, 2)?;
    let k3 = f(&offset(u, 0.5 * dt, &k2))?;
    check_finite(&k3, step, 3)?;
    let k4 = f(&offset(u, dt, &k3))?;
    check_finite(&k4, step, 4)?;
    // Same accumulation order as the taped step, so both agree bitwise.
    let mut out = u.to_vec();
    axpy(dt / 6.0, &k1, &mut out);
    axpy(dt / 3.0, &k2, &mut out);
    axpy(dt / 3.0, &k3, &mut out);
    axpy(dt / 6.0, &k4, &mut out);
    Ok(out)
}

/// `n_steps` chained RK4 steps; returns the states after each step.
pub fn solve_segment<F>(f: &F, u0: &[f64], n_steps: usize, dt: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Contract("segment needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(n_steps);
    let mut u = u0.to_vec();
    for step in 0..n_steps {
        u = rk4_step_indexed(f, &u, dt, step)?;
        out.push(u.clone());
    }
    Ok(out)
}

/// RK4 step recorded on a tape. `f` records the field at a node.
pub fn rk4_step_taped<F>(tape: &mut Tape, f: &F, u: NodeId, dt: f64) -> Result<NodeId>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId> + ?Sized,
{
    rk4_step_taped_indexed(tape, f, u, dt, 0)
}

fn rk4_step_taped_indexed<F>(tape: &mut Tape, f: &F, u: NodeId, dt: f64, step: usize) -> Result<NodeId>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId> + ?Sized,
{
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("rk4 step size must be positive, got {dt}")));
    }
    let k1 = f(tape, u)?;
    check_finite(tape.value(k1).as_slice(), step, 1)?;
    let u2 = tape.lin_comb(&[(u, 1.0), (k1, 0.5 * dt)])?;
    let k2 = f(tape, u2)?;
    check_finite(tape.value(k2).as_slice(), step, 2)?;
    let u3 = tape.lin_comb(&[(u, 1.0), (k2, 0.5 * dt)])?;
    let k3 = f(tape, u3)?;
    check_finite(tape.value(k3).as_slice(), step, 3)?;
    let u4 = tape.lin_comb(&[(u, 1.0), (k3, dt)])?;
    let k4 = f(tape, u4)?;
    check_finite(tape.value(k4).as_slice(), step, 4)?;
    tape.lin_comb(&[(u, 1.0), (k1, dt / 6.0), (k2, dt / 3.0), (k3, dt / 3.0), (k4, dt / 6.0)])
}

/// [`solve_segment`] on a tape; returns the node of each successive state.
pub fn solve_segment_taped<F>(tape: &mut Tape, f: &F, u0: NodeId, n_steps: usize, dt: f64) -> Result<Vec<NodeId>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId> + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Contract("segment needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(n_steps);
    let mut u = u0;
    for step in 0..n_steps {
        u = rk4_step_taped_indexed(tape, f, u, dt, step)?;
        out.push(u);
    }
    Ok(out)
}

/// Settings of [`adaptive_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Spacing of the output grid.
    pub save_dt: f64,
    pub max_steps: u64,
}

impl AdaptiveOptions {
    pub fn new(tol: f64, save_dt: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            save_dt,
            max_steps: 200_000,
        }
    }
}

const SAFETY: f64 = 0.9;
const GROW_MAX: f64 = 5.0;
const SHRINK_MIN: f64 = 0.2;
const PI_BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - PI_BETA * 0.75;
const UNDERFLOW: f64 = 1e-14;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Continuous extension.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

fn scaled_rms(v: &[f64], y: &[f64], atol: f64, rtol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(vi, yi)| (vi / (atol + rtol * yi.abs())).powi(2))
        .sum();
    (s / v.len().max(1) as f64).sqrt()
}

/// Integrate `u' = f(u)` over `t_span` with Dormand-Prince 5(4).
///
/// States are reported on the grid `t0, t0 + save_dt, ...` up to `t1`
/// through the 4th-order continuous extension. A step size below
/// `1e-14 · span` (or exhausting `max_steps`) is reported as
/// [`Error::Stiffness`] together with the stats gathered so far.
pub fn adaptive_solve<F>(f: &F, u0: &[f64], t_span: (f64, f64), opts: &AdaptiveOptions) -> Result<Trajectory>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    let (t0, t1) = t_span;
    let span = t1 - t0;
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::Contract(format!("invalid time span ({t0}, {t1})")));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0 && opts.save_dt > 0.0) {
        return Err(Error::Contract("tolerances and save_dt must be positive".into()));
    }

    let n = u0.len();
    let n_save = ((span / opts.save_dt) + 1e-9).floor() as usize;
    let save_time = |i: usize| if i == n_save && ((n_save as f64) * opts.save_dt - span).abs() <= 1e-9 * span {
        t1
    } else {
        t0 + i as f64 * opts.save_dt
    };

    let mut stats = SolveStats::default();
    let mut times = vec![t0];
    let mut states = vec![u0.to_vec()];
    let mut next_save = 1;

    let mut y = u0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![Vec::new(); 7];
    k[0] = f(&y)?;
    stats.f_evals += 1;
    check_finite(&k[0], 0, 1)?;

    // Initial step from the scaled sizes of u0 and f(u0).
    let d0 = scaled_rms(&y, &y, opts.atol, opts.rtol);
    let d1 = scaled_rms(&k[0], &y, opts.atol, opts.rtol);
    let mut h = if d1 < 1e-5 {
        span
    } else if d0 < 1e-5 {
        1e-6 * span
    } else {
        (0.01 * d0 / d1).min(span)
    };

    let mut t = t0;
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;
    let mut stage_state = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    while t1 - t > 1e-12 * span {
        if h < UNDERFLOW * span || stats.steps_accepted + stats.steps_rejected >= opts.max_steps {
            return Err(Error::Stiffness { t, h, stats });
        }
        if t + h * 1.0001 >= t1 {
            h = t1 - t;
        }
        let step_idx = (stats.steps_accepted + stats.steps_rejected) as usize;

        for s in 1..7 {
            stage_state.copy_from_slice(&y);
            for (j, &a) in A[s].iter().enumerate().take(s) {
                if a != 0.0 {
                    axpy(h * a, &k[j], &mut stage_state);
                }
            }
            let ks = f(&stage_state)?;
            stats.f_evals += 1;
            check_finite(&ks, step_idx, s + 1)?;
            if s == 6 {
                y_new.copy_from_slice(&stage_state);
            }
            k[s] = ks;
        }
        debug_assert_eq!(C[6], 1.0);

        let mut err_sum = 0.0;
        for i in 0..n {
            let e: f64 = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sk = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err_sum += (e / sk).powi(2);
        }
        let err = (err_sum / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Divergence { step: step_idx, stage: 7 });
        }

        if err <= 1.0 {
            stats.steps_accepted += 1;
            let t_new = t + h;
            if next_save <= n_save && save_time(next_save) <= t_new + 1e-12 * span {
                let ydiff: Vec<f64> = y_new.iter().zip(&y).map(|(a, b)| a - b).collect();
                let bspl: Vec<f64> = (0..n).map(|i| h * k[0][i] - ydiff[i]).collect();
                let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - h * k[6][i] - bspl[i]).collect();
                let r5: Vec<f64> = (0..n)
                    .map(|i| h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>())
                    .collect();
                while next_save <= n_save && save_time(next_save) <= t_new + 1e-12 * span {
                    let ts = save_time(next_save);
                    let th = ((ts - t) / h).clamp(0.0, 1.0);
                    let th1 = 1.0 - th;
                    let ys: Vec<f64> = (0..n)
                        .map(|i| y[i] + th * (ydiff[i] + th1 * (bspl[i] + th * (r4[i] + th1 * r5[i]))))
                        .collect();
                    times.push(ts);
                    states.push(ys);
                    next_save += 1;
                }
            }
            let fac = (err.powf(EXPO1) / facold.powf(PI_BETA) / SAFETY).clamp(1.0 / GROW_MAX, 1.0 / SHRINK_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            facold = err.max(1e-4);
            last_rejected = false;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            t = t_new;
            h = h_new;
        } else {
            stats.steps_rejected += 1;
            let fac = (err.powf(EXPO1) / SAFETY).min(1.0 / SHRINK_MIN);
            h /= fac;
            last_rejected = true;
        }
    }

    Ok(Trajectory { times, states, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay(u: &[f64]) -> Result<Vec<f64>> {
        Ok(u.iter().map(|x| -x).collect())
    }

    fn growth(u: &[f64]) -> Result<Vec<f64>> {
        Ok(u.to_vec())
    }

    fn zero(u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; u.len()])
    }

    fn oscillator(u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![u[1], -u[0]])
    }

    #[test]
    fn rk4_examples() {
        assert_eq!(rk4_step(&zero, &[1.0, -2.0], 0.1).unwrap(), vec![1.0, -2.0]);

        // Four stages by hand: k = 1, 1.05, 1.0525, 1.10525.
        let hand = 1.0 + 0.1 / 6.0 * (1.0 + 2.0 * 1.05 + 2.0 * 1.0525 + 1.10525);
        let y = rk4_step(&growth, &[1.0], 0.1).unwrap()[0];
        assert_abs_diff_eq!(y, hand, epsilon = 1e-15);
        assert_abs_diff_eq!(y, 1.1051708333333333, epsilon = 1e-15);
        assert!((y - 0.1f64.exp()).abs() < 1e-7);

        let steps = (2.0 * std::f64::consts::PI / 0.01).round() as usize;
        let dt = 2.0 * std::f64::consts::PI / steps as f64;
        let mut u = vec![1.0, 0.0];
        for _ in 0..steps {
            u = rk4_step(&oscillator, &u, dt).unwrap();
        }
        assert!(((u[0] - 1.0).powi(2) + u[1].powi(2)).sqrt() <= 1e-7);
    }

    #[test]
    fn rk4_rejects_bad_step_and_reports_divergence() {
        assert!(matches!(rk4_step(&growth, &[1.0], 0.0), Err(Error::Contract(_))));
        let blowup = |u: &[f64]| Ok(vec![if u[0] > 1.0 { f64::INFINITY } else { 1.0 }]);
        match rk4_step(&blowup, &[0.9], 1.0) {
            Err(Error::Divergence { stage, .. }) => assert_eq!(stage, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut u = vec![1.0];
            for _ in 0..n {
                u = rk4_step(&growth, &u, dt).unwrap();
            }
            (u[0] - 1f64.exp()).abs()
        };
        for n in [10, 20, 40] {
            let ratio = err(n) / err(2 * n);
            assert!((ratio - 16.0).abs() <= 1.6, "ratio {ratio}");
        }
    }

    #[test]
    fn segment_examples() {
        let seg = solve_segment(&growth, &[1.0], 1, 0.1).unwrap();
        assert_eq!(seg, vec![rk4_step(&growth, &[1.0], 0.1).unwrap()]);
        let seg = solve_segment(&zero, &[0.5, 2.0], 3, 0.1).unwrap();
        assert!(seg.iter().all(|s| s == &vec![0.5, 2.0]));
        assert!(solve_segment(&zero, &[0.5], 0, 0.1).is_err());
    }

    #[test]
    fn taped_segment_matches_plain() {
        let taped_f = |t: &mut Tape, u: NodeId| {
            let v = t.value(u).as_slice().to_vec();
            let c = t.constant_vec(vec![0.3; v.len()]);
            let m = t.mul(u, u)?;
            let s = t.scale(m, -0.5);
            t.add(s, c)
        };
        let plain = |u: &[f64]| Ok(u.iter().map(|x| -0.5 * x * x + 0.3).collect());
        let mut tape = Tape::new();
        let u0 = tape.leaf_vec(vec![0.2, -0.4]);
        let nodes = solve_segment_taped(&mut tape, &taped_f, u0, 3, 0.05).unwrap();
        let states = solve_segment(&plain, &[0.2, -0.4], 3, 0.05).unwrap();
        for (n, s) in nodes.iter().zip(&states) {
            assert_eq!(tape.value(*n).as_slice(), s.as_slice());
        }
    }

    #[test]
    fn adaptive_exponential_decay() {
        let opts = AdaptiveOptions::new(1e-6, 0.1);
        let traj = adaptive_solve(&decay, &[1.0], (0.0, 1.0), &opts).unwrap();
        let end = traj.last_state().unwrap()[0];
        assert!((end - (-1f64).exp()).abs() <= 1e-6);
        assert_eq!(traj.times.len(), 11);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        let s = traj.stats;
        assert_eq!(s.f_evals, 1 + 6 * (s.steps_accepted + s.steps_rejected));
        for (t, u) in traj.times.iter().zip(&traj.states) {
            assert!((u[0] - (-t).exp()).abs() <= 1e-6);
        }
    }

    #[test]
    fn adaptive_zero_field_takes_one_step() {
        let opts = AdaptiveOptions::new(1e-6, 0.25);
        let traj = adaptive_solve(&zero, &[1.0, 2.0], (0.0, 1.0), &opts).unwrap();
        assert_eq!(traj.stats.steps_accepted, 1);
        assert_eq!(traj.stats.steps_rejected, 0);
        assert_eq!(traj.stats.f_evals, 7);
        assert!(traj.states.iter().all(|s| s == &vec![1.0, 2.0]));
        assert_eq!(traj.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn adaptive_evals_grow_as_tolerance_tightens() {
        let mut last = 0;
        for tol in [1e-3, 1e-5, 1e-7, 1e-9, 1e-11] {
            let traj = adaptive_solve(&decay, &[1.0], (0.0, 1.0), &AdaptiveOptions::new(tol, 0.5)).unwrap();
            assert!(traj.stats.f_evals >= last);
            last = traj.stats.f_evals;
        }
    }

    #[test]
    fn adaptive_is_deterministic() {
        let opts = AdaptiveOptions::new(1e-8, 0.05);
        let a = adaptive_solve(&oscillator, &[1.0, 0.3], (0.0, 7.0), &opts).unwrap();
        let b = adaptive_solve(&oscillator, &[1.0, 0.3], (0.0, 7.0), &opts).unwrap();
        assert_eq!(a, b);
        // Dense output stays accurate between steps.
        for (t, u) in a.times.iter().zip(&a.states) {
            let exact = t.cos() + 0.3 * t.sin();
            assert!((u[0] - exact).abs() <= 1e-6);
        }
    }

    #[test]
    fn stiff_problem_reports_stats() {
        let opts = AdaptiveOptions {
            max_steps: 50,
            ..AdaptiveOptions::new(1e-6, 1.0)
        };
        let stiff = |u: &[f64]| Ok(vec![-1e6 * (u[0] - 1.0)]);
        match adaptive_solve(&stiff, &[0.0], (0.0, 10.0), &opts) {
            Err(Error::Stiffness { stats, .. }) => {
                assert_eq!(stats.steps_accepted + stats.steps_rejected, 50);
                assert_eq!(stats.f_evals, 1 + 6 * 50);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn segment_agrees_with_adaptive_solver() {
        let seg = solve_segment(&oscillator, &[1.0, 0.0], 4, 0.02).unwrap();
        let traj = adaptive_solve(&oscillator, &[1.0, 0.0], (0.0, 0.08), &AdaptiveOptions::new(1e-10, 0.02)).unwrap();
        for (a, b) in seg.iter().zip(&traj.states[1..]) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }
}
