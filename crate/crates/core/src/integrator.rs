//! Adaptive Dormand–Prince 5(4) integrator and the pendulum drift-off run.
//!
//! Every attempted step evaluates all seven stages (no first-same-as-last
//! reuse), so the right-hand side is called exactly `7 × attempts` times.

use std::io::{self, Write};

use thiserror::Error;

use crate::training::format_float;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("initial state has {got} entries, problem dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite initial state")]
    NonFiniteInitial,
    #[error("right-hand side returned a non-finite value at t = {t}")]
    NonFinite { t: f64, partial: Trajectory },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64, partial: Trajectory },
    #[error("maximum of {max_steps} steps exceeded at t = {t}")]
    MaxSteps {
        max_steps: usize,
        t: f64,
        partial: Trajectory,
    },
}

pub struct OdeProblem<F> {
    pub dimension: usize,
    /// `rhs(t, y, dy)` writes `dy/dt`.
    pub rhs: F,
    pub initial: Vec<f64>,
    pub span: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub rtol: f64,
    pub atol: f64,
    /// `None` picks a starting step from the initial derivative.
    pub initial_step: Option<f64>,
    pub max_step: f64,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-8,
            initial_step: None,
            max_step: f64::INFINITY,
            max_steps: 1_000_000,
            safety: 0.9,
        }
    }
}

impl IntegratorSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), IntegratorError> {
        let fail = |m: &str| Err(IntegratorError::Settings(m.to_string()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return fail("tolerances must be > 0");
        }
        if !(self.max_step > 0.0) {
            return fail("max_step must be > 0");
        }
        if matches!(self.initial_step, Some(h) if !(h > 0.0)) {
            return fail("initial_step must be > 0");
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return fail("safety factor must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub rejected: usize,
    pub rhs_calls: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights (the last row of `A`).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Integrates over `problem.span`, keeping every accepted step.
pub fn integrate<F>(
    problem: &mut OdeProblem<F>,
    settings: &IntegratorSettings,
) -> Result<Trajectory, IntegratorError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    settings.validate()?;
    let n = problem.dimension;
    if problem.initial.len() != n {
        return Err(IntegratorError::Dimension {
            expected: n,
            got: problem.initial.len(),
        });
    }
    if problem.initial.iter().any(|v| !v.is_finite()) {
        return Err(IntegratorError::NonFiniteInitial);
    }
    let (t0, t1) = problem.span;
    if !(t0.is_finite() && t1.is_finite() && t1 >= t0) {
        return Err(IntegratorError::Settings(
            "span must be finite and ordered".into(),
        ));
    }

    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![problem.initial.clone()],
        ..Trajectory::default()
    };
    if t1 == t0 {
        return Ok(traj);
    }

    let mut t = t0;
    let mut y = problem.initial.clone();
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let mut h = match settings.initial_step {
        Some(h) => h,
        None => {
            (problem.rhs)(t, &y, &mut k[0]);
            traj.rhs_calls += 1;
            initial_step(&y, &k[0], settings)
        }
    }
    .min(settings.max_step)
    .min(t1 - t0);
    let mut attempts = 0;

    while t < t1 {
        if attempts >= settings.max_steps {
            return Err(IntegratorError::MaxSteps {
                max_steps: settings.max_steps,
                t,
                partial: traj,
            });
        }
        attempts += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) {
            return Err(IntegratorError::StepUnderflow { t, partial: traj });
        }

        for s in 0..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                stage[i] = acc;
            }
            (problem.rhs)(t + C[s] * h, &stage, &mut k[s]);
            traj.rhs_calls += 1;
        }
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IntegratorError::NonFinite { t, partial: traj });
        }

        let mut err_sq = 0.0;
        for i in 0..n {
            let mut hi5 = 0.0;
            let mut diff = 0.0;
            for s in 0..7 {
                hi5 += B5[s] * k[s][i];
                diff += (B5[s] - B4[s]) * k[s][i];
            }
            y5[i] = y[i] + h * hi5;
            let scale = settings.atol + settings.rtol * y[i].abs().max(y5[i].abs());
            err_sq += (h * diff / scale).powi(2);
        }
        let err = (err_sq / n as f64).sqrt();

        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (settings.safety * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y.copy_from_slice(&y5);
            traj.times.push(t);
            traj.states.push(y.clone());
        } else {
            traj.rejected += 1;
        }
        let factor = if err > 1.0 { factor.min(1.0) } else { factor };
        h = (h * factor).min(settings.max_step);
    }
    Ok(traj)
}

/// Starting step from the scaled size of `y` and `f(y)`.
fn initial_step(y: &[f64], f: &[f64], settings: &IntegratorSettings) -> f64 {
    let n = y.len() as f64;
    let scale = |v: f64| settings.atol + settings.rtol * v.abs();
    let d0 = (y.iter().map(|&v| (v / scale(v)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (y
        .iter()
        .zip(f)
        .map(|(&v, &df)| (df / scale(v)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}

/// Pendulum with the multiplier eliminated: `λ = u² + v² − y`.
pub fn pendulum_rhs(_t: f64, s: &[f64], ds: &mut [f64]) {
    let (x, y, u, v) = (s[0], s[1], s[2], s[3]);
    let lambda = u * u + v * v - y;
    ds[0] = u;
    ds[1] = v;
    ds[2] = -lambda * x;
    ds[3] = -lambda * y - 1.0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftTable {
    pub times: Vec<f64>,
    /// `|x² + y² − 1|`
    pub position: Vec<f64>,
    /// `|x u + y v|`
    pub velocity: Vec<f64>,
    pub trajectory: Trajectory,
}

impl DriftTable {
    /// Largest position residual over `lo <= t <= hi`.
    pub fn max_position_residual(&self, lo: f64, hi: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.position)
            .filter(|(&t, _)| t >= lo && t <= hi)
            .fold(0.0, |m, (_, &r)| m.max(r))
    }

    /// CSV with columns `t,c3_residual,c2_residual`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,c3_residual,c2_residual")?;
        for ((t, p), v) in self.times.iter().zip(&self.position).zip(&self.velocity) {
            writeln!(
                out,
                "{},{},{}",
                format_float(*t),
                format_float(*p),
                format_float(*v)
            )?;
        }
        Ok(())
    }
}

/// Integrates the λ-eliminated pendulum from `(1, 0, 0, 0)` over `[0, horizon]`
/// and records the position and velocity constraint residuals.
pub fn pendulum_driftoff(
    settings: &IntegratorSettings,
    horizon: f64,
) -> Result<DriftTable, IntegratorError> {
    let mut problem = OdeProblem {
        dimension: 4,
        rhs: pendulum_rhs,
        initial: vec![1.0, 0.0, 0.0, 0.0],
        span: (0.0, horizon),
    };
    let trajectory = integrate(&mut problem, settings)?;
    let position = trajectory
        .states
        .iter()
        .map(|s| (s[0] * s[0] + s[1] * s[1] - 1.0).abs())
        .collect();
    let velocity = trajectory
        .states
        .iter()
        .map(|s| (s[0] * s[2] + s[1] * s[3]).abs())
        .collect();
    Ok(DriftTable {
        times: trajectory.times.clone(),
        position,
        velocity,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(tol: f64) -> Trajectory {
        let mut p = OdeProblem {
            dimension: 1,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0],
            initial: vec![1.0],
            span: (0.0, 1.0),
        };
        integrate(&mut p, &IntegratorSettings::with_tolerance(tol)).unwrap()
    }

    #[test]
    fn tableau_consistency() {
        for (s, row) in A.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - C[s]).abs() < 1e-15, "row {s}");
        }
        assert!((B5.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((B4.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exponential_decay() {
        let traj = decay(1e-10);
        let y = traj.last_state().unwrap()[0];
        assert!((y - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        assert_eq!(traj.times[0], 0.0);
        assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn seven_calls_per_attempt() {
        let traj = decay(1e-6);
        let attempts = traj.len() - 1 + traj.rejected;
        // plus one call to pick the starting step
        assert_eq!(traj.rhs_calls, 7 * attempts + 1);
    }

    #[test]
    fn constant_solution() {
        let mut p = OdeProblem {
            dimension: 2,
            rhs: |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0),
            initial: vec![3.0, -1.0],
            span: (0.0, 5.0),
        };
        let traj = integrate(&mut p, &IntegratorSettings::default()).unwrap();
        assert_eq!(traj.rejected, 0);
        assert!(traj.states.iter().all(|s| s == &vec![3.0, -1.0]));
        assert_eq!(*traj.times.last().unwrap(), 5.0);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let mut p = OdeProblem {
            dimension: 2,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            initial: vec![1.0, 0.0],
            span: (0.0, 2.0 * std::f64::consts::PI),
        };
        let traj = integrate(&mut p, &IntegratorSettings::with_tolerance(1e-8)).unwrap();
        let end = traj.last_state().unwrap();
        assert!(
            (end[0] - 1.0).abs() < 1e-6 && end[1].abs() < 1e-6,
            "{end:?}"
        );
    }

    #[test]
    fn max_steps_keeps_partial_trajectory() {
        let mut p = OdeProblem {
            dimension: 1,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0],
            initial: vec![1.0],
            span: (0.0, 100.0),
        };
        let settings = IntegratorSettings {
            max_steps: 5,
            ..IntegratorSettings::with_tolerance(1e-10)
        };
        match integrate(&mut p, &settings) {
            Err(IntegratorError::MaxSteps { partial, .. }) => assert!(!partial.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_inputs() {
        let mut p = OdeProblem {
            dimension: 2,
            rhs: |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0),
            initial: vec![1.0],
            span: (0.0, 1.0),
        };
        assert!(matches!(
            integrate(&mut p, &IntegratorSettings::default()),
            Err(IntegratorError::Dimension { .. })
        ));
        p.initial = vec![f64::NAN, 0.0];
        assert!(integrate(&mut p, &IntegratorSettings::default()).is_err());
        p.initial = vec![0.0, 0.0];
        assert!(integrate(&mut p, &IntegratorSettings::with_tolerance(0.0)).is_err());
    }

    #[test]
    fn non_finite_rhs() {
        let mut p = OdeProblem {
            dimension: 1,
            rhs: |t: f64, _y: &[f64], dy: &mut [f64]| dy[0] = if t > 0.5 { f64::NAN } else { 1.0 },
            initial: vec![0.0],
            span: (0.0, 1.0),
        };
        assert!(matches!(
            integrate(&mut p, &IntegratorSettings::default()),
            Err(IntegratorError::NonFinite { .. })
        ));
    }

    #[test]
    fn driftoff_starts_consistent() {
        let table = pendulum_driftoff(&IntegratorSettings::default(), 1.0).unwrap();
        assert_eq!(table.position[0], 0.0);
        assert_eq!(table.velocity[0], 0.0);
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("t,c3_residual,c2_residual\n"));
    }
}
