//! Benchmark DAEs with hand-derived constraint hierarchies.
//!
//! Each system exposes the residual of its index-3, index-2 and index-1
//! forms, the individual constraint of every level, consistent initial values
//! and the exact solution. Residuals are generic over [`Scalar`], so the same
//! code runs on plain floats (metrics) and on recorded values (training).
//!
//! Variable order (differential first, multiplier last):
//!
//! | system    | variables             |
//! |-----------|-----------------------|
//! | pendulum  | x, y, u, v, λ         |
//! | particle  | u1, u2, z1, z2, λ     |
//! | robot-arm | u1, u2, v1, v2, λ     |

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DaeError {
    #[error("unknown system `{0}` (expected pendulum, particle or robot-arm)")]
    UnknownSystem(String),
    #[error("unknown index form `{0}` (expected 1, 2 or 3)")]
    UnknownForm(String),
    #[error("sample has {got} {what}, system expects {expected}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Differential index of a formulation, equivalently the constraint level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndexForm {
    One,
    Two,
    Three,
}

impl IndexForm {
    pub const ALL: [IndexForm; 3] = [IndexForm::Three, IndexForm::Two, IndexForm::One];

    pub fn level(self) -> u8 {
        match self {
            IndexForm::One => 1,
            IndexForm::Two => 2,
            IndexForm::Three => 3,
        }
    }

    pub fn from_level(level: u8) -> Result<Self, DaeError> {
        match level {
            1 => Ok(IndexForm::One),
            2 => Ok(IndexForm::Two),
            3 => Ok(IndexForm::Three),
            other => Err(DaeError::UnknownForm(other.to_string())),
        }
    }
}

impl fmt::Display for IndexForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "index-{}", self.level())
    }
}

impl FromStr for IndexForm {
    type Err = DaeError;

    fn from_str(s: &str) -> Result<Self, DaeError> {
        let digits = s.trim().trim_start_matches("index-");
        digits
            .parse::<u8>()
            .map_err(|_| DaeError::UnknownForm(s.to_string()))
            .and_then(IndexForm::from_level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    Pendulum,
    Particle,
    RobotArm,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Particle => "particle",
            SystemKind::RobotArm => "robot-arm",
        }
    }
}

impl FromStr for SystemKind {
    type Err = DaeError;

    fn from_str(s: &str) -> Result<Self, DaeError> {
        match s.trim() {
            "pendulum" => Ok(SystemKind::Pendulum),
            "particle" => Ok(SystemKind::Particle),
            "robot-arm" | "robot_arm" => Ok(SystemKind::RobotArm),
            other => Err(DaeError::UnknownSystem(other.to_string())),
        }
    }
}

/// Values at one time: differential variables `u`, their time derivatives
/// `du`, and the algebraic variables `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSample<S> {
    pub t: f64,
    pub u: Vec<S>,
    pub du: Vec<S>,
    pub z: Vec<S>,
}

impl StateSample<f64> {
    /// Splits a full state vector and its derivative into a sample.
    pub fn from_full(t: f64, state: &[f64], derivative: &[f64], n_u: usize) -> Self {
        Self {
            t,
            u: state[..n_u].to_vec(),
            du: derivative[..n_u].to_vec(),
            z: state[n_u..].to_vec(),
        }
    }
}

/// Number of inputs the residual consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualSpec {
    pub states: usize,
    pub derivatives: usize,
    pub algebraic: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeSystem {
    kind: SystemKind,
    variables: &'static [&'static str],
    n_u: usize,
    n_z: usize,
    initial: Vec<f64>,
}

pub fn pendulum_system() -> DaeSystem {
    // λ(0) from u² + v² - λ - y = 0 at (1, 0, 0, 0)
    DaeSystem {
        kind: SystemKind::Pendulum,
        variables: &["x", "y", "u", "v", "lambda"],
        n_u: 4,
        n_z: 1,
        initial: vec![1.0, 0.0, 0.0, 0.0, 0.0],
    }
}

pub fn particle_system() -> DaeSystem {
    DaeSystem {
        kind: SystemKind::Particle,
        variables: &["u1", "u2", "z1", "z2", "lambda"],
        n_u: 4,
        n_z: 1,
        initial: vec![1.0, 0.0, 0.0, 1.0, 1.0],
    }
}

pub fn robot_arm_system() -> DaeSystem {
    DaeSystem {
        kind: SystemKind::RobotArm,
        variables: &["u1", "u2", "v1", "v2", "lambda"],
        n_u: 4,
        n_z: 1,
        initial: vec![0.0, 0.0, 1.0, -2.0, 1.0],
    }
}

impl DaeSystem {
    pub fn by_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Pendulum => pendulum_system(),
            SystemKind::Particle => particle_system(),
            SystemKind::RobotArm => robot_arm_system(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DaeError> {
        Ok(Self::by_kind(name.parse()?))
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn variables(&self) -> &'static [&'static str] {
        self.variables
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_vars(&self) -> usize {
        self.n_u + self.n_z
    }

    /// Consistent initial values at `t = 0`, all variables.
    pub fn initial_state(&self) -> &[f64] {
        &self.initial
    }

    pub fn residual_spec(&self) -> ResidualSpec {
        ResidualSpec {
            states: self.n_u,
            derivatives: self.n_u,
            algebraic: self.n_z,
            len: self.n_u + self.n_z,
        }
    }

    fn check_arity<S>(&self, sample: &StateSample<S>) -> Result<(), DaeError> {
        for (what, expected, got) in [
            ("states", self.n_u, sample.u.len()),
            ("derivatives", self.n_u, sample.du.len()),
            ("algebraic values", self.n_z, sample.z.len()),
        ] {
            if expected != got {
                return Err(DaeError::Arity {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Stacked residual of the chosen formulation: the differential equations
    /// followed by the constraint of the matching level.
    pub fn residual<S: Scalar>(
        &self,
        form: IndexForm,
        sample: &StateSample<S>,
    ) -> Result<Vec<S>, DaeError> {
        self.check_arity(sample)?;
        let mut r = self.dynamics_residual(sample);
        r.push(self.constraint(form, sample));
        Ok(r)
    }

    /// Only the algebraic constraint of `level` (3 = position, 2 = velocity,
    /// 1 = acceleration).
    pub fn constraint_residual<S: Scalar>(
        &self,
        level: IndexForm,
        sample: &StateSample<S>,
    ) -> Result<S, DaeError> {
        self.check_arity(sample)?;
        Ok(self.constraint(level, sample))
    }

    fn dynamics_residual<S: Scalar>(&self, s: &StateSample<S>) -> Vec<S> {
        let (u, du, z) = (&s.u, &s.du, &s.z);
        let lambda = z[0];
        match self.kind {
            SystemKind::Pendulum => {
                let (x, y, vx, vy) = (u[0], u[1], u[2], u[3]);
                vec![
                    du[0] - vx,
                    du[1] - vy,
                    du[2] + lambda * x,
                    du[3] + lambda * y + 1.0,
                ]
            }
            SystemKind::Particle => {
                let (u1, u2, z1, z2) = (u[0], u[1], u[2], u[3]);
                vec![
                    du[0] - z1,
                    du[1] - z2,
                    du[2] - (u2 * 2.0 - u2.powi(3) * 2.0 - u1 * lambda),
                    du[3] - (u1 * 2.0 - u1.powi(3) * 2.0 - u2 * lambda),
                ]
            }
            SystemKind::RobotArm => {
                // M(u) v' - f(u, v) + G(u)ᵀ λ
                let (u1, u2, v1, v2) = (u[0], u[1], u[2], u[3]);
                let (dv1, dv2) = (du[2], du[3]);
                let c2 = u2.cos();
                let c1 = u1.cos();
                let c12 = (u1 + u2).cos();
                let m11 = c2 * 3.0 + 5.0;
                let m12 = c2 * 1.5 + 1.0;
                let f1 = (c1 + c12) * v1 - u1 * 3.0;
                let f2 = c12 * v1 + (c2 * -1.5 + 1.0) * u1;
                let g1 = c1 + c12;
                let g2 = c12;
                vec![
                    du[0] - v1,
                    du[1] - v2,
                    m11 * dv1 + m12 * dv2 - f1 + g1 * lambda,
                    m12 * dv1 + dv2 - f2 + g2 * lambda,
                ]
            }
        }
    }

    fn constraint<S: Scalar>(&self, level: IndexForm, s: &StateSample<S>) -> S {
        let (u, du, z) = (&s.u, &s.du, &s.z);
        let lambda = z[0];
        match (self.kind, level) {
            (SystemKind::Pendulum, IndexForm::Three) => u[0].square() + u[1].square() - 1.0,
            (SystemKind::Pendulum, IndexForm::Two) => u[0] * u[2] + u[1] * u[3],
            (SystemKind::Pendulum, IndexForm::One) => u[2].square() + u[3].square() - lambda - u[1],
            (SystemKind::Particle, IndexForm::Three) => u[0].square() + u[1].square() - 1.0,
            (SystemKind::Particle, IndexForm::Two) => u[0] * u[2] + u[1] * u[3],
            (SystemKind::Particle, IndexForm::One) => {
                let (u1, u2, z1, z2) = (u[0], u[1], u[2], u[3]);
                let r2 = u1.square() + u2.square();
                z1.square() + z2.square() + u1 * u2 * (-(r2) + 2.0) * 2.0 - lambda * r2
            }
            (SystemKind::RobotArm, IndexForm::Three) => u[0].sin() + (u[0] + u[1]).sin(),
            (SystemKind::RobotArm, IndexForm::Two) => {
                u[0].cos() * u[2] + (u[0] + u[1]).cos() * (u[2] + u[3])
            }
            (SystemKind::RobotArm, IndexForm::One) => {
                let (u1, u2, v1, v2) = (u[0], u[1], u[2], u[3]);
                let (dv1, dv2) = (du[2], du[3]);
                let s12 = (u1 + u2).sin();
                let c12 = (u1 + u2).cos();
                -(u1.sin() * v1.square()) + u1.cos() * dv1 + (dv1 + dv2) * c12
                    - s12 * (v1 + v2).square()
            }
        }
    }

    /// Exact solution, all variables.
    pub fn exact(&self, t: f64) -> Vec<f64> {
        self.exact_with_derivative(t).0
    }

    /// Exact solution and its analytic time derivative.
    pub fn exact_with_derivative(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            SystemKind::Pendulum => pendulum_exact(t),
            SystemKind::Particle => {
                let (s, c) = t.sin_cos();
                let (s2, c2) = (2.0 * t).sin_cos();
                (vec![c, s, -s, c, 1.0 + s2], vec![-s, c, -c, -s, 2.0 * c2])
            }
            SystemKind::RobotArm => {
                let (s, c) = t.sin_cos();
                (
                    vec![s, -2.0 * s, c, -2.0 * c, c],
                    vec![c, -2.0 * c, -s, 2.0 * s, -s],
                )
            }
        }
    }

    pub fn exact_sample(&self, t: f64) -> StateSample<f64> {
        let (state, d) = self.exact_with_derivative(t);
        StateSample::from_full(t, &state, &d, self.n_u)
    }
}

/// Jacobi elliptic functions `(sn, cn, dn)` of argument `u` and parameter
/// `m = k²`, `0 <= m < 1`, by the descending AGM scheme.
pub fn jacobi_elliptic(u: f64, m: f64) -> (f64, f64, f64) {
    const MAX_STEPS: usize = 16;
    let mut a = [0.0; MAX_STEPS + 1];
    let mut c = [0.0; MAX_STEPS + 1];
    a[0] = 1.0;
    let mut b = (1.0 - m).sqrt();
    c[0] = m.sqrt();
    let mut n = 0;
    while n < MAX_STEPS && c[n].abs() > f64::EPSILON {
        a[n + 1] = 0.5 * (a[n] + b);
        c[n + 1] = 0.5 * (a[n] - b);
        b = (a[n] * b).sqrt();
        n += 1;
    }
    let mut phi = 2f64.powi(n as i32) * a[n] * u;
    for i in (1..=n).rev() {
        phi = 0.5 * (phi + (c[i] / a[i] * phi.sin()).asin());
    }
    let (sn, cn) = phi.sin_cos();
    // dn > 0 for m < 1
    let dn = (1.0 - m * sn * sn).sqrt();
    (sn, cn, dn)
}

/// Complete elliptic integral of the first kind, `K(m)`.
pub fn elliptic_k(m: f64) -> f64 {
    let mut a = 1.0;
    let mut b = (1.0 - m).sqrt();
    for _ in 0..32 {
        if (a - b).abs() <= f64::EPSILON * a {
            break;
        }
        let next = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = next;
    }
    std::f64::consts::PI / (2.0 * a)
}

/// Unit pendulum released from rest at the horizontal: with `θ` measured from
/// the downward vertical, `sin(θ/2) = k sn(K - t)`, `k² = 1/2`.
fn pendulum_exact(t: f64) -> (Vec<f64>, Vec<f64>) {
    let m: f64 = 0.5;
    let k = m.sqrt();
    let (sn, cn, dn) = jacobi_elliptic(elliptic_k(m) - t, m);
    let x = 2.0 * k * sn * dn;
    let y = -cn * cn;
    let vx = -2.0 * k * cn.powi(3);
    let vy = -2.0 * sn * cn * dn;
    let lambda = 3.0 * cn * cn;
    // d/dt with dτ/dt = -1: sn' = -cn dn, cn' = sn dn, dn' = m sn cn
    let dvx = -6.0 * k * cn * cn * sn * dn;
    let dvy = 2.0 * (cn * cn * dn * dn - sn * sn * dn * dn - m * sn * sn * cn * cn);
    let dlambda = 6.0 * cn * sn * dn;
    (vec![x, y, vx, vy, lambda], vec![vx, vy, dvx, dvy, dlambda])
}
