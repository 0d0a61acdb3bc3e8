//! Physics-informed loss, collocation data, L-BFGS and the training loop.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ADScalar, AdError, GradientVector, Record};
use crate::dae_systems::{DaeError, DaeSystem, IndexForm, StateSample, SystemKind};
use crate::networks::{
    GridSpec, KanNetwork, MlpNetwork, MlpTrace, NetKind, Network, NetworkError, SolverPair,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialisation error: {0}")]
    Serialise(#[from] toml::ser::Error),
    #[error(transparent)]
    Dae(#[from] DaeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("non-finite loss at {set} point {index}")]
    NonFinite { set: PointSet, index: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSet {
    Initial,
    Collocation,
}

impl fmt::Display for PointSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointSet::Initial => "initial",
            PointSet::Collocation => "collocation",
        })
    }
}

/// Formats a float with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsSettings {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    pub grad_tolerance: f64,
    pub loss_change_tolerance: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            history: 50,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            grad_tolerance: 1e-9,
            loss_change_tolerance: 1e-16,
        }
    }
}

impl LbfgsSettings {
    fn validate(&self) -> Result<(), TrainingError> {
        if self.history == 0 || self.max_line_search == 0 {
            return Err(TrainingError::Config(
                "lbfgs history and max_line_search must be positive".into(),
            ));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(TrainingError::Config(
                "line-search constants need 0 < c1 < c2 < 1".into(),
            ));
        }
        if !(self.grad_tolerance >= 0.0 && self.loss_change_tolerance >= 0.0) {
            return Err(TrainingError::Config("tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

/// On-disk form of [`TrainingConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    system: String,
    form: u8,
    #[serde(default = "default_n_initial")]
    n_initial: usize,
    #[serde(default = "default_n_collocation")]
    n_collocation: usize,
    #[serde(default = "default_t_end")]
    t_end: f64,
    epochs: usize,
    seed: u64,
    net: NetKind,
    differential_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    algebraic_shape: Option<Vec<usize>>,
    #[serde(default = "default_grid_intervals")]
    grid_intervals: usize,
    #[serde(default = "default_spline_order")]
    spline_order: usize,
    #[serde(default = "default_eval_every")]
    eval_every: usize,
    #[serde(default)]
    lbfgs: LbfgsSettings,
}

fn default_n_initial() -> usize {
    1
}
fn default_n_collocation() -> usize {
    200
}
fn default_t_end() -> f64 {
    1.0
}
fn default_grid_intervals() -> usize {
    5
}
fn default_spline_order() -> usize {
    3
}
fn default_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub system: SystemKind,
    pub form: IndexForm,
    pub n_initial: usize,
    pub n_collocation: usize,
    pub t_end: f64,
    pub epochs: usize,
    pub seed: u64,
    pub net: NetKind,
    pub differential_shape: Vec<usize>,
    /// `None` means one network predicts every variable.
    pub algebraic_shape: Option<Vec<usize>>,
    pub grid_intervals: usize,
    pub spline_order: usize,
    pub eval_every: usize,
    pub lbfgs: LbfgsSettings,
}

impl TrainingConfig {
    /// KAN defaults for `system` in the given form.
    pub fn kan(system: SystemKind, form: IndexForm, seed: u64) -> Self {
        let (differential_shape, algebraic_shape, epochs) = match system {
            SystemKind::RobotArm => (vec![1, 4, 4, 4], vec![1, 2, 2, 1], 20_000),
            _ => (vec![1, 5, 5, 4], vec![1, 5, 5, 1], 24_000),
        };
        Self {
            system,
            form,
            n_initial: 1,
            n_collocation: 200,
            t_end: 1.0,
            epochs,
            seed,
            net: NetKind::Kan,
            differential_shape,
            algebraic_shape: Some(algebraic_shape),
            grid_intervals: 5,
            spline_order: 3,
            eval_every: 10,
            lbfgs: LbfgsSettings::default(),
        }
    }

    /// Parses and fully validates a config file body.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainingError> {
        let raw: ConfigFile = toml::from_str(text)?;
        let config = Self {
            system: raw.system.parse()?,
            form: IndexForm::from_level(raw.form)?,
            n_initial: raw.n_initial,
            n_collocation: raw.n_collocation,
            t_end: raw.t_end,
            epochs: raw.epochs,
            seed: raw.seed,
            net: raw.net,
            differential_shape: raw.differential_shape,
            algebraic_shape: raw.algebraic_shape,
            grid_intervals: raw.grid_intervals,
            spline_order: raw.spline_order,
            eval_every: raw.eval_every,
            lbfgs: raw.lbfgs,
        };
        config.validate()?;
        if config.epochs == 0 {
            return Err(TrainingError::Config("epochs must be >= 1".into()));
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainingError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, TrainingError> {
        let raw = ConfigFile {
            system: self.system.name().to_string(),
            form: self.form.level(),
            n_initial: self.n_initial,
            n_collocation: self.n_collocation,
            t_end: self.t_end,
            epochs: self.epochs,
            seed: self.seed,
            net: self.net,
            differential_shape: self.differential_shape.clone(),
            algebraic_shape: self.algebraic_shape.clone(),
            grid_intervals: self.grid_intervals,
            spline_order: self.spline_order,
            eval_every: self.eval_every,
            lbfgs: self.lbfgs,
        };
        Ok(toml::to_string(&raw)?)
    }

    /// Checks every invariant except `epochs >= 1`, which only the file
    /// loader enforces so that `train` can return untrained networks.
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |msg: &str| Err(TrainingError::Config(msg.to_string()));
        if self.n_initial == 0 {
            return bad("n_initial must be >= 1");
        }
        if self.n_collocation == 0 {
            return bad("n_collocation must be >= 1");
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return bad("t_end must be finite and > 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.grid_intervals == 0 || self.spline_order == 0 {
            return bad("grid_intervals and spline_order must be >= 1");
        }
        self.lbfgs.validate()?;
        let system = DaeSystem::by_kind(self.system);
        let out = |s: &[usize]| s.last().copied().unwrap_or(0);
        match &self.algebraic_shape {
            Some(a) if out(&self.differential_shape) != system.n_u() || out(a) != system.n_z() => {
                Err(TrainingError::Config(format!(
                    "{} needs {} differential and {} algebraic outputs",
                    system.name(),
                    system.n_u(),
                    system.n_z()
                )))
            }
            None if out(&self.differential_shape) != system.n_vars() => {
                Err(TrainingError::Config(format!(
                    "a joint network for {} needs {} outputs",
                    system.name(),
                    system.n_vars()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            intervals: self.grid_intervals,
            order: self.spline_order,
            input_domain: (0.0, self.t_end),
            hidden_domain: (-1.0, 1.0),
        }
    }

    /// Freshly initialised networks. The algebraic network draws from `seed + 1`.
    pub fn build_pair(&self) -> Result<SolverPair, TrainingError> {
        let make = |shape: &[usize], seed: u64| -> Result<Network, NetworkError> {
            Ok(match self.net {
                NetKind::Kan => Network::Kan(KanNetwork::new(shape, self.grid_spec(), seed)?),
                NetKind::Mlp => Network::Mlp(MlpNetwork::new(shape, seed)?),
            })
        };
        let differential = make(&self.differential_shape, self.seed)?;
        Ok(match &self.algebraic_shape {
            Some(a) => SolverPair::split(differential, make(a, self.seed.wrapping_add(1))?),
            None => SolverPair::joint(differential),
        })
    }
}

/// Initial records and residual points, fixed for a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub initial: Vec<(f64, Vec<f64>)>,
    pub residual: Vec<f64>,
}

/// `n_collocation` evenly spaced points on `[0, T]` (both ends included) and
/// `n_initial` copies of the consistent initial state at `t = 0`.
pub fn sample_collocation(config: &TrainingConfig, system: &DaeSystem) -> CollocationSet {
    let n = config.n_collocation;
    let residual = if n == 1 {
        vec![0.0]
    } else {
        let h = config.t_end / (n - 1) as f64;
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    config.t_end
                } else {
                    i as f64 * h
                }
            })
            .collect()
    };
    let initial = (0..config.n_initial)
        .map(|_| (0.0, system.initial_state().to_vec()))
        .collect();
    CollocationSet { initial, residual }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse_f: f64,
    pub mse_i: f64,
}

impl LossBreakdown {
    pub fn new(mse_f: f64, mse_i: f64) -> Self {
        Self {
            total: mse_f + mse_i,
            mse_f,
            mse_i,
        }
    }
}

/// Evaluates the residual loss and its parameter gradient for one problem.
///
/// Each point is recorded on its own tape; per-point gradients are summed
/// into one buffer in point order. When every network is an MLP, the
/// networks run as dense passes and only the residual is taped: its gradient
/// with respect to the outputs and their time derivatives is pulled back by
/// [`MlpNetwork::backward_dual`].
#[derive(Debug)]
pub struct LossEvaluator<'a> {
    pair: &'a SolverPair,
    system: &'a DaeSystem,
    form: IndexForm,
    colloc: &'a CollocationSet,
    record: Record,
    dense: Option<Vec<(&'a MlpNetwork, usize, MlpTrace)>>,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(
        pair: &'a SolverPair,
        system: &'a DaeSystem,
        form: IndexForm,
        colloc: &'a CollocationSet,
    ) -> Result<Self, TrainingError> {
        if pair.output_dim() != system.n_vars() {
            return Err(TrainingError::Config(format!(
                "networks produce {} outputs, {} has {} variables",
                pair.output_dim(),
                system.name(),
                system.n_vars()
            )));
        }
        let mut dense = Some(Vec::new());
        let mut offset = 0;
        for net in std::iter::once(&pair.differential).chain(pair.algebraic.as_ref()) {
            match (net, dense.as_mut()) {
                (Network::Mlp(m), Some(d)) => d.push((m, offset, MlpTrace::default())),
                _ => dense = None,
            }
            offset += net.parameter_count();
        }
        Ok(Self {
            pair,
            system,
            form,
            colloc,
            record: Record::new(),
            dense,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.pair.parameter_count()
    }

    /// Loss at `theta`; the gradient is written into `grad`.
    pub fn evaluate(
        &mut self,
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<LossBreakdown, TrainingError> {
        if self.dense.is_some() {
            self.evaluate_dense(theta, grad)
        } else {
            self.evaluate_taped(theta, grad)
        }
    }

    fn evaluate_taped(
        &mut self,
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<LossBreakdown, TrainingError> {
        assert_eq!(theta.len(), self.parameter_count());
        assert_eq!(grad.len(), theta.len());
        grad.fill(0.0);
        let n_u = self.system.n_u();

        let n_f = self.colloc.residual.len();
        let mut sum_f = 0.0;
        if n_f > 0 {
            let scale = 1.0 / n_f as f64;
            for (index, &t) in self.colloc.residual.iter().enumerate() {
                self.record.reset();
                let rec = &self.record;
                let params = rec.register_parameters(theta);
                let t = rec.seed_input(t)?;
                let out = self.pair.forward(&params, t).map_err(|e| match e {
                    NetworkError::NonFinite { .. } => TrainingError::NonFinite {
                        set: PointSet::Collocation,
                        index,
                    },
                    other => other.into(),
                })?;
                let sample = StateSample {
                    t: t.primal(),
                    u: out[..n_u].to_vec(),
                    du: out[..n_u].iter().map(|v| v.derivative()).collect(),
                    z: out[n_u..].to_vec(),
                };
                let r = self.system.residual(self.form, &sample)?;
                let sq = squared_norm(&r);
                if !sq.primal().is_finite() {
                    return Err(TrainingError::NonFinite {
                        set: PointSet::Collocation,
                        index,
                    });
                }
                sum_f += sq.primal();
                rec.accumulate_gradient(sq, scale, 0.0, grad)?;
            }
        }

        let n_i = self.colloc.initial.len();
        let mut sum_i = 0.0;
        if n_i > 0 {
            let scale = 1.0 / n_i as f64;
            for (index, (t, target)) in self.colloc.initial.iter().enumerate() {
                self.record.reset();
                let rec = &self.record;
                let params = rec.register_parameters(theta);
                let out =
                    self.pair
                        .forward(&params, ADScalar::constant(*t))
                        .map_err(|e| match e {
                            NetworkError::NonFinite { .. } => TrainingError::NonFinite {
                                set: PointSet::Initial,
                                index,
                            },
                            other => other.into(),
                        })?;
                let diff: Vec<_> = out.iter().zip(target).map(|(&p, &g)| p - g).collect();
                let sq = squared_norm(&diff);
                if !sq.primal().is_finite() {
                    return Err(TrainingError::NonFinite {
                        set: PointSet::Initial,
                        index,
                    });
                }
                sum_i += sq.primal();
                rec.accumulate_gradient(sq, scale, 0.0, grad)?;
            }
        }

        let mse_f = if n_f > 0 { sum_f / n_f as f64 } else { 0.0 };
        let mse_i = if n_i > 0 { sum_i / n_i as f64 } else { 0.0 };
        Ok(LossBreakdown::new(mse_f, mse_i))
    }
    fn evaluate_dense(
        &mut self,
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<LossBreakdown, TrainingError> {
        assert_eq!(theta.len(), self.parameter_count());
        assert_eq!(grad.len(), theta.len());
        grad.fill(0.0);
        let n_u = self.system.n_u();
        let n_vars = self.system.n_vars();
        let nets = self.dense.as_mut().expect("dense path");
        let mut values = vec![0.0; 2 * n_vars];
        let mut adjoint = vec![0.0; 2 * n_vars];

        let points = self
            .colloc
            .residual
            .iter()
            .map(|&t| (PointSet::Collocation, t, None))
            .chain(
                self.colloc
                    .initial
                    .iter()
                    .map(|(t, target)| (PointSet::Initial, *t, Some(target))),
            );
        let (n_f, n_i) = (self.colloc.residual.len(), self.colloc.initial.len());
        let (mut sum_f, mut sum_i) = (0.0, 0.0);
        let mut index = [0usize; 2];
        for (set, t, target) in points {
            let slot = usize::from(set == PointSet::Initial);
            let point = index[slot];
            index[slot] += 1;
            let non_finite = |e: NetworkError| match e {
                NetworkError::NonFinite { .. } => TrainingError::NonFinite { set, index: point },
                other => other.into(),
            };
            // outputs then their time derivatives
            let mut k = 0;
            for (net, offset, trace) in nets.iter_mut() {
                let n = net.parameter_count();
                net.forward_dual(&theta[*offset..*offset + n], t, trace)
                    .map_err(non_finite)?;
                let (v, d) = trace.output();
                values[k..k + v.len()].copy_from_slice(v);
                values[n_vars + k..n_vars + k + d.len()].copy_from_slice(d);
                k += v.len();
            }

            self.record.reset();
            let rec = &self.record;
            let leaves = rec.register_parameters(&values);
            let out: Vec<ADScalar> = (0..n_vars)
                .map(|j| {
                    ADScalar::fused(
                        values[j],
                        values[n_vars + j],
                        [(leaves[j], 1.0, 0.0), (leaves[n_vars + j], 0.0, 1.0)],
                    )
                })
                .collect();
            let (sq, scale) = match target {
                None => {
                    let sample = StateSample {
                        t,
                        u: out[..n_u].to_vec(),
                        du: out[..n_u].iter().map(|v| v.derivative()).collect(),
                        z: out[n_u..].to_vec(),
                    };
                    (
                        squared_norm(&self.system.residual(self.form, &sample)?),
                        1.0 / n_f as f64,
                    )
                }
                Some(target) => {
                    let diff: Vec<_> = out.iter().zip(target).map(|(&p, &g)| p - g).collect();
                    (squared_norm(&diff), 1.0 / n_i as f64)
                }
            };
            if !sq.primal().is_finite() {
                return Err(TrainingError::NonFinite { set, index: point });
            }
            match set {
                PointSet::Collocation => sum_f += sq.primal(),
                PointSet::Initial => sum_i += sq.primal(),
            }
            adjoint.fill(0.0);
            rec.accumulate_gradient(sq, scale, 0.0, &mut adjoint)?;

            let mut k = 0;
            for (net, offset, trace) in nets.iter() {
                let n = net.parameter_count();
                let m = trace.output().0.len();
                net.backward_dual(
                    &theta[*offset..*offset + n],
                    trace,
                    &adjoint[k..k + m],
                    &adjoint[n_vars + k..n_vars + k + m],
                    &mut grad[*offset..*offset + n],
                );
                k += m;
            }
        }

        let mse_f = if n_f > 0 { sum_f / n_f as f64 } else { 0.0 };
        let mse_i = if n_i > 0 { sum_i / n_i as f64 } else { 0.0 };
        Ok(LossBreakdown::new(mse_f, mse_i))
    }
}

fn squared_norm<'r>(values: &[ADScalar<'r>]) -> ADScalar<'r> {
    let squares: Vec<_> = values.iter().map(|v| v.square()).collect();
    ADScalar::sum(&squares)
}

/// Loss and gradient of `pair` at its current parameters.
pub fn loss(
    pair: &SolverPair,
    system: &DaeSystem,
    form: IndexForm,
    colloc: &CollocationSet,
) -> Result<(LossBreakdown, GradientVector), TrainingError> {
    let mut eval = LossEvaluator::new(pair, system, form, colloc)?;
    let theta = pair.parameters();
    let mut grad = vec![0.0; theta.len()];
    let parts = eval.evaluate(&theta, &mut grad)?;
    Ok((parts, GradientVector(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// No iterations were requested.
    NotStarted,
    EpochLimit,
    GradientTolerance,
    LossChangeTolerance,
    /// Ten consecutive iterations without an acceptable step.
    LineSearchFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::NotStarted => "not-started",
            Termination::EpochLimit => "epoch-limit",
            Termination::GradientTolerance => "gradient-tolerance",
            Termination::LossChangeTolerance => "loss-change-tolerance",
            Termination::LineSearchFailure => "line-search-failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub snapshots: Vec<Snapshot>,
    pub final_parameters: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub wall_time: Duration,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> Option<LossBreakdown> {
        self.snapshots.last().map(|s| s.loss)
    }

    /// CSV with columns `iteration,loss_total,mse_f,mse_i,grad_norm`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iteration,loss_total,mse_f,mse_i,grad_norm")?;
        for s in &self.snapshots {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.iteration,
                format_float(s.loss.total),
                format_float(s.loss.mse_f),
                format_float(s.loss.mse_i),
                format_float(s.grad_norm)
            )?;
        }
        Ok(())
    }
}

const MAX_CONSECUTIVE_FAILURES: usize = 10;
const MAX_HALVINGS: usize = 60;
/// Bracket width (in parameter space) below which the zoom phase stops.
const BRACKET_TOLERANCE: f64 = 1e-14;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// A point probed by the line search.
#[derive(Debug, Clone)]
struct Probe {
    t: f64,
    loss: LossBreakdown,
    grad: Vec<f64>,
    gtd: f64,
}

impl Probe {
    fn f(&self) -> f64 {
        self.loss.total
    }
}

struct Problem<'o, F> {
    objective: &'o mut F,
    evaluations: usize,
}

impl<F> Problem<'_, F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<LossBreakdown, TrainingError>,
{
    /// Evaluates along `x + t d`. Non-finite losses are reported as `+inf`
    /// so the line search backs off instead of aborting.
    fn probe(&mut self, x: &[f64], t: f64, d: &[f64]) -> Result<Probe, TrainingError> {
        let point: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        let mut grad = vec![0.0; x.len()];
        self.evaluations += 1;
        match (self.objective)(&point, &mut grad) {
            Ok(loss) if loss.total.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                let gtd = dot(&grad, d);
                Ok(Probe { t, loss, grad, gtd })
            }
            Ok(_) | Err(TrainingError::NonFinite { .. }) => Ok(Probe {
                t,
                loss: LossBreakdown::new(f64::INFINITY, 0.0),
                grad: vec![0.0; x.len()],
                gtd: f64::NAN,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Minimiser of a cubic through two points with slopes, clamped to `bounds`.
fn cubic_interpolate(
    (x1, f1, g1): (f64, f64, f64),
    (x2, f2, g2): (f64, f64, f64),
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_finite() {
            return min_pos.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

/// Strong-Wolfe line search (bracketing then cubic zoom). Returns the best
/// point found; the caller decides whether it is acceptable.
fn strong_wolfe<F>(
    problem: &mut Problem<'_, F>,
    x: &[f64],
    d: &[f64],
    start: &Probe,
    t0: f64,
    settings: &LbfgsSettings,
) -> Result<Probe, TrainingError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<LossBreakdown, TrainingError>,
{
    let (c1, c2) = (settings.c1, settings.c2);
    let max_ls = settings.max_line_search;
    let d_norm = max_abs(d);
    let (f0, gtd0) = (start.f(), start.gtd);

    let mut t = t0;
    let mut new = problem.probe(x, t, d)?;
    let mut prev = start.clone();
    let mut evals = 1;
    let mut bracket: Vec<Probe>;
    loop {
        // f = +inf gives NaN slopes; the first test below catches it
        if new.f() > f0 + c1 * t * gtd0 || (evals > 1 && new.f() >= prev.f()) {
            bracket = vec![prev, new];
            break;
        }
        if new.gtd.abs() <= -c2 * gtd0 {
            return Ok(new);
        }
        if new.gtd >= 0.0 {
            bracket = vec![prev, new];
            break;
        }
        if evals >= max_ls {
            bracket = vec![start.clone(), new];
            break;
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        let next_t = cubic_interpolate(
            (prev.t, prev.f(), prev.gtd),
            (t, new.f(), new.gtd),
            Some((min_step, max_step)),
        );
        prev = new;
        t = next_t;
        new = problem.probe(x, t, d)?;
        evals += 1;
    }

    let order = |b: &[Probe]| if b[0].f() <= b[1].f() { (0, 1) } else { (1, 0) };
    let (mut low, mut high) = order(&bracket);
    let mut insufficient = false;
    while evals < max_ls {
        let (a, b) = (bracket[0].t, bracket[1].t);
        let (lo, hi) = (a.min(b), a.max(b));
        if (hi - lo) * d_norm < BRACKET_TOLERANCE {
            break;
        }
        let mut t = if bracket[0].f().is_finite() && bracket[1].f().is_finite() {
            cubic_interpolate(
                (a, bracket[0].f(), bracket[0].gtd),
                (b, bracket[1].f(), bracket[1].gtd),
                None,
            )
        } else {
            0.5 * (lo + hi)
        };
        // keep the trial away from the bracket ends
        let eps = 0.1 * (hi - lo);
        if (hi - t).min(t - lo) < eps {
            if insufficient || t >= hi || t <= lo {
                t = if (t - hi).abs() < (t - lo).abs() {
                    hi - eps
                } else {
                    lo + eps
                };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let trial = problem.probe(x, t, d)?;
        evals += 1;
        if trial.f() > f0 + c1 * t * gtd0 || trial.f() >= bracket[low].f() {
            bracket[high] = trial;
            (low, high) = order(&bracket);
        } else {
            if trial.gtd.abs() <= -c2 * gtd0 {
                return Ok(trial);
            }
            if trial.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = trial;
        }
    }
    Ok(bracket.swap_remove(low))
}

/// Limited-memory BFGS with a strong-Wolfe line search.
///
/// `objective(theta, grad)` returns the loss and writes the gradient.
/// A snapshot is taken at iteration 0, at every multiple of `eval_every`
/// and at the final iteration. With `epochs == 0` nothing is evaluated.
pub fn lbfgs_minimize<F>(
    theta0: &[f64],
    mut objective: F,
    epochs: usize,
    eval_every: usize,
    settings: &LbfgsSettings,
) -> Result<TrainingTrace, TrainingError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<LossBreakdown, TrainingError>,
{
    let started = Instant::now();
    let n = theta0.len();
    if n == 0 {
        return Err(TrainingError::Config("no parameters to optimise".into()));
    }
    settings.validate()?;
    let eval_every = eval_every.max(1);
    let mut x = theta0.to_vec();
    if epochs == 0 {
        return Ok(TrainingTrace {
            snapshots: Vec::new(),
            final_parameters: x,
            iterations: 0,
            evaluations: 0,
            termination: Termination::NotStarted,
            wall_time: started.elapsed(),
        });
    }

    let mut problem = Problem {
        objective: &mut objective,
        evaluations: 0,
    };
    let zero = vec![0.0; n];
    let mut current = problem.probe(&x, 0.0, &zero)?;
    if !current.f().is_finite() {
        return Err(TrainingError::NonFinite {
            set: PointSet::Collocation,
            index: 0,
        });
    }
    let mut snapshots = vec![Snapshot {
        iteration: 0,
        loss: current.loss,
        grad_norm: norm(&current.grad),
    }];

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut failures = 0;
    let mut restarted = false;
    let mut termination = Termination::EpochLimit;
    let mut iteration = 0;
    if max_abs(&current.grad) <= settings.grad_tolerance {
        termination = Termination::GradientTolerance;
    }

    while termination == Termination::EpochLimit && iteration < epochs {
        iteration += 1;
        let g = &current.grad;
        let mut d = two_loop(g, &history);
        let mut gtd = dot(g, &d);
        if !(gtd < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(g, &d);
        }
        let t0 = if history.is_empty() {
            (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };
        let start = Probe {
            t: 0.0,
            loss: current.loss,
            grad: current.grad.clone(),
            gtd,
        };
        let found = strong_wolfe(&mut problem, &x, &d, &start, t0, settings)?;
        let accepted = found.t > 0.0
            && found.f() < current.f()
            && found.f() <= current.f() + settings.c1 * found.t * gtd;

        let next = if accepted {
            failures = 0;
            Some((found, d))
        } else {
            log::debug!("line search failed at iteration {iteration}; trying steepest descent");
            failures += 1;
            history.clear();
            steepest_descent(&mut problem, &x, &current)?
        };

        match next {
            Some((probe, dir)) => {
                let step: Vec<f64> = dir.iter().map(|v| probe.t * v).collect();
                let y: Vec<f64> = probe
                    .grad
                    .iter()
                    .zip(&current.grad)
                    .map(|(a, b)| a - b)
                    .collect();
                let ys = dot(&y, &step);
                if ys > f64::EPSILON * norm(&y) * norm(&step) {
                    if history.len() == settings.history {
                        history.pop_front();
                    }
                    history.push_back((step.clone(), y, 1.0 / ys));
                }
                for (xi, si) in x.iter_mut().zip(&step) {
                    *xi += si;
                }
                let change = (current.f() - probe.f()).abs();
                current = Probe {
                    t: 0.0,
                    loss: probe.loss,
                    grad: probe.grad,
                    gtd: 0.0,
                };
                if max_abs(&current.grad) <= settings.grad_tolerance {
                    termination = Termination::GradientTolerance;
                } else if change < settings.loss_change_tolerance {
                    // a stale curvature model can stall; only a fresh one may stop the run
                    if restarted {
                        termination = Termination::LossChangeTolerance;
                    } else {
                        log::debug!("loss stalled at iteration {iteration}; clearing history");
                        history.clear();
                        restarted = true;
                    }
                } else {
                    restarted = false;
                }
            }
            None => {
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    log::warn!("terminating after {failures} consecutive line-search failures");
                    termination = Termination::LineSearchFailure;
                }
            }
        }

        let last = termination != Termination::EpochLimit || iteration == epochs;
        if iteration % eval_every == 0 || last {
            snapshots.push(Snapshot {
                iteration,
                loss: current.loss,
                grad_norm: norm(&current.grad),
            });
        }
    }

    Ok(TrainingTrace {
        snapshots,
        final_parameters: x,
        iterations: iteration,
        evaluations: problem.evaluations,
        termination,
        wall_time: started.elapsed(),
    })
}

/// `-H g` from the stored curvature pairs, with the usual `sᵀy / yᵀy` scaling.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((_, y, rho)) = history.back() {
        let gamma = 1.0 / (rho * dot(y, y));
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// Fallback step along `-g`, halving from unit length until the loss drops.
fn steepest_descent<F>(
    problem: &mut Problem<'_, F>,
    x: &[f64],
    current: &Probe,
) -> Result<Option<(Probe, Vec<f64>)>, TrainingError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<LossBreakdown, TrainingError>,
{
    let g_norm = norm(&current.grad);
    if g_norm == 0.0 {
        return Ok(None);
    }
    let d: Vec<f64> = current.grad.iter().map(|v| -v).collect();
    let mut t = 1.0 / g_norm;
    for _ in 0..MAX_HALVINGS {
        let probe = problem.probe(x, t, &d)?;
        if probe.f() < current.f() {
            return Ok(Some((probe, d)));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Trained networks, the data they were fitted to, and the optimiser trace.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub pair: SolverPair,
    pub collocation: CollocationSet,
    pub trace: TrainingTrace,
}

pub fn train(config: &TrainingConfig) -> Result<TrainingOutcome, TrainingError> {
    config.validate()?;
    let system = DaeSystem::by_kind(config.system);
    let mut pair = config.build_pair()?;
    let collocation = sample_collocation(config, &system);
    let theta0 = pair.parameters();
    let trace = {
        let mut eval = LossEvaluator::new(&pair, &system, config.form, &collocation)?;
        lbfgs_minimize(
            &theta0,
            |theta, grad| eval.evaluate(theta, grad),
            config.epochs,
            config.eval_every,
            &config.lbfgs,
        )?
    };
    pair.load_parameters(&trace.final_parameters)?;
    log::info!(
        "{} {} {}: {} iterations, loss {:e}, {}",
        config.net,
        config.system.name(),
        config.form,
        trace.iterations,
        trace.final_loss().map_or(f64::NAN, |l| l.total),
        trace.termination
    );
    Ok(TrainingOutcome {
        pair,
        collocation,
        trace,
    })
}
