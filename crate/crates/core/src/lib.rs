//! Kolmogorov–Arnold network solvers for high-index differential-algebraic
//! equations, with a classical Dormand–Prince baseline for constraint drift.
//!
//! The crate is organised bottom-up: [`autodiff`] records values together with
//! their time tangent, [`bsplines`] and [`networks`] build the KAN and MLP
//! models on top of it, [`dae_systems`] holds the benchmark problems,
//! [`training`] fits networks with L-BFGS, [`integrator`] provides the
//! reference ODE solver and [`report`] turns runs into tables and plots.

pub mod autodiff;
pub mod bsplines;
pub mod dae_systems;
pub mod integrator;
pub mod networks;
pub mod report;
pub mod training;

pub use autodiff::{ADScalar, AdError, GradientVector, Record, Scalar};
pub use bsplines::{EdgeActivation, SplineError, SplineGrid};
pub use dae_systems::{DaeError, DaeSystem, IndexForm, StateSample, SystemKind};
pub use integrator::{
    integrate, pendulum_driftoff, DriftTable, IntegratorError, IntegratorSettings, OdeProblem,
    Trajectory,
};
pub use networks::{GridSpec, KanNetwork, MlpNetwork, NetKind, Network, NetworkError, SolverPair};
pub use report::{
    absolute_error_trajectory, compare_runs, driftoff_curves, relative_error, run_config,
    run_experiment, ComparisonTable, DriftCurves, EvaluationGrid, Manifest, ReportError, RunReport,
};
pub use training::{
    lbfgs_minimize, loss, sample_collocation, train, CollocationSet, LbfgsSettings, LossBreakdown,
    Termination, TrainingConfig, TrainingError, TrainingOutcome, TrainingTrace,
};
