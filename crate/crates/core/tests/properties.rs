use proptest::prelude::*;

use daekan::report::relative_error;
use daekan::training::LossEvaluator;
use daekan::{
    ADScalar, DaeSystem, IndexForm, NetKind, Record, SplineGrid, StateSample, SystemKind,
    TrainingConfig,
};

fn grid_strategy() -> impl Strategy<Value = SplineGrid> {
    (-3.0f64..3.0, 0.1f64..4.0, 1usize..12, 1usize..5)
        .prop_map(|(lo, width, g, k)| SplineGrid::new(lo, lo + width, g, k).unwrap())
}

proptest! {
    #[test]
    fn basis_is_a_nonnegative_partition_of_unity(grid in grid_strategy(), u in 0.0f64..=1.0) {
        let (lo, hi) = grid.domain();
        let x = lo + u * (hi - lo);
        let b = grid.basis_values(x);
        prop_assert_eq!(b.len(), grid.basis_count());
        prop_assert!(b.iter().all(|&v| v >= -1e-15));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let e = grid.evaluate(x);
        prop_assert!(e.d1.iter().sum::<f64>().abs() <= 1e-9 * (1.0 + 1.0 / grid.step()));
    }

    #[test]
    fn outside_points_clamp(grid in grid_strategy(), off in 1e-3f64..5.0) {
        let (lo, hi) = grid.domain();
        prop_assert_eq!(grid.basis_values(lo - off), grid.basis_values(lo));
        prop_assert_eq!(grid.basis_values(hi + off), grid.basis_values(hi));
        prop_assert!(grid.evaluate(hi + off).clamped && grid.evaluate(lo - off).clamped);
        prop_assert!(!grid.evaluate(hi).clamped);
    }

    #[test]
    fn relative_error_scales_with_the_error(
        exact in prop::collection::vec(0.5f64..2.0, 1..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        alpha in -10.0f64..10.0,
    ) {
        let pred: Vec<f64> = exact.iter().zip(&noise).map(|(e, n)| e + n).collect();
        let scaled: Vec<f64> = exact.iter().zip(&noise).map(|(e, n)| e + alpha * n).collect();
        let base = relative_error(&exact, &pred).unwrap();
        let re = relative_error(&exact, &scaled).unwrap();
        prop_assert!((re - alpha.abs() * base).abs() <= 1e-12 * (1.0 + re));
        prop_assert!(re >= 0.0);
    }

    #[test]
    fn tangents_follow_the_chain_rule(a in -2.0f64..2.0, b in -1.0f64..1.0, t in -1.0f64..1.0) {
        // f(t) = sin(a t) exp(b t) / (2 + t²)
        let rec = Record::new();
        let ts = rec.seed_input(t).unwrap();
        let f = (ts * a).sin() * (ts * b).exp() / (ts.square() + 2.0);
        let g = |t: f64| (a * t).sin() * (b * t).exp() / (2.0 + t * t);
        let h = 1e-5;
        let fd = (g(t + h) - g(t - h)) / (2.0 * h);
        prop_assert!((f.primal() - g(t)).abs() < 1e-15);
        prop_assert!((f.tangent() - fd).abs() < 1e-8);
    }
}

/// A trajectory through the sampled state with `u' = z` exactly and `z' = acc`.
struct Quadratic {
    u0: Vec<f64>,
    z0: Vec<f64>,
    acc: Vec<f64>,
}

impl Quadratic {
    /// Sample at time 0 where `u`, `z` carry time tangents.
    fn sample<'r>(&self, t: ADScalar<'r>, lambda: f64) -> StateSample<ADScalar<'r>> {
        let n = self.u0.len();
        let pos: Vec<_> = (0..n)
            .map(|i| t * self.z0[i] + t.square() * (0.5 * self.acc[i]) + self.u0[i])
            .collect();
        let vel: Vec<_> = (0..n).map(|i| t * self.acc[i] + self.z0[i]).collect();
        let acc: Vec<_> = self.acc.iter().map(|&a| ADScalar::constant(a)).collect();
        StateSample {
            t: 0.0,
            u: pos.iter().chain(&vel).copied().collect(),
            du: vel.iter().chain(&acc).copied().collect(),
            z: vec![ADScalar::constant(lambda)],
        }
    }
}

fn level_tangent_and_next(
    system: &DaeSystem,
    q: &Quadratic,
    lambda: f64,
    level: IndexForm,
    lower: IndexForm,
) -> (f64, f64) {
    let rec = Record::new();
    let t = rec.seed_input(0.0).unwrap();
    let s = q.sample(t, lambda);
    let d = system.constraint_residual(level, &s).unwrap().tangent();
    let next = system.constraint_residual(lower, &s).unwrap().primal();
    (d, next)
}

proptest! {
    #[test]
    fn particle_hierarchy(
        u in prop::array::uniform2(-1.5f64..1.5),
        z in prop::array::uniform2(-1.5f64..1.5),
        lambda in -2.0f64..2.0,
    ) {
        let system = DaeSystem::by_kind(SystemKind::Particle);
        // z' from the dynamics rows, so the acceleration level applies
        let acc = vec![
            2.0 * u[1] - 2.0 * u[1].powi(3) - u[0] * lambda,
            2.0 * u[0] - 2.0 * u[0].powi(3) - u[1] * lambda,
        ];
        let q = Quadratic { u0: u.to_vec(), z0: z.to_vec(), acc };
        let (d3, l2) = level_tangent_and_next(&system, &q, lambda, IndexForm::Three, IndexForm::Two);
        prop_assert!((d3 - 2.0 * l2).abs() < 1e-12);
        let (d2, l1) = level_tangent_and_next(&system, &q, lambda, IndexForm::Two, IndexForm::One);
        prop_assert!((d2 - l1).abs() < 1e-11, "{} vs {}", d2, l1);
    }

    #[test]
    fn robot_arm_hierarchy(
        u in prop::array::uniform2(-1.5f64..1.5),
        v in prop::array::uniform2(-2.0f64..2.0),
        a in prop::array::uniform2(-2.0f64..2.0),
        lambda in -2.0f64..2.0,
    ) {
        let system = DaeSystem::by_kind(SystemKind::RobotArm);
        let q = Quadratic { u0: u.to_vec(), z0: v.to_vec(), acc: a.to_vec() };
        let (d3, l2) = level_tangent_and_next(&system, &q, lambda, IndexForm::Three, IndexForm::Two);
        prop_assert!((d3 - l2).abs() < 1e-12);
        let (d2, l1) = level_tangent_and_next(&system, &q, lambda, IndexForm::Two, IndexForm::One);
        prop_assert!((d2 - l1).abs() < 1e-11);
    }

    #[test]
    fn pendulum_hierarchy_on_the_circle(
        angle in -3.1f64..3.1,
        speed in -2.0f64..2.0,
        lambda in -2.0f64..2.0,
    ) {
        let system = DaeSystem::by_kind(SystemKind::Pendulum);
        let (x, y) = (angle.sin(), -angle.cos());
        // tangent velocity keeps x u + y v = 0
        let (vx, vy) = (speed * -y, speed * x);
        let acc = vec![-lambda * x, -lambda * y - 1.0];
        let q = Quadratic { u0: vec![x, y], z0: vec![vx, vy], acc };
        let (d3, l2) = level_tangent_and_next(&system, &q, lambda, IndexForm::Three, IndexForm::Two);
        prop_assert!((d3 - 2.0 * l2).abs() < 1e-12);
        let (d2, l1) = level_tangent_and_next(&system, &q, lambda, IndexForm::Two, IndexForm::One);
        prop_assert!((d2 - l1).abs() < 1e-12);
    }
}

fn tiny_config(system: SystemKind, net: NetKind, seed: u64) -> TrainingConfig {
    let mut c = TrainingConfig::kan(system, IndexForm::Two, seed);
    c.n_collocation = 7;
    match net {
        NetKind::Kan => {
            c.differential_shape = vec![1, 2, 4];
            c.algebraic_shape = Some(vec![1, 2, 1]);
        }
        NetKind::Mlp => {
            c.net = NetKind::Mlp;
            c.differential_shape = vec![1, 6, 5];
            c.algebraic_shape = None;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_decomposes_exactly(seed in 0u64..1000, mlp in any::<bool>(), sys in 0usize..3) {
        let kind = [SystemKind::Pendulum, SystemKind::Particle, SystemKind::RobotArm][sys];
        let net = if mlp { NetKind::Mlp } else { NetKind::Kan };
        let c = tiny_config(kind, net, seed);
        let system = DaeSystem::by_kind(kind);
        let pair = c.build_pair().unwrap();
        let colloc = daekan::sample_collocation(&c, &system);
        let (parts, grad) = daekan::loss(&pair, &system, c.form, &colloc).unwrap();
        prop_assert_eq!(parts.total, parts.mse_f + parts.mse_i);
        prop_assert!(parts.mse_f >= 0.0 && parts.mse_i >= 0.0);
        prop_assert_eq!(grad.len(), pair.parameter_count());

        // without residual points the loss is exactly the initial term
        let mut only_initial = colloc.clone();
        only_initial.residual.clear();
        let mut eval = LossEvaluator::new(&pair, &system, c.form, &only_initial).unwrap();
        let theta = pair.parameters();
        let mut g = vec![0.0; theta.len()];
        let bare = eval.evaluate(&theta, &mut g).unwrap();
        prop_assert_eq!(bare.mse_f, 0.0);
        prop_assert_eq!(bare.total, parts.mse_i);
    }

    #[test]
    fn best_loss_never_increases(seed in 0u64..1000) {
        let mut c = tiny_config(SystemKind::Particle, NetKind::Kan, seed);
        c.epochs = 15;
        c.eval_every = 1;
        let out = daekan::train(&c).unwrap();
        let losses: Vec<f64> = out.trace.snapshots.iter().map(|s| s.loss.total).collect();
        prop_assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", losses);
        let its: Vec<usize> = out.trace.snapshots.iter().map(|s| s.iteration).collect();
        prop_assert!(its.windows(2).all(|w| w[0] < w[1]));
    }
}
