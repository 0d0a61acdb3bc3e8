//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs sequentially in a single process so the timed gates measure one
//! training run at a time. Run with
//! `cargo test -p daekan --test acceptance`. The target is left out of a
//! plain `cargo test` because the full training budgets take about 40 minutes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use daekan::training::LossEvaluator;
use daekan::{
    integrate, pendulum_driftoff, run_config, sample_collocation, DaeSystem, EvaluationGrid,
    IndexForm, IntegratorSettings, NetKind, OdeProblem, Record, RunReport, SplineGrid, SystemKind,
    TrainingConfig,
};

/// Outcome of one criterion: a verdict plus the numbers behind it.
struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(system: SystemKind, net: NetKind, form: IndexForm) -> TrainingConfig {
    let path = configs_dir().join(format!(
        "{}_{}_index{}.toml",
        system.name(),
        net,
        form.level()
    ));
    TrainingConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run(config: &TrainingConfig, name: &str) -> (RunReport, Duration) {
    let grid = EvaluationGrid::new(config.t_end, EvaluationGrid::DEFAULT_POINTS).unwrap();
    let start = Instant::now();
    let report = run_config(config, &scratch(name), &grid).unwrap();
    (report, start.elapsed())
}

fn fmt_all(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.2e}")).collect();
    format!("[{}]", cells.join(", "))
}

/// `|a - b|` relative to `max(|b|, floor)`.
fn rel_gap(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

// ---- criterion 1 -----------------------------------------------------------

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst_pou = 0.0f64;
    let mut worst_basis = 0.0f64;
    for (lo, hi) in [(0.0, 1.0), (-1.0, 1.0)] {
        let grid = SplineGrid::new(lo, hi, 5, 3).unwrap();
        for i in 0..1000 {
            let t = lo + (hi - lo) * i as f64 / 999.0;
            let sum: f64 = grid.basis_values(t).iter().sum();
            worst_pou = worst_pou.max((sum - 1.0).abs());
        }
        let h = 1e-6;
        for i in 0..200 {
            let t = lo + 1e-3 + (hi - lo - 2e-3) * i as f64 / 199.0;
            let (p, m) = (grid.basis_values(t + h), grid.basis_values(t - h));
            let e = grid.evaluate(t);
            for j in 0..grid.basis_count() {
                let fd = (p[j] - m[j]) / (2.0 * h);
                let analytic = if j >= e.first && j - e.first < e.d1.len() {
                    e.d1[j - e.first]
                } else {
                    0.0
                };
                worst_basis = worst_basis.max(rel_gap(analytic, fd, 1.0));
            }
        }
    }

    let system = DaeSystem::by_kind(SystemKind::Particle);
    let mut worst_net = 0.0f64;
    for net in [NetKind::Kan, NetKind::Mlp] {
        let config = shipped(SystemKind::Particle, net, IndexForm::Three);
        let pair = config.build_pair().unwrap();
        let h = 1e-6;
        for i in 0..50 {
            let t = 0.01 + 0.98 * i as f64 / 49.0;
            let (_, d) = pair.eval(t).unwrap();
            let (p, _) = pair.eval(t + h).unwrap();
            let (m, _) = pair.eval(t - h).unwrap();
            for j in 0..d.len() {
                worst_net = worst_net.max(rel_gap(d[j], (p[j] - m[j]) / (2.0 * h), 1.0));
            }
        }
    }

    // loss gradient on 50 random coordinates
    let config = shipped(SystemKind::Particle, NetKind::Kan, IndexForm::Three);
    let pair = config.build_pair().unwrap();
    let colloc = sample_collocation(&config, &system);
    let mut eval = LossEvaluator::new(&pair, &system, config.form, &colloc).unwrap();
    let theta = pair.parameters();
    let mut grad = vec![0.0; theta.len()];
    eval.evaluate(&theta, &mut grad).unwrap();
    let mut scratch_grad = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_grad = 0.0f64;
    for _ in 0..50 {
        let k = rng.gen_range(0..theta.len());
        let h = 1e-5;
        let mut probe = theta.clone();
        probe[k] = theta[k] + h;
        let up = eval.evaluate(&probe, &mut scratch_grad).unwrap().total;
        probe[k] = theta[k] - h;
        let down = eval.evaluate(&probe, &mut scratch_grad).unwrap().total;
        worst_grad = worst_grad.max(rel_gap(grad[k], (up - down) / (2.0 * h), 1e-3));
    }

    // mixed derivative: d/dθ of d/dt of each output
    let t0 = 0.37;
    let mut rec = Record::new();
    rec.reset();
    let params = rec.register_parameters(&theta);
    let t = rec.seed_input(t0).unwrap();
    let out = pair.forward(&params, t).unwrap();
    let mut worst_mixed = 0.0f64;
    let mut perturbed = pair.clone();
    let tangent_fd = |p: &daekan::SolverPair, j: usize| {
        let ht = 1e-4;
        (p.eval(t0 + ht).unwrap().0[j] - p.eval(t0 - ht).unwrap().0[j]) / (2.0 * ht)
    };
    for (j, &o) in out.iter().enumerate() {
        let g = rec.backward_tangent(o).unwrap();
        for _ in 0..10 {
            let k = rng.gen_range(0..theta.len());
            let hp = 1e-4;
            let mut probe = theta.clone();
            probe[k] = theta[k] + hp;
            perturbed.load_parameters(&probe).unwrap();
            let up = tangent_fd(&perturbed, j);
            probe[k] = theta[k] - hp;
            perturbed.load_parameters(&probe).unwrap();
            let down = tangent_fd(&perturbed, j);
            worst_mixed = worst_mixed.max(rel_gap(g[k], (up - down) / (2.0 * hp), 1e-3));
        }
    }

    let elapsed = start.elapsed();
    let pass = worst_pou <= 1e-12
        && worst_basis <= 1e-6
        && worst_net <= 1e-6
        && worst_grad <= 1e-4
        && worst_mixed <= 1e-4
        && elapsed < Duration::from_secs(10);
    Verdict::new(
        pass,
        format!(
            "unity {worst_pou:.1e}, basis tangent {worst_basis:.1e}, network tangent {worst_net:.1e}, \
             loss gradient {worst_grad:.1e}, mixed {worst_mixed:.1e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---- criterion 2 -----------------------------------------------------------

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_residual = 0.0f64;
    let mut worst_ic = 0.0f64;
    for kind in [
        SystemKind::Pendulum,
        SystemKind::Particle,
        SystemKind::RobotArm,
    ] {
        let system = DaeSystem::by_kind(kind);
        for _ in 0..50 {
            let t = rng.gen_range(0.0..1.0);
            let sample = system.exact_sample(t);
            for form in IndexForm::ALL {
                for r in system.residual::<f64>(form, &sample).unwrap() {
                    worst_residual = worst_residual.max(r.abs());
                }
            }
        }
        let at_zero = system.exact_sample(0.0);
        let state: Vec<f64> = at_zero.u.iter().chain(&at_zero.z).copied().collect();
        for (a, b) in state.iter().zip(system.initial_state()) {
            worst_ic = worst_ic.max((a - b).abs());
        }
        for form in IndexForm::ALL {
            let r: f64 = system.constraint_residual(form, &at_zero).unwrap();
            worst_ic = worst_ic.max(r.abs());
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst_residual <= 1e-12 && worst_ic <= 1e-12 && elapsed < Duration::from_secs(10),
        format!(
            "exact residual {worst_residual:.1e}, initial conditions {worst_ic:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---- criterion 3 -----------------------------------------------------------

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut errors = Vec::new();
    let mut bounded = true;
    for rtol in [1e-6, 1e-8, 1e-10] {
        let mut problem = OdeProblem {
            dimension: 1,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0],
            initial: vec![1.0],
            span: (0.0, 1.0),
        };
        let trajectory =
            integrate(&mut problem, &IntegratorSettings::with_tolerance(rtol)).unwrap();
        let err = (trajectory.last_state().unwrap()[0] - (-1.0f64).exp()).abs();
        bounded &= err <= 100.0 * rtol;
        errors.push(err);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let drift = pendulum_driftoff(&IntegratorSettings::with_tolerance(1e-8), 100.0).unwrap();
    let early = drift.max_position_residual(0.0, 10.0);
    let late = drift.max_position_residual(90.0, 100.0);
    let elapsed = start.elapsed();
    Verdict::new(
        bounded && monotone && late >= 10.0 * early && elapsed < Duration::from_secs(30),
        format!(
            "decay errors {}, drift {early:.2e} -> {late:.2e} ({:.0}x), {:.1}s",
            fmt_all(&errors),
            late / early,
            elapsed.as_secs_f64()
        ),
    )
}

// ---- criteria 4 and 5 ------------------------------------------------------

fn gate(report: &RunReport, n_u: usize, diff_tol: f64, alg_tol: f64) -> bool {
    report.re[..n_u].iter().all(|&r| r <= diff_tol)
        && report.re[n_u..].iter().all(|&r| r <= alg_tol)
}

fn criterion_4(full: &RunReport) -> Verdict {
    let mut smoke_config = full.config.clone();
    smoke_config.epochs = 2000;
    let (smoke, took) = run(&smoke_config, "particle_smoke");
    let full_ok = gate(full, 4, 1e-3, 1e-2);
    let smoke_ok = smoke.re[..4].iter().all(|&r| r <= 1e-2) && took < Duration::from_secs(120);
    Verdict::new(
        full_ok && smoke_ok,
        format!(
            "seed {}: RE {} after {} iterations; smoke RE {} in {:.1}s",
            full.seed(),
            fmt_all(&full.re),
            full.trace.iterations,
            fmt_all(&smoke.re),
            took.as_secs_f64()
        ),
    )
}

fn criterion_5(full: &RunReport) -> Verdict {
    Verdict::new(
        gate(full, 4, 1e-3, 1e-2),
        format!(
            "seed {}: RE {} after {} iterations",
            full.seed(),
            fmt_all(&full.re),
            full.trace.iterations
        ),
    )
}

// ---- criterion 6 -----------------------------------------------------------

/// Both models train for the shipped budget of their system, so the
/// iteration budgets are matched and equal to the training gates.
const COMPARISON_SEEDS: [u64; 3] = [1, 2, 3];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// `reused` holds the gate runs, which are the seed-1 KAN runs of each system.
fn criterion_6(reused: &[&RunReport]) -> Verdict {
    let mut pass = true;
    let mut lines = Vec::new();
    for system in [SystemKind::Particle, SystemKind::RobotArm] {
        let mut medians = Vec::new();
        for net in [NetKind::Kan, NetKind::Mlp] {
            let mut per_seed = Vec::new();
            for seed in COMPARISON_SEEDS {
                let mut config = shipped(system, net, IndexForm::Three);
                config.seed = seed;
                let done = reused.iter().find(|r| r.config == config);
                let re = match done {
                    Some(r) => r.re.clone(),
                    None => {
                        run(&config, &format!("compare_{}_{net}_{seed}", system.name()))
                            .0
                            .re
                    }
                };
                per_seed.push(re);
            }
            let m: Vec<f64> = (0..4)
                .map(|j| median(per_seed.iter().map(|re| re[j]).collect()))
                .collect();
            medians.push((m, per_seed));
        }
        let ok = (0..4).all(|j| medians[0].0[j] < medians[1].0[j]);
        pass &= ok;
        let u1 =
            |per_seed: &[Vec<f64>]| fmt_all(&per_seed.iter().map(|re| re[0]).collect::<Vec<_>>());
        lines.push(format!(
            "{} KAN {} vs MLP {} (u1 per seed KAN {} MLP {})",
            system.name(),
            fmt_all(&medians[0].0),
            fmt_all(&medians[1].0),
            u1(&medians[0].1),
            u1(&medians[1].1),
        ));
    }
    Verdict::new(
        pass,
        format!(
            "median RE over seeds {COMPARISON_SEEDS:?} at the shipped budgets: {}",
            lines.join("; ")
        ),
    )
}

// ---- criterion 7 -----------------------------------------------------------

fn criterion_7(runs: &[(&RunReport, bool)]) -> Verdict {
    let mut pass = true;
    let mut checked = 0;
    let mut lines = Vec::new();
    for (report, passed_gate) in runs {
        if !passed_gate {
            continue;
        }
        checked += 1;
        let bound = 10.0 * report.training_residual;
        let maxima: Vec<f64> = IndexForm::ALL
            .iter()
            .rev()
            .map(|&f| report.drift.level(f).iter().fold(0.0f64, |a, &b| a.max(b)))
            .collect();
        pass &= maxima.iter().all(|&m| m <= bound);
        lines.push(format!(
            "{} levels 1-3 max {} vs bound {bound:.2e}",
            report.config.system.name(),
            fmt_all(&maxima)
        ));
    }
    if checked == 0 {
        return Verdict::new(false, "no run passed gate 4 or 5");
    }
    Verdict::new(pass, lines.join("; "))
}

// ---- criterion 8 -----------------------------------------------------------

/// Iteration cap for the repeat runs; full budgets are covered by criteria 4 and 5.
const DETERMINISM_EPOCHS: usize = 20;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Verdict {
    let mut entries: Vec<PathBuf> = fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    entries.sort();
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for path in &entries {
        let mut config = TrainingConfig::from_file(path).unwrap();
        config.epochs = config.epochs.min(DETERMINISM_EPOCHS);
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let grid = EvaluationGrid::new(config.t_end, EvaluationGrid::DEFAULT_POINTS).unwrap();
        let (a, b) = (
            scratch(&format!("repeat_{stem}_a")),
            scratch(&format!("repeat_{stem}_b")),
        );
        run_config(&config, &a, &grid).unwrap();
        run_config(&config, &b, &grid).unwrap();
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        compared += fa.len();
        if fa.is_empty() || fa != fb {
            mismatched.push(stem);
        }
    }
    Verdict::new(
        mismatched.is_empty() && !entries.is_empty(),
        format!(
            "{} configs, {compared} CSVs compared at {DETERMINISM_EPOCHS} iterations, mismatches: {:?}",
            entries.len(),
            mismatched
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, Verdict)> = Vec::new();
    let mut report = |n: u8, v: Verdict| {
        println!(
            "criterion {n}: {} {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, v));
    };

    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let particle = shipped(SystemKind::Particle, NetKind::Kan, IndexForm::Three);
    let (particle_run, _) = run(&particle, "particle_full");
    let c4 = criterion_4(&particle_run);
    let particle_ok = gate(&particle_run, 4, 1e-3, 1e-2);
    report(4, c4);

    let robot = shipped(SystemKind::RobotArm, NetKind::Kan, IndexForm::Three);
    let (robot_run, _) = run(&robot, "robot_full");
    let robot_ok = gate(&robot_run, 4, 1e-3, 1e-2);
    report(5, criterion_5(&robot_run));

    report(6, criterion_6(&[&particle_run, &robot_run]));
    report(
        7,
        criterion_7(&[(&particle_run, particle_ok), (&robot_run, robot_ok)]),
    );
    report(8, criterion_8());

    let failed: Vec<u8> = results
        .iter()
        .filter(|(_, v)| !v.pass)
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
