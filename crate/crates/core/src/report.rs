//! Error metrics, run reports, comparison tables and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae_systems::{DaeError, DaeSystem, IndexForm, StateSample};
use crate::networks::{NetKind, NetworkError, SolverPair};
use crate::training::{format_float, train, TrainingConfig, TrainingError, TrainingTrace};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("exact series has zero norm")]
    ZeroNorm,
    #[error("evaluation grid needs at least 2 points on a positive span")]
    Grid,
    #[error("cannot compare runs: {0}")]
    Compare(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dae(#[from] DaeError),
    #[error("manifest error in {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// `‖e − p‖₂ / ‖e‖₂`.
pub fn relative_error(exact: &[f64], predicted: &[f64]) -> Result<f64, ReportError> {
    if exact.len() != predicted.len() {
        return Err(ReportError::LengthMismatch(exact.len(), predicted.len()));
    }
    if exact.is_empty() {
        return Err(ReportError::Empty);
    }
    let den: f64 = exact.iter().map(|e| e * e).sum();
    if den == 0.0 {
        return Err(ReportError::ZeroNorm);
    }
    let num: f64 = exact
        .iter()
        .zip(predicted)
        .map(|(e, p)| (e - p) * (e - p))
        .sum();
    Ok((num / den).sqrt())
}

/// Pointwise `|e − p|`.
pub fn absolute_error_trajectory(
    exact: &[f64],
    predicted: &[f64],
) -> Result<Vec<f64>, ReportError> {
    if exact.len() != predicted.len() {
        return Err(ReportError::LengthMismatch(exact.len(), predicted.len()));
    }
    Ok(exact
        .iter()
        .zip(predicted)
        .map(|(e, p)| (e - p).abs())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    pub times: Vec<f64>,
}

impl EvaluationGrid {
    pub const DEFAULT_POINTS: usize = 1000;

    /// `n` evenly spaced times on `[0, t_end]`, both ends included.
    pub fn new(t_end: f64, n: usize) -> Result<Self, ReportError> {
        if n < 2 || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(ReportError::Grid);
        }
        let h = t_end / (n - 1) as f64;
        let times = (0..n)
            .map(|i| if i + 1 == n { t_end } else { i as f64 * h })
            .collect();
        Ok(Self { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Absolute constraint residuals on a grid; `levels[0]` is level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftCurves {
    pub times: Vec<f64>,
    pub levels: [Vec<f64>; 3],
}

impl DriftCurves {
    pub fn level(&self, form: IndexForm) -> &[f64] {
        &self.levels[form.level() as usize - 1]
    }

    pub fn max(&self) -> f64 {
        self.levels.iter().flatten().fold(0.0f64, |m, &v| m.max(v))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,level1,level2,level3")?;
        for (i, t) in self.times.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                format_float(*t),
                format_float(self.levels[0][i]),
                format_float(self.levels[1][i]),
                format_float(self.levels[2][i])
            )?;
        }
        Ok(())
    }
}

/// Every constraint level of `system`, evaluated on the networks' values and
/// time derivatives. The trained form only decides which row of the 3×3
/// comparison these curves fill.
pub fn driftoff_curves(
    pair: &SolverPair,
    system: &DaeSystem,
    grid: &EvaluationGrid,
) -> Result<DriftCurves, ReportError> {
    let mut levels: [Vec<f64>; 3] = Default::default();
    for &t in &grid.times {
        let (v, d) = pair.eval(t)?;
        let sample = StateSample::from_full(t, &v, &d, system.n_u());
        for form in [IndexForm::One, IndexForm::Two, IndexForm::Three] {
            let r = system.constraint_residual(form, &sample)?;
            levels[form.level() as usize - 1].push(r.abs());
        }
    }
    Ok(DriftCurves {
        times: grid.times.clone(),
        levels,
    })
}

/// Largest 2-norm of the stacked residual over the given times.
pub fn max_residual_norm(
    pair: &SolverPair,
    system: &DaeSystem,
    form: IndexForm,
    times: &[f64],
) -> Result<f64, ReportError> {
    let mut worst = 0.0f64;
    for &t in times {
        let (v, d) = pair.eval(t)?;
        let sample = StateSample::from_full(t, &v, &d, system.n_u());
        let r = system.residual(form, &sample)?;
        worst = worst.max(r.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: TrainingConfig,
    pub variables: Vec<String>,
    pub times: Vec<f64>,
    /// `ae[j][i]` is the error of variable `j` at `times[i]`.
    pub ae: Vec<Vec<f64>>,
    pub re: Vec<f64>,
    pub drift: DriftCurves,
    pub trace: TrainingTrace,
    /// Largest stacked residual norm over the collocation points after training.
    pub training_residual: f64,
}

impl RunReport {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn re_of(&self, variable: &str) -> Option<f64> {
        self.variables
            .iter()
            .position(|v| v == variable)
            .map(|j| self.re[j])
    }
}

/// Evaluates a trained pair against the exact solution.
pub fn evaluate_run(
    config: &TrainingConfig,
    pair: &SolverPair,
    trace: TrainingTrace,
    collocation_times: &[f64],
    grid: &EvaluationGrid,
) -> Result<RunReport, ReportError> {
    let system = DaeSystem::by_kind(config.system);
    let n = system.n_vars();
    let mut exact = vec![Vec::with_capacity(grid.len()); n];
    let mut predicted = vec![Vec::with_capacity(grid.len()); n];
    for &t in &grid.times {
        let e = system.exact(t);
        let (p, _) = pair.eval(t)?;
        for j in 0..n {
            exact[j].push(e[j]);
            predicted[j].push(p[j]);
        }
    }
    let mut ae = Vec::with_capacity(n);
    let mut re = Vec::with_capacity(n);
    for j in 0..n {
        ae.push(absolute_error_trajectory(&exact[j], &predicted[j])?);
        re.push(relative_error(&exact[j], &predicted[j])?);
    }
    Ok(RunReport {
        config: config.clone(),
        variables: system.variables().iter().map(|s| s.to_string()).collect(),
        times: grid.times.clone(),
        ae,
        re,
        drift: driftoff_curves(pair, &system, grid)?,
        trace,
        training_residual: max_residual_norm(pair, &system, config.form, collocation_times)?,
    })
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn ae_csv(report: &RunReport) -> String {
    let mut s = String::from("t");
    for v in &report.variables {
        s.push(',');
        s.push_str(v);
    }
    s.push('\n');
    for (i, t) in report.times.iter().enumerate() {
        s.push_str(&format_float(*t));
        for curve in &report.ae {
            s.push(',');
            s.push_str(&format_float(curve[i]));
        }
        s.push('\n');
    }
    s
}

pub fn re_csv(report: &RunReport) -> String {
    let mut s = String::from("variable,re\n");
    for (v, re) in report.variables.iter().zip(&report.re) {
        let _ = writeln!(s, "{v},{}", format_float(*re));
    }
    s
}

/// AE sum and maximum per variable next to the RE.
pub fn summary_csv(report: &RunReport) -> String {
    let mut s = String::from("variable,ae_sum,ae_max,re\n");
    for ((v, curve), re) in report.variables.iter().zip(&report.ae).zip(&report.re) {
        let sum: f64 = curve.iter().sum();
        let max = curve.iter().fold(0.0f64, |m, &x| m.max(x));
        let _ = writeln!(
            s,
            "{v},{},{},{}",
            format_float(sum),
            format_float(max),
            format_float(*re)
        );
    }
    s
}

fn to_string(write: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> String {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Status file written with every run, complete or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub system: String,
    pub form: u8,
    pub net: NetKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_residual: Option<String>,
    pub files: Vec<String>,
}

impl Manifest {
    pub const FILE: &'static str = "MANIFEST";

    fn for_config(config: &TrainingConfig) -> Self {
        Self {
            status: "incomplete".into(),
            system: config.system.name().into(),
            form: config.form.level(),
            net: config.net,
            seed: config.seed,
            error: None,
            iterations: None,
            termination: None,
            final_loss: None,
            training_residual: None,
            files: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }

    pub fn read(dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| ReportError::Manifest {
            path,
            message: e.to_string(),
        })
    }

    fn write(&self, dir: &Path) -> Result<(), ReportError> {
        let text = toml::to_string(self).map_err(|e| ReportError::Manifest {
            path: dir.join(Self::FILE),
            message: e.to_string(),
        })?;
        write_atomic(&dir.join(Self::FILE), text.as_bytes())?;
        Ok(())
    }
}

/// Writes every CSV and SVG for `report` into `dir`; returns the file names.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<String>, ReportError> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = vec![
        ("ae.csv".into(), ae_csv(report)),
        ("re.csv".into(), re_csv(report)),
        ("summary.csv".into(), summary_csv(report)),
        (
            "driftoff.csv".into(),
            to_string(|b| report.drift.write_csv(b)),
        ),
        ("trace.csv".into(), to_string(|b| report.trace.write_csv(b))),
    ];
    files.extend(emit_plots(report)?);
    let mut names = Vec::new();
    for (name, body) in files {
        write_atomic(&dir.join(&name), body.as_bytes())?;
        names.push(name);
    }
    Ok(names)
}

/// Trains per `config`, evaluates on `grid` and writes the run directory.
///
/// A `MANIFEST` is always written; on failure it records the error and the
/// artifacts that were produced before it.
pub fn run_config(
    config: &TrainingConfig,
    out: &Path,
    grid: &EvaluationGrid,
) -> Result<RunReport, ReportError> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::for_config(config);
    write_atomic(
        &out.join("config.toml"),
        config.to_toml_string()?.as_bytes(),
    )?;
    manifest.files.push("config.toml".into());

    let result = (|| -> Result<RunReport, ReportError> {
        let outcome = train(config)?;
        let mut ckpt = Vec::new();
        outcome.pair.differential.write_checkpoint(&mut ckpt)?;
        write_atomic(&out.join("differential.ckpt"), &ckpt)?;
        manifest.files.push("differential.ckpt".into());
        if let Some(a) = &outcome.pair.algebraic {
            ckpt.clear();
            a.write_checkpoint(&mut ckpt)?;
            write_atomic(&out.join("algebraic.ckpt"), &ckpt)?;
            manifest.files.push("algebraic.ckpt".into());
        }
        let report = evaluate_run(
            config,
            &outcome.pair,
            outcome.trace,
            &outcome.collocation.residual,
            grid,
        )?;
        manifest.files.extend(write_report(&report, out)?);
        Ok(report)
    })();

    match &result {
        Ok(report) => {
            manifest.status = "complete".into();
            manifest.iterations = Some(report.trace.iterations);
            manifest.termination = Some(report.trace.termination.to_string());
            manifest.final_loss = report.trace.final_loss().map(|l| format_float(l.total));
            manifest.training_residual = Some(format_float(report.training_residual));
        }
        Err(e) => manifest.error = Some(e.to_string()),
    }
    manifest.write(out)?;
    result
}

/// Loads the config at `config_path`, optionally overriding its seed, and runs it.
pub fn run_experiment(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<RunReport, ReportError> {
    let mut config = TrainingConfig::from_file(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let grid = EvaluationGrid::new(config.t_end, EvaluationGrid::DEFAULT_POINTS)?;
    run_config(&config, out, &grid)
}

/// RE per (model, index form) for one system.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub system: String,
    pub variables: Vec<String>,
    /// Keyed by (model, level); rows sort as KAN before MLP, index 3 first.
    pub rows: BTreeMap<(NetKind, std::cmp::Reverse<u8>), Vec<f64>>,
}

impl ComparisonTable {
    fn model_label(kind: NetKind) -> &'static str {
        match kind {
            NetKind::Kan => "DAE-KAN",
            NetKind::Mlp => "PINN",
        }
    }

    pub fn get(&self, kind: NetKind, form: IndexForm) -> Option<&[f64]> {
        self.rows
            .get(&(kind, std::cmp::Reverse(form.level())))
            .map(Vec::as_slice)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,index");
        for v in &self.variables {
            s.push(',');
            s.push_str(v);
        }
        s.push('\n');
        for ((kind, level), re) in &self.rows {
            let _ = write!(s, "{},{}", Self::model_label(*kind), level.0);
            for x in re {
                s.push(',');
                s.push_str(&format_float(*x));
            }
            s.push('\n');
        }
        s
    }
}

fn parse_re_csv(path: &Path) -> Result<Vec<(String, f64)>, ReportError> {
    let text = fs::read_to_string(path)?;
    let bad = |message: String| ReportError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: expected `variable,re`", n + 1)))?;
        let value = value
            .parse()
            .map_err(|_| bad(format!("line {}: bad number `{value}`", n + 1)))?;
        rows.push((name.to_string(), value));
    }
    Ok(rows)
}

/// Builds the RE table from completed run directories of a single system.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<ComparisonTable, ReportError> {
    let mut table: Option<ComparisonTable> = None;
    for dir in dirs {
        let m = Manifest::read(dir)?;
        if !m.is_complete() {
            return Err(ReportError::Compare(format!(
                "{} is incomplete",
                dir.display()
            )));
        }
        let re = parse_re_csv(&dir.join("re.csv"))?;
        let variables: Vec<String> = re.iter().map(|(v, _)| v.clone()).collect();
        let t = table.get_or_insert_with(|| ComparisonTable {
            system: m.system.clone(),
            variables: variables.clone(),
            rows: BTreeMap::new(),
        });
        if t.system != m.system || t.variables != variables {
            return Err(ReportError::Compare(format!(
                "{} is a {} run, expected {}",
                dir.display(),
                m.system,
                t.system
            )));
        }
        let key = (m.net, std::cmp::Reverse(m.form));
        if t.rows.contains_key(&key) {
            return Err(ReportError::Compare(format!(
                "duplicate {} index-{} run at {}",
                m.net,
                m.form,
                dir.display()
            )));
        }
        t.rows.insert(key, re.into_iter().map(|(_, x)| x).collect());
    }
    table.ok_or_else(|| ReportError::Compare("no runs given".into()))
}

/// Reads `driftoff.csv` from a run directory.
pub fn read_drift_csv(path: &Path) -> Result<DriftCurves, ReportError> {
    let text = fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut levels: [Vec<f64>; 3] = Default::default();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        match cells {
            Ok(c) if c.len() == 4 => {
                times.push(c[0]);
                for l in 0..3 {
                    levels[l].push(c[l + 1]);
                }
            }
            _ => {
                return Err(ReportError::Manifest {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected four numbers", n + 1),
                })
            }
        }
    }
    Ok(DriftCurves { times, levels })
}

// ---- plotting ----

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
/// Zeros are drawn at this floor on log axes.
const LOG_FLOOR: f64 = 1e-18;

struct Panel<'a> {
    title: String,
    x: &'a [f64],
    curves: Vec<(String, &'a [f64])>,
}

fn decade_range(curves: &[(String, &[f64])]) -> (i32, i32) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, c) in curves {
        for &v in c.iter() {
            let v = v.max(LOG_FLOOR).log10();
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        return (-1, 0);
    }
    let (lo, hi) = (lo.floor() as i32, hi.ceil() as i32);
    if lo == hi {
        (lo - 1, hi + 1)
    } else {
        (lo, hi)
    }
}

fn draw_panel(svg: &mut String, panel: &Panel<'_>, ox: f64, oy: f64, w: f64, h: f64) {
    let (ml, mr, mt, mb) = (62.0, 12.0, 26.0, 36.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let (x0, x1) = (panel.x[0], *panel.x.last().unwrap());
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let (d0, d1) = decade_range(&panel.curves);
    let px = |x: f64| ox + ml + (x - x0) / xspan * pw;
    let py = |v: f64| {
        let l = v.max(LOG_FLOOR).log10();
        oy + mt + ph - (l - d0 as f64) / (d1 - d0) as f64 * ph
    };
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"##,
        ox + ml + pw / 2.0,
        oy + 16.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000"/>"##,
        ox + ml,
        oy + mt,
        pw,
        ph
    );
    let step = ((d1 - d0) as f64 / 6.0).ceil().max(1.0) as i32;
    let mut d = d0;
    while d <= d1 {
        let y = oy + mt + ph - (d - d0) as f64 / (d1 - d0) as f64 * ph;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##,
            ox + ml,
            ox + ml + pw
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">1e{d}</text>"##,
            ox + ml - 4.0,
            y + 3.0
        );
        d += step;
    }
    for i in 0..=4 {
        let x = x0 + xspan * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
            px(x),
            oy + mt + ph + 14.0,
            trim_number(x)
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">t</text>"##,
        ox + ml + pw / 2.0,
        oy + h - 6.0
    );
    for (k, (label, c)) in panel.curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        for (&x, &v) in panel.x.iter().zip(c.iter()) {
            let _ = write!(pts, "{:.2},{:.2} ", px(x), py(v));
        }
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"##,
            pts.trim_end()
        );
        if panel.curves.len() > 1 {
            let ly = oy + mt + 12.0 + 13.0 * k as f64;
            let lx = ox + ml + pw - 70.0;
            let _ = writeln!(
                svg,
                r##"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="2"/>"##,
                ly - 4.0,
                lx + 16.0,
                ly - 4.0
            );
            let _ = writeln!(
                svg,
                r##"<text x="{:.2}" y="{ly:.2}" font-size="10">{}</text>"##,
                lx + 20.0,
                escape(label)
            );
        }
    }
}

fn trim_number(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grid of log-scale panels as a standalone SVG document.
fn render_grid(panels: &[Panel<'_>], columns: usize, title: &str) -> Result<String, ReportError> {
    if panels.is_empty() {
        return Err(ReportError::Empty);
    }
    for p in panels {
        if p.x.is_empty() || p.curves.iter().any(|(_, c)| c.len() != p.x.len()) {
            return Err(ReportError::Empty);
        }
    }
    let (w, h) = (360.0, 260.0);
    let rows = panels.len().div_ceil(columns);
    let cols = columns.min(panels.len());
    let (tw, th) = (w * cols as f64, h * rows as f64 + 30.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" viewBox="0 0 {tw} {th}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#fff"/>"##);
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="20" font-size="15" text-anchor="middle">{}</text>"##,
        tw / 2.0,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        draw_panel(&mut svg, p, c as f64 * w, 30.0 + r as f64 * h, w, h);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One log-scale AE plot per variable plus the run's drift-off curves.
pub fn emit_plots(report: &RunReport) -> Result<Vec<(String, String)>, ReportError> {
    if report.times.is_empty() {
        return Err(ReportError::Empty);
    }
    let label = format!(
        "{} {} {}",
        report.config.net,
        report.config.system.name(),
        report.config.form
    );
    let mut out = Vec::new();
    for (v, curve) in report.variables.iter().zip(&report.ae) {
        let panel = Panel {
            title: format!("AE of {v}"),
            x: &report.times,
            curves: vec![(v.clone(), curve.as_slice())],
        };
        out.push((format!("ae_{v}.svg"), render_grid(&[panel], 1, &label)?));
    }
    out.push((
        "driftoff.svg".into(),
        render_drift_row(&report.drift, &label)?,
    ));
    Ok(out)
}

fn drift_panels<'a>(curves: &'a DriftCurves, trained: &str) -> Vec<Panel<'a>> {
    (1..=3)
        .rev()
        .map(|level| Panel {
            title: format!("{trained}: level-{level} residual"),
            x: &curves.times,
            curves: vec![(
                format!("level {level}"),
                curves.levels[level - 1].as_slice(),
            )],
        })
        .collect()
}

fn render_drift_row(curves: &DriftCurves, title: &str) -> Result<String, ReportError> {
    render_grid(&drift_panels(curves, "trained"), 3, title)
}

/// 3×3 panel: rows are the trained index form (3, 2, 1), columns the
/// evaluated constraint level (3, 2, 1).
pub fn drift_panel_svg(
    rows: &[(IndexForm, DriftCurves)],
    title: &str,
) -> Result<String, ReportError> {
    let mut panels = Vec::new();
    for (form, curves) in rows {
        panels.extend(drift_panels(curves, &format!("{form}")));
    }
    render_grid(&panels, 3, title)
}

/// Writes the comparison table and, for every model with all three forms,
/// a 3×3 drift-off panel next to it.
pub fn write_comparison(dirs: &[PathBuf], out: &Path) -> Result<ComparisonTable, ReportError> {
    let table = compare_runs(dirs)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(out, table.to_csv().as_bytes())?;

    let mut by_model: BTreeMap<NetKind, Vec<(IndexForm, PathBuf)>> = BTreeMap::new();
    for dir in dirs {
        let m = Manifest::read(dir)?;
        by_model
            .entry(m.net)
            .or_default()
            .push((IndexForm::from_level(m.form)?, dir.clone()));
    }
    let stem = out
        .file_stem()
        .map_or_else(|| "table".to_string(), |s| s.to_string_lossy().into_owned());
    for (kind, mut runs) in by_model {
        if runs.len() != 3 {
            continue;
        }
        runs.sort_by_key(|(f, _)| std::cmp::Reverse(*f));
        let mut rows = Vec::new();
        for (form, dir) in runs {
            rows.push((form, read_drift_csv(&dir.join("driftoff.csv"))?));
        }
        let svg = drift_panel_svg(&rows, &format!("{kind} {} drift-off", table.system))?;
        write_atomic(
            &out.with_file_name(format!("{stem}_{kind}_driftoff.svg")),
            svg.as_bytes(),
        )?;
    }
    Ok(table)
}
