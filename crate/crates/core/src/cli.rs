//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed validation, 2 usage or configuration
//! error, 3 numerical non-convergence. CSV output is preceded by a
//! `# qstab <schema> v1` line and rows are sorted by the swept value.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::belief::{belief_space, ObservationScheme, QueueUpdate};
use crate::error::{Error, Result};
use crate::mdp::{extract_switching_curve, solve_rvi, violations_in_belief_space, RviOptions};
use crate::model::{mu_star_full, mu_star_no, ServerId, SystemConfig};
use crate::oracle::{filter_gap, sample_trajectory};
use crate::output::{sig6, write_output, CsvTable};
use crate::policy::{FiniteController, SwitchingCurve, DEFAULT_EPSILON};
use crate::qbd::{drift_check, stability_analysis, QbdBlocks, DENSE_LIMIT};
use crate::simulate::{estimate_mu_star, run, write_trace_csv, Policy, SimConfig, SimMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

/// Row order of the Table 1 preset.
pub const TABLE1_RHO1: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Parser)]
#[command(name = "qstab", version, about = "Stability bounds for a queue served by two Markov-modulated servers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo throughput estimates.
    Simulate(SimulateArgs),
    /// Relative value iteration for the state, output or queue scheme.
    Solve(SolveArgs),
    /// Stability bound of a finite-state controller.
    Qbd(QbdArgs),
    /// One-dimensional parameter sweep of simulate, solve or qbd.
    Sweep(SweepArgs),
    /// Closed forms, filter-versus-enumeration and ordering checks.
    Validate(ValidateArgs),
}

/// System parameters: a JSON config, or the benchmark servers with the given
/// correlations.
#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    /// JSON system configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Correlation of server 1 (benchmark servers).
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Correlation of server 2; defaults to the value of --rho.
    #[arg(long, allow_negative_numbers = true)]
    pub rho2: Option<f64>,
    /// Arrival probability per slot.
    #[arg(long)]
    pub lambda: Option<f64>,
}

impl SystemArgs {
    fn load(&self, allow_unordered: bool) -> Result<SystemConfig> {
        let cfg = match &self.config {
            Some(path) => {
                if self.rho.is_some() || self.rho2.is_some() {
                    return Err(Error::Config("--rho/--rho2 cannot be combined with --config".into()));
                }
                if allow_unordered {
                    load_unordered(path)?
                } else {
                    SystemConfig::from_json_file(path)?
                }
            }
            None => {
                let rho = self.rho.unwrap_or(0.5);
                SystemConfig::benchmark(rho, self.rho2.unwrap_or(rho), 0.5)?
            }
        };
        match self.lambda {
            Some(l) => cfg.with_lambda(l),
            None => Ok(cfg),
        }
    }

    /// Benchmark system with swept parameter `param` set to `value`.
    fn swept(&self, param: SweepParam, value: f64) -> Result<SystemConfig> {
        if self.config.is_some() && param != SweepParam::Lambda {
            return Err(Error::Config("correlation sweeps use the benchmark servers; drop --config".into()));
        }
        let rho1 = self.rho.unwrap_or(0.5);
        let rho2 = self.rho2.unwrap_or(rho1);
        match param {
            SweepParam::Lambda => self.load(false)?.with_lambda(value),
            SweepParam::Rho => SystemConfig::benchmark(value, value, self.lambda.unwrap_or(0.5)),
            SweepParam::Rho1 => SystemConfig::benchmark(value, rho2, self.lambda.unwrap_or(0.5)),
            SweepParam::Rho2 => SystemConfig::benchmark(rho1, value, self.lambda.unwrap_or(0.5)),
        }
    }
}

fn load_unordered(path: &Path) -> Result<SystemConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: crate::model::ConfigDoc =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    doc.allow_unordered = true;
    doc.into_config()
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Observation scheme, or `all` for the five schemes.
    #[arg(long, default_value = "all")]
    pub scheme: String,
    /// Sweep of rho1 = rho2 as `from:to:step`.
    #[arg(long)]
    pub rho_sweep: Option<String>,
    #[arg(long, default_value_t = 5_000_000)]
    pub horizon: u64,
    /// Number of replications.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// First seed; replications use consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Discarded initial slots; defaults to min(10000, horizon / 10).
    #[arg(long)]
    pub warmup: Option<u64>,
    /// `saturated` or `queueing`.
    #[arg(long, default_value = "saturated")]
    pub mode: String,
    /// `myopic`, `optimal`, `server1`, `server2` or `controller`.
    #[arg(long, default_value = "myopic")]
    pub policy: String,
    /// Controller JSON for `--policy controller`.
    #[arg(long)]
    pub controller: Option<PathBuf>,
    /// Grid cells for `--policy optimal`.
    #[arg(long, default_value_t = 200)]
    pub cells: usize,
    /// Per-slot trace CSV of the first replication (single point only).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long)]
    pub scheme: Option<String>,
    /// The four Table 1 rows for all three schemes.
    #[arg(long)]
    pub table1: bool,
    #[arg(long, default_value_t = crate::mdp::DEFAULT_CELLS)]
    pub cells: usize,
    #[arg(long, default_value_t = crate::mdp::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = crate::mdp::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Unchanged-queue successor: `mixture` or `posterior`.
    #[arg(long, default_value = "mixture")]
    pub queue_update: String,
    /// Switching curve CSV.
    #[arg(long)]
    pub emit_curve: Option<PathBuf>,
    /// Value table CSV.
    #[arg(long)]
    pub value_csv: Option<PathBuf>,
    /// Finite-state controller JSON following the solved curve.
    #[arg(long)]
    pub controller_out: Option<PathBuf>,
    #[arg(long = "controller-M", default_value_t = 100)]
    pub controller_m: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QbdArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// `myopic`, `optimal` or `file`.
    #[arg(long, default_value = "myopic")]
    pub policy: String,
    /// Controller JSON for `--policy file`.
    #[arg(long)]
    pub controller: Option<PathBuf>,
    #[arg(long = "M", default_value_t = 100)]
    pub m: usize,
    /// Controller sizes as `from:to[:step]`.
    #[arg(long = "M-sweep")]
    pub m_sweep: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Grid cells for `--policy optimal`.
    #[arg(long, default_value_t = 200)]
    pub cells: usize,
    /// Directory for dense block triplet CSVs (small M only).
    #[arg(long)]
    pub export_blocks: Option<PathBuf>,
    /// JSON summary instead of CSV (single M only).
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Both correlations.
    Rho,
    Rho1,
    Rho2,
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepTarget {
    Simulate,
    Solve,
    Qbd,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_enum)]
    pub target: SweepTarget,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// `from:to:step`.
    #[arg(long)]
    pub range: String,
    #[arg(long, default_value = "output")]
    pub scheme: String,
    #[arg(long, default_value_t = 200)]
    pub cells: usize,
    #[arg(long, default_value_t = crate::mdp::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 4)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "myopic")]
    pub policy: String,
    #[arg(long = "M", default_value_t = 40)]
    pub m: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Reduced suite.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `from:to:step` into inclusive grid points.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let num =
        |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?} in range {text:?}")));
    let (from, to, step) = match parts.as_slice() {
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        [a, b] => (num(a)?, num(b)?, 1.0),
        _ => return Err(Error::Config(format!("range {text:?} is not from:to[:step]"))),
    };
    if !(step > 0.0) || from > to {
        return Err(Error::Config(format!("range {text:?} needs step > 0 and from <= to")));
    }
    let count = ((to - from) / step + 1e-9).floor() as usize;
    // k * step avoids accumulated rounding; values are snapped to 12 digits.
    Ok((0..=count).map(|k| ((from + k as f64 * step) * 1e12).round() / 1e12).collect())
}

fn parse_m_range(text: &str) -> Result<Vec<usize>> {
    let pts = parse_range(text)?;
    if pts.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
        return Err(Error::Config(format!("M range {text:?} must list positive integers")));
    }
    Ok(pts.iter().map(|&x| x as usize).collect())
}

fn parse_schemes(text: &str) -> Result<Vec<ObservationScheme>> {
    if text.eq_ignore_ascii_case("all") {
        return Ok(ObservationScheme::ALL.to_vec());
    }
    text.split(',').map(|s| s.trim().parse::<ObservationScheme>()).collect()
}

fn parse_queue_update(text: &str) -> Result<QueueUpdate> {
    match text {
        "mixture" => Ok(QueueUpdate::Mixture),
        "posterior" => Ok(QueueUpdate::Posterior),
        other => Err(Error::Config(format!("unknown queue update {other:?}; use mixture or posterior"))),
    }
}

fn load_controller(path: &Path) -> Result<FiniteController> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read controller {}: {e}", path.display())))?;
    FiniteController::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Simulation policy by name for one scheme and system.
fn resolve_sim_policy(
    name: &str,
    scheme: ObservationScheme,
    system: &SystemConfig,
    cells: usize,
    controller: Option<&Path>,
) -> Result<Policy> {
    Ok(match name {
        "myopic" => Policy::Myopic,
        "server1" => Policy::Fixed(ServerId::One),
        "server2" => Policy::Fixed(ServerId::Two),
        "optimal" if ObservationScheme::PARTIAL.contains(&scheme) => {
            let table = solve_rvi(scheme, system, RviOptions::with_cells(cells))?;
            Policy::Curve(extract_switching_curve(&table))
        }
        "optimal" => Policy::Myopic,
        "controller" => {
            let path = controller.ok_or_else(|| Error::Config("--policy controller needs --controller".into()))?;
            Policy::Controller(load_controller(path)?)
        }
        other => return Err(Error::Config(format!("unknown policy {other:?}"))),
    })
}

/// Controller of size `m` by name.
fn resolve_controller(
    name: &str,
    system: &SystemConfig,
    m: usize,
    epsilon: f64,
    cells: usize,
    file: Option<&Path>,
) -> Result<FiniteController> {
    match name {
        "myopic" if system.identical_servers() => FiniteController::symmetric_myopic(system, m, epsilon),
        "myopic" => FiniteController::from_curve(system, &SwitchingCurve::myopic(system, m)?, m, epsilon),
        "optimal" => {
            let table = solve_rvi(ObservationScheme::Output, system, RviOptions::with_cells(cells))?;
            FiniteController::from_curve(system, &extract_switching_curve(&table), m, epsilon)
        }
        "file" => {
            let path = file.ok_or_else(|| Error::Config("--policy file needs --controller".into()))?;
            load_controller(path)
        }
        other => Err(Error::Config(format!("unknown controller policy {other:?}"))),
    }
}

fn sim_mode(text: &str) -> Result<SimMode> {
    match text {
        "saturated" => Ok(SimMode::Saturated),
        "queueing" => Ok(SimMode::Queueing),
        other => Err(Error::Config(format!("unknown mode {other:?}; use saturated or queueing"))),
    }
}

/// Throughput estimate and stderr; NaN for non-ergodic frozen environments.
fn sim_point(
    system: &SystemConfig,
    scheme: ObservationScheme,
    policy: &Policy,
    horizon: u64,
    seeds: &[u64],
    mode: SimMode,
    warmup: Option<u64>,
) -> Result<(f64, f64, Option<f64>)> {
    if system.server1.chain.rho() >= 1.0 || system.server2.chain.rho() >= 1.0 {
        log::warn!("frozen environment is not ergodic; reporting nan");
        return Ok((f64::NAN, f64::NAN, None));
    }
    if mode == SimMode::Saturated && warmup.is_none() {
        let (m, se) = estimate_mu_star(system, scheme, policy, horizon, seeds)?;
        return Ok((m, se, None));
    }
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let mut sim = SimConfig::new(*system, scheme, horizon, seed, mode);
            if let Some(w) = warmup {
                sim.warmup = w;
            }
            run(&sim, policy)
        })
        .collect::<Result<Vec<_>>>()?;
    let tp: Vec<f64> = if results.len() == 1 {
        results[0].batch_throughputs.clone()
    } else {
        results.iter().map(|r| r.throughput).collect()
    };
    let n = tp.len() as f64;
    let mean_tp = results.iter().map(|r| r.throughput).sum::<f64>() / results.len() as f64;
    let m = tp.iter().sum::<f64>() / n;
    let se = (tp.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let mq = results
        .iter()
        .map(|r| r.mean_queue)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean_tp, se, mq))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let schemes = parse_schemes(&a.scheme)?;
    let mode = sim_mode(&a.mode)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
    let rhos: Vec<Option<f64>> = match &a.rho_sweep {
        Some(r) => parse_range(r)?.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let points: Vec<(Option<f64>, ObservationScheme)> =
        rhos.iter().flat_map(|&r| schemes.iter().map(move |&s| (r, s))).collect();

    if let Some(trace_path) = &a.trace {
        if points.len() != 1 {
            return Err(Error::Config("--trace needs a single scheme and no sweep".into()));
        }
        let system = a.system.load(true)?;
        let policy = resolve_sim_policy(&a.policy, schemes[0], &system, a.cells, a.controller.as_deref())?;
        let mut sim = SimConfig::new(system, schemes[0], a.horizon, seeds[0], mode);
        if let Some(w) = a.warmup {
            sim.warmup = w;
        }
        sim.record_trace = true;
        let res = run(&sim, &policy)?;
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, res.trace.as_deref().unwrap_or_default())?;
        write_output(Some(trace_path), &String::from_utf8_lossy(&buf))?;
    }

    let rows = points
        .par_iter()
        .map(|&(rho, scheme)| {
            let system = match rho {
                Some(r) => a.system.swept(SweepParam::Rho, r)?,
                None => a.system.load(true)?,
            };
            let rho_value = system.server1.chain.rho();
            let policy = resolve_sim_policy(&a.policy, scheme, &system, a.cells, a.controller.as_deref())?;
            let (m, se, mq) = sim_point(&system, scheme, &policy, a.horizon, &seeds, mode, a.warmup)?;
            Ok((rho_value, scheme, m, se, mq))
        })
        .collect::<Result<Vec<_>>>()?;

    let queueing = mode == SimMode::Queueing;
    let mut header = vec!["rho", "scheme", "policy", "throughput", "stderr"];
    if queueing {
        header.push("mean_queue");
    }
    let mut t = CsvTable::new(if queueing { "simulate-queueing" } else { "simulate" }, &header);
    for (rho, scheme, m, se, mq) in rows {
        let mut row = vec![sig6(rho), scheme.name().to_string(), a.policy.clone(), sig6(m), sig6(se)];
        if queueing {
            row.push(mq.map_or("nan".into(), sig6));
        }
        t.push(row)?;
    }
    write_output(a.out.as_deref(), &t.to_string_lossy())?;
    Ok(EXIT_OK)
}

fn cmd_solve(a: &SolveArgs) -> Result<i32> {
    let opts = RviOptions {
        cells: a.cells,
        tol: a.tol,
        max_iters: a.max_iters,
        queue_update: parse_queue_update(&a.queue_update)?,
    };
    if a.table1 {
        let jobs: Vec<(f64, ObservationScheme)> =
            TABLE1_RHO1.iter().flat_map(|&r| ObservationScheme::PARTIAL.iter().map(move |&s| (r, s))).collect();
        let lambda = a.system.lambda.unwrap_or(0.5);
        let rows = jobs
            .par_iter()
            .map(|&(r, s)| {
                let cfg = SystemConfig::benchmark(r, 0.5, lambda)?;
                Ok((r, s, solve_rvi(s, &cfg, opts)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = CsvTable::new("table1", &["rho1", "rho2", "lambda", "scheme", "mu_star", "iterations", "span"]);
        for (r, s, v) in rows {
            t.push(vec![
                sig6(r),
                "0.5".into(),
                sig6(lambda),
                s.name().into(),
                sig6(v.mu_star),
                v.iterations.to_string(),
                sig6(v.residual_span),
            ])?;
        }
        write_output(a.out.as_deref(), &t.to_string_lossy())?;
        return Ok(EXIT_OK);
    }

    let scheme: ObservationScheme =
        a.scheme.as_deref().ok_or_else(|| Error::Config("solve needs --scheme or --table1".into()))?.parse()?;
    if matches!(scheme, ObservationScheme::Full | ObservationScheme::None) {
        return Err(Error::Config(format!("scheme {scheme} has a closed form; use validate")));
    }
    let system = a.system.load(true)?;
    let table = solve_rvi(scheme, &system, opts)?;
    let curve = extract_switching_curve(&table);
    let violations = violations_in_belief_space(&curve, &system)?;
    if let Some(path) = &a.emit_curve {
        let mut t = CsvTable::new("switching-curve", &["omega1", "omega2_star"]);
        for (c, th) in curve.columns().iter().zip(curve.thresholds()) {
            t.push(vec![sig6(*c), th.map_or("nan".into(), sig6)])?;
        }
        write_output(Some(path), &t.to_string_lossy())?;
    }
    if let Some(path) = &a.value_csv {
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_output(Some(path), &String::from_utf8_lossy(&buf))?;
    }
    if let Some(path) = &a.controller_out {
        let ctrl = FiniteController::from_curve(&system, &curve, a.controller_m, a.epsilon)?;
        write_output(Some(path), &ctrl.to_json()?)?;
    }
    let s = table.summary();
    let doc = json!({
        "scheme": s.scheme,
        "mu_star": s.mu_star,
        "iterations": s.iterations,
        "span": s.span,
        "M_cells": s.m_cells,
        "tol": s.tol,
        "rho1": system.server1.chain.rho(),
        "rho2": system.server2.chain.rho(),
        "lambda": system.lambda,
        "monotonicity_violations": violations.len(),
    });
    write_output(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    Ok(EXIT_OK)
}

fn cmd_qbd(a: &QbdArgs) -> Result<i32> {
    let system = a.system.load(true)?;
    let ms = match &a.m_sweep {
        Some(r) => parse_m_range(r)?,
        None => vec![a.m],
    };
    if a.policy == "file" && ms.len() > 1 {
        return Err(Error::Config("a controller file fixes M; drop --M-sweep".into()));
    }
    let results = ms
        .par_iter()
        .map(|&m| {
            let ctrl = resolve_controller(&a.policy, &system, m, a.epsilon, a.cells, a.controller.as_deref())?;
            Ok((ctrl.m(), stability_analysis(&ctrl, &system)?, ctrl))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &a.export_blocks {
        let (_, _, ctrl) = &results[0];
        if ms.len() > 1 || ctrl.m() > DENSE_LIMIT {
            return Err(Error::Config(format!("--export-blocks needs a single M <= {DENSE_LIMIT}")));
        }
        std::fs::create_dir_all(dir)?;
        let blocks = QbdBlocks::build(ctrl, &system)?;
        for name in QbdBlocks::BLOCK_NAMES {
            let mut buf = Vec::new();
            blocks.write_triplets(name, &mut buf)?;
            write_output(Some(&dir.join(format!("{name}.csv"))), &String::from_utf8_lossy(&buf))?;
        }
    }
    if a.json {
        if results.len() != 1 {
            return Err(Error::Config("--json needs a single M".into()));
        }
        let rep = &results[0].1;
        write_output(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(rep)?))?;
        return Ok(EXIT_OK);
    }
    let mut t = CsvTable::new("qbd", &["M", "mu_star"]);
    for (m, rep, _) in &results {
        t.push(vec![m.to_string(), sig6(rep.mu_star)])?;
    }
    write_output(a.out.as_deref(), &t.to_string_lossy())?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let values = parse_range(&a.range)?;
    let schemes = parse_schemes(&a.scheme)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
    let points: Vec<(f64, ObservationScheme)> =
        values.iter().flat_map(|&v| schemes.iter().map(move |&s| (v, s))).collect();
    let rows = points
        .par_iter()
        .map(|&(v, scheme)| {
            let system = a.system.swept(a.param, v)?;
            let (est, se) = match a.target {
                SweepTarget::Simulate => {
                    let policy = resolve_sim_policy(&a.policy, scheme, &system, a.cells, None)?;
                    let (m, se, _) = sim_point(&system, scheme, &policy, a.horizon, &seeds, SimMode::Saturated, None)?;
                    (m, se)
                }
                SweepTarget::Solve => match scheme {
                    ObservationScheme::Full => (mu_star_full(&system)?, 0.0),
                    ObservationScheme::None => (mu_star_no(&system)?, 0.0),
                    _ => {
                        let opts = RviOptions { tol: a.tol, ..RviOptions::with_cells(a.cells) };
                        (solve_rvi(scheme, &system, opts)?.mu_star, 0.0)
                    }
                },
                SweepTarget::Qbd => {
                    let ctrl = resolve_controller(&a.policy, &system, a.m, a.epsilon, a.cells, None)?;
                    (stability_analysis(&ctrl, &system)?.mu_star, 0.0)
                }
            };
            Ok((v, scheme, est, se))
        })
        .collect::<Result<Vec<_>>>()?;
    let param = match a.param {
        SweepParam::Rho => "rho",
        SweepParam::Rho1 => "rho1",
        SweepParam::Rho2 => "rho2",
        SweepParam::Lambda => "lambda",
    };
    let target = match a.target {
        SweepTarget::Simulate => "simulate",
        SweepTarget::Solve => "solve",
        SweepTarget::Qbd => "qbd",
    };
    let mut t = CsvTable::new(&format!("sweep-{target}"), &[param, "scheme", "estimate", "stderr"]);
    for (v, s, est, se) in rows {
        t.push(vec![sig6(v), s.name().into(), sig6(est), sig6(se)])?;
    }
    write_output(a.out.as_deref(), &t.to_string_lossy())?;
    Ok(EXIT_OK)
}

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name: name.to_string(), ok, detail }
}

fn validation_checks(system: &SystemConfig, quick: bool, seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(check("ordering of service rates", || match system.check_ordering() {
        Ok(()) => Ok((true, "mu0(2) <= mu0(1) <= mu1(1) <= mu1(2)".into())),
        Err(e) => Ok((false, e.to_string())),
    }));
    checks.push(check("closed-form bounds", || {
        let no = mu_star_no(system)?;
        let full = mu_star_full(system)?;
        // enumeration of the four joint environment states
        let g = [system.server1.gamma()?, system.server2.gamma()?];
        let mut e_max = 0.0;
        for x1 in [false, true] {
            for x2 in [false, true] {
                let w = if x1 { g[0] } else { 1.0 - g[0] } * if x2 { g[1] } else { 1.0 - g[1] };
                e_max += w * system.server1.mu(x1).max(system.server2.mu(x2));
            }
        }
        let mean = |s: &crate::model::ServerParams, g: f64| g * s.mu1 + (1.0 - g) * s.mu0;
        let best = mean(&system.server1, g[0]).max(mean(&system.server2, g[1]));
        let ok = (full - e_max).abs() < 1e-12 && (no - best).abs() < 1e-12 && no <= full;
        Ok((ok, format!("mu*_no = {}, mu*_full = {}", sig6(no), sig6(full))))
    }));
    checks.push(check("belief operators stay in the belief space", || {
        let mut worst = 0.0f64;
        for s in [&system.server1, &system.server2] {
            let omega = belief_space(s)?;
            for k in 0..=100 {
                let w = omega.lo + (omega.hi - omega.lo) * k as f64 / 100.0;
                for x in [crate::belief::tau_n(w, s), crate::belief::tau_f(w, s)?, crate::belief::tau_s(w, s)?] {
                    worst = worst.max(omega.lo - x).max(x - omega.hi);
                }
            }
        }
        Ok((worst <= 1e-12, format!("largest excursion {}", sig6(worst.max(0.0)))))
    }));
    checks.push(check("filter equals exact enumeration", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = crate::belief::BeliefPair::stationary(system)?;
        let reps = if quick { 40 } else { 300 };
        let mut worst = 0.0f64;
        for scheme in ObservationScheme::PARTIAL {
            for k in 0..reps {
                let traj = sample_trajectory(scheme, system, prior, 1 + k % 8, &mut rng);
                worst = worst.max(filter_gap(scheme, system, &traj)?);
            }
        }
        Ok((worst <= 1e-10, format!("max gap {:.1e} over {} trajectories", worst, 3 * reps)))
    }));
    checks.push(check("scheme ordering of solved bounds", || {
        let cells = if quick { 60 } else { 200 };
        let opts = RviOptions::with_cells(cells);
        let tol = 2.0 * opts.tol;
        let mus = ObservationScheme::PARTIAL
            .iter()
            .map(|&s| Ok(solve_rvi(s, system, opts)?.mu_star))
            .collect::<Result<Vec<f64>>>()?;
        let (no, full) = (mu_star_no(system)?, mu_star_full(system)?);
        let ok = full + tol >= mus[0] && mus[0] + tol >= mus[1] && mus[1] + tol >= mus[2] && mus[2] + tol >= no;
        Ok((
            ok,
            format!(
                "full {} >= state {} >= output {} >= queue {} >= no {}",
                sig6(full),
                sig6(mus[0]),
                sig6(mus[1]),
                sig6(mus[2]),
                sig6(no)
            ),
        ))
    }));
    checks.push(check("drift identity of the phase process", || {
        let ctrl = FiniteController::from_curve(system, &SwitchingCurve::myopic(system, 6)?, 6, DEFAULT_EPSILON)?;
        let blocks = QbdBlocks::build(&ctrl, system)?;
        let st = crate::qbd::stationary_phase_distribution(&blocks.s_tilde, &blocks.f_tilde)?;
        let rep = drift_check(&ctrl, system)?;
        let gap = (blocks.drift(&st.pi) - (system.lambda - rep.mu_star)).abs();
        Ok((gap <= 1e-10, format!("gap {gap:.1e}")))
    }));
    checks.push(check("simulated full-observation throughput", || {
        let horizon = if quick { 200_000 } else { 1_000_000 };
        let seeds: Vec<u64> = (seed..seed + 4).collect();
        let (m, se) = estimate_mu_star(system, ObservationScheme::Full, &Policy::Myopic, horizon, &seeds)?;
        let full = mu_star_full(system)?;
        let z = (m - full) / se.max(1e-12);
        Ok((z.abs() <= 4.0, format!("{} vs {} (z = {:.2})", sig6(m), sig6(full), z)))
    }));
    checks
}

fn cmd_validate(a: &ValidateArgs) -> Result<i32> {
    let system = a.system.load(true)?;
    let checks = if system.check_ordering().is_err() {
        // Later checks assume the ordering; report it alone.
        validation_checks(&system, true, a.seed).into_iter().take(1).collect()
    } else {
        validation_checks(&system, a.quick, a.seed)
    };
    let mut text = String::new();
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let _ = writeln!(text, "{:<4}  {:<width$}  {}", if c.ok { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write_output(a.out.as_deref(), &text)?;
    Ok(if checks.iter().all(|c| c.ok) { EXIT_OK } else { EXIT_VALIDATION })
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        _ => EXIT_USAGE,
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Qbd(a) => cmd_qbd(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            match &e {
                Error::NonConvergence { iterations, residual } => {
                    eprintln!("error: no convergence after {iterations} iterations; final span {residual:e}")
                }
                _ => eprintln!("error: {e}"),
            }
            code
        }
    }
}
