//! Executes the analyses of an experiment and writes its artifacts.

use std::fmt::Write as _;
use std::path::Path;

use nmrl::agent::Init;
use nmrl::decomp::{
    tail_check, dependence_matrices, dependence_matrices_by_tables, finite_time_bound, write_decomp_trace,
    BoundConstants, DecompRecorder, RecordMode, BoundInput, FiniteTimeBound,
};
use nmrl::embed::{evaluate_filter, fit_filter_operators, sample_uncontrolled, training_triples, FeatureMap, FilterEvaluation};
use nmrl::oracle::JointChainOracle;
use nmrl::presets::InitSpec;
use nmrl::qlearn::{run_qlearning, write_q_trace, CheckpointGrid, QTable, RunOptions, StepContext, StepHook};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, ObsFeatures, RecordSpec};
use crate::error::{CliError, CliResult};
use crate::output::{write_atomic, write_json, FileEntry, Manifest, Rejection, RunStatus, MANIFEST};

pub const CONVERGENCE_CSV: &str = "convergence.csv";
pub const DECOMPOSITION_CSV: &str = "decomposition.csv";
pub const DELTA_CSV: &str = "delta_checkpoints.csv";
pub const TAIL_NORMS_CSV: &str = "tail_norms.csv";
pub const TAIL_JSON: &str = "tail.json";
pub const BOUND_JSON: &str = "bound.json";
pub const ORACLE_JSON: &str = "oracle.json";
pub const CONFIG_JSON: &str = "config.resolved.json";
pub const DEPENDENCE_JSON: &str = "dependence.json";
pub const CME_CSV: &str = "cme_filter.csv";
pub const CME_EVAL_CSV: &str = "cme_eval.csv";
pub const CME_OPERATORS_JSON: &str = "cme_operators.json";

pub fn q_trace_path(seed: u64) -> String {
    format!("seeds/{seed}/q_trace.csv")
}

pub fn decomp_trace_path(seed: u64) -> String {
    format!("seeds/{seed}/decomp_trace.csv")
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_n: u64,
    /// `‖Q_n − Q*‖∞` at the final count.
    pub final_error: Option<f64>,
    pub max_identity_error: Option<f64>,
    pub max_abs_zeta: Option<f64>,
    pub max_abs_omega: Option<f64>,
    /// `(n, ‖Δ(n)‖∞)` at every checkpoint of the run grid.
    pub delta: Vec<(u64, f64)>,
    /// `(n, ‖Δ(n)‖∞)` at the tail checkpoints.
    pub tail_norms: Vec<(u64, f64)>,
    pub bound: Option<FiniteTimeBound>,
}

/// Wraps the decomposition recorder and captures `Q_n` / `‖Δ(n)‖∞` at chosen counts.
struct SeedHook<'o> {
    rec: Option<DecompRecorder<'o>>,
    tail_at: Vec<u64>,
    tail: Vec<(u64, f64)>,
    snap_at: Vec<u64>,
    snaps: Vec<(u64, QTable)>,
}

impl StepHook for SeedHook<'_> {
    fn on_step(&mut self, ctx: &StepContext<'_>) -> nmrl::Result<()> {
        let count = ctx.step.n + 1;
        if let Some(r) = self.rec.as_mut() {
            r.on_step(ctx)?;
            if self.tail_at.contains(&count) {
                self.tail.push((count, r.delta().norm()));
            }
        }
        if self.snap_at.contains(&count) {
            self.snaps.push((count, ctx.q_next.clone()));
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, n: u64, q: &QTable) -> nmrl::Result<()> {
        match self.rec.as_mut() {
            Some(r) => r.on_checkpoint(n, q),
            None => Ok(()),
        }
    }
}

fn f64s(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        let _ = write!(out, ",{v:?}");
    }
}

fn run_seed(cfg: &ExperimentConfig, oracle: &JointChainOracle, qstar: &QTable, dir: &Path, seed: u64) -> CliResult<(SeedSummary, Vec<FileEntry>)> {
    let a = &cfg.analyses;
    let sp = cfg.model.spaces();
    let grid: CheckpointGrid = a.convergence.as_ref().map(|c| c.grid.into()).unwrap_or(CheckpointGrid::Log);
    let q0 = QTable::from_values(sp.n_agent, sp.n_act, cfg.gamma, vec![cfg.q0; sp.n_cells()]).map_err(CliError::Core)?;
    let init = match &cfg.init {
        InitSpec::Stationary => Init::Joint(oracle.stationary()),
        InitSpec::Joint(law) => Init::Joint(law),
        InitSpec::BurnIn(b) => Init::BurnIn(*b),
    };
    let wants_decomp = a.decomposition.is_some() || a.delta_tail.is_some();
    let mode = match a.decomposition.as_ref().map(|d| d.record) {
        Some(RecordSpec::Grid) => RecordMode::Grid(grid),
        Some(RecordSpec::All) => RecordMode::All,
        _ => RecordMode::None,
    };
    let bound = a.decomposition.as_ref().and_then(|d| d.bound);
    let n_start = cfg.schedule.certificate().n_start;
    let mut hook = SeedHook {
        rec: wants_decomp.then(|| DecompRecorder::new(oracle, mode)),
        tail_at: a.delta_tail.as_ref().map(|t| t.checkpoints.clone()).unwrap_or_default(),
        tail: Vec::new(),
        snap_at: bound.map(|b| vec![b.n0, n_start]).unwrap_or_default(),
        snaps: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RunOptions { grid, keep_trajectory: false };
    let run = run_qlearning(&cfg.model, &cfg.schedule, &q0, cfg.n_steps, init, &mut rng, Some(&mut hook), opts)?;

    let mut files = Vec::new();
    let mut summary = SeedSummary {
        seed,
        final_n: cfg.n_steps,
        ..Default::default()
    };
    if a.convergence.is_some() {
        let mut buf = Vec::new();
        write_q_trace(&mut buf, sp.n_agent, sp.n_act, &run.trace).map_err(|e| CliError::io(dir, e))?;
        files.push(write_atomic(dir, &q_trace_path(seed), &buf)?);
        summary.final_error = Some(run.q.distance(qstar));
    }
    if let Some(rec) = &hook.rec {
        summary.max_identity_error = Some(rec.max_identity_error);
        summary.max_abs_zeta = Some(rec.max_abs_zeta);
        summary.max_abs_omega = Some(rec.max_abs_omega);
        summary.delta = rec
            .checkpoints
            .iter()
            .map(|(n, d)| (*n, d.iter().fold(0.0, |m: f64, x| m.max(x.abs()))))
            .collect();
        if a.decomposition.as_ref().is_some_and(|d| d.record != RecordSpec::None) {
            let mut buf = Vec::new();
            write_decomp_trace(&mut buf, sp.n_agent, sp.n_act, &rec.rows).map_err(|e| CliError::io(dir, e))?;
            files.push(write_atomic(dir, &decomp_trace_path(seed), &buf)?);
        }
        if let Some(b) = bound {
            let find = |n: u64| hook.snaps.iter().find(|(k, _)| *k == n).map(|(_, q)| q);
            if let (Some(q_n0), Some(q_big_n)) = (find(b.n0), find(n_start)) {
                let input = BoundInput {
                    gamma: cfg.gamma,
                    pi_min: oracle.pi_min(),
                    n_agent: sp.n_agent,
                    n_act: sp.n_act,
                    err_n0: q_n0.distance(qstar),
                    q_big_n_norm: q_big_n.values().iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                    delta_norm: Some(rec.delta().norm()),
                };
                summary.bound = Some(finite_time_bound(b.delta1, b.n0, cfg.n_steps, &input, &BoundConstants::default(), &cfg.schedule)?);
            }
        }
    }
    summary.tail_norms = hook.tail;
    Ok((summary, files))
}

fn dependence_init(cfg: &ExperimentConfig, oracle: Option<&JointChainOracle>) -> CliResult<Vec<f64>> {
    let m = &cfg.model;
    match &cfg.init {
        InitSpec::Joint(law) => Ok(law.clone()),
        InitSpec::Stationary => oracle
            .map(|o| o.stationary().to_vec())
            .ok_or_else(|| CliError::Rejected("stationary initial law unavailable".into())),
        InitSpec::BurnIn(b) => {
            let sp = m.spaces();
            let chain = nmrl::oracle::JointChain::build(m)?;
            let s0 = m.rcass.readout(0);
            let mut law = vec![0.0; m.n_joint()];
            for x in 0..sp.n_hidden {
                for u in 0..sp.n_act {
                    law[m.joint_index(x, 0, u)] = m.policy.prob(s0, u) / sp.n_hidden as f64;
                }
            }
            for _ in 0..*b {
                law = chain.push_forward(&law);
            }
            Ok(law)
        }
    }
}

fn cme_seed(cfg: &ExperimentConfig, seed: u64, keep_last: bool) -> nmrl::Result<(Vec<(usize, FilterEvaluation)>, Option<serde_json::Value>)> {
    let spec = cfg.analyses.cme_filter.as_ref().expect("cme spec present");
    let env = &cfg.model.env;
    let state_map = FeatureMap::one_hot(env.n_hidden());
    let obs_map = match spec.obs_features {
        ObsFeatures::OneHot => FeatureMap::one_hot(env.n_obs()),
        ObsFeatures::Radial { sigma } => FeatureMap::radial(sigma, (0..env.n_obs()).map(|o| o as f64).collect())?,
    };
    let mut out = Vec::new();
    let mut ops_json = None;
    for (k, &m) in spec.train_sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let (xs, os) = sample_uncontrolled(env, m, &mut rng)?;
        let ops = fit_filter_operators(&training_triples(&xs, &os), &state_map, &obs_map, spec.lambda)?;
        let (_, test) = sample_uncontrolled(env, spec.warmup + spec.test_steps, &mut rng)?;
        out.push((m, evaluate_filter(&ops, env, &test, spec.warmup)?));
        if keep_last && k + 1 == spec.train_sizes.len() {
            ops_json = Some(ops.to_json());
        }
    }
    Ok((out, ops_json))
}

fn reject(rejections: &mut Vec<Rejection>, analysis: &str, e: &CliError) {
    rejections.push(Rejection {
        analysis: analysis.into(),
        message: e.to_string(),
    });
}

/// Runs every enabled analysis, writing outputs under `dir` and the manifest last.
///
/// Configuration and I/O failures abort with an error; analysis rejections are
/// recorded in the manifest and the run continues with the remaining analyses.
pub fn run(cfg: &ExperimentConfig, dir: &Path, threads: Option<usize>) -> CliResult<RunOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            return Err(CliError::config("--threads", "must be at least 1"));
        }
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Rejected(format!("cannot start worker pool: {e}")))?;

    let mut files = vec![write_json(dir, CONFIG_JSON, &cfg.resolved_json())?];
    let mut rejections = Vec::new();
    let a = &cfg.analyses;
    let needs_oracle = a.needs_runs() || (a.dependence_matrices.is_some() && cfg.init == InitSpec::Stationary);
    let oracle = if needs_oracle {
        match JointChainOracle::build(&cfg.model).and_then(|o| Ok((o.fixed_point_qstar(cfg.gamma)?, o))) {
            Ok((qstar, o)) => {
                files.push(write_json(dir, ORACLE_JSON, &o.dump_json(cfg.gamma)?)?);
                Some((o, qstar))
            }
            Err(e) => {
                reject(&mut rejections, "oracle", &CliError::Core(e));
                None
            }
        }
    } else {
        None
    };

    let mut seeds = Vec::new();
    if a.needs_runs() {
        if let Some((o, qstar)) = &oracle {
            let results: Vec<CliResult<(SeedSummary, Vec<FileEntry>)>> =
                pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, o, qstar, dir, s)).collect());
            let mut failed = None;
            for r in results {
                match r {
                    Ok((summary, f)) => {
                        files.extend(f);
                        seeds.push(summary);
                    }
                    Err(e @ (CliError::Io { .. } | CliError::Config { .. })) => return Err(e),
                    Err(e) => failed = failed.or(Some(e)),
                }
            }
            if let Some(e) = failed {
                reject(&mut rejections, "qlearning", &e);
            } else {
                files.extend(write_seed_tables(cfg, dir, &seeds)?);
                if a.delta_tail.is_some() {
                    match tail_report(cfg, &seeds) {
                        Ok(report) => files.push(write_json(dir, TAIL_JSON, &report)?),
                        Err(e) => reject(&mut rejections, "delta_tail", &e),
                    }
                }
            }
        } else {
            for name in ["convergence", "decomposition", "delta_tail"] {
                let on = match name {
                    "convergence" => a.convergence.is_some(),
                    "decomposition" => a.decomposition.is_some(),
                    _ => a.delta_tail.is_some(),
                };
                if on {
                    reject(&mut rejections, name, &CliError::Rejected("the joint-chain oracle is unavailable".into()));
                }
            }
        }
    }

    if let Some(spec) = &a.dependence_matrices {
        let result = (|| -> CliResult<serde_json::Value> {
            let init = dependence_init(cfg, oracle.as_ref().map(|(o, _)| o))?;
            let cap = spec.cap as u128;
            let m1 = dependence_matrices(&cfg.model, &init, spec.horizon, cap)?;
            let m2 = dependence_matrices_by_tables(&cfg.model, &init, spec.horizon, cap)?;
            Ok(json!({
                "horizon": spec.horizon,
                "filtering": m1.to_json(),
                "tables": m2.to_json(),
                "max_difference": m1.max_difference(&m2),
            }))
        })();
        match result {
            Ok(v) => files.push(write_json(dir, DEPENDENCE_JSON, &v)?),
            Err(e @ CliError::Io { .. }) => return Err(e),
            Err(e) => reject(&mut rejections, "dependence_matrices", &e),
        }
    }

    if a.cme_filter.is_some() {
        let first = cfg.seeds[0];
        let results: Vec<nmrl::Result<_>> = pool.install(|| cfg.seeds.par_iter().map(|&s| cme_seed(cfg, s, s == first)).collect());
        match results.into_iter().collect::<nmrl::Result<Vec<_>>>() {
            Ok(all) => {
                let mut csv = String::from("m,seed,mean_tv,agreement\n");
                for ((evals, _), seed) in all.iter().zip(&cfg.seeds) {
                    for (m, ev) in evals {
                        let _ = writeln!(csv, "{m},{seed},{:?},{:?}", ev.mean_tv, ev.agreement);
                    }
                }
                files.push(write_atomic(dir, CME_CSV, csv.as_bytes())?);
                let (evals, ops) = &all[0];
                if let Some((_, ev)) = evals.last() {
                    let mut csv = String::from("step,tv,agree\n");
                    for r in &ev.rows {
                        let _ = writeln!(csv, "{},{:?},{}", r.step, r.tv, u8::from(r.agree));
                    }
                    files.push(write_atomic(dir, CME_EVAL_CSV, csv.as_bytes())?);
                }
                if let Some(ops) = ops {
                    files.push(write_json(dir, CME_OPERATORS_JSON, ops)?);
                }
            }
            Err(e) => reject(&mut rejections, "cme_filter", &CliError::Core(e)),
        }
    }

    files.sort_by(|x, y| x.path.cmp(&y.path));
    let manifest = Manifest {
        version: crate::config::CONFIG_VERSION,
        status: if rejections.is_empty() { RunStatus::Complete } else { RunStatus::Partial },
        rejections,
        files,
    };
    write_json(dir, MANIFEST, &manifest)?;
    Ok(RunOutcome { manifest, seeds })
}

fn write_seed_tables(cfg: &ExperimentConfig, dir: &Path, seeds: &[SeedSummary]) -> CliResult<Vec<FileEntry>> {
    let a = &cfg.analyses;
    let mut files = Vec::new();
    if a.convergence.is_some() {
        let mut csv = String::from("seed,n,err_inf\n");
        for s in seeds {
            let _ = write!(csv, "{},{}", s.seed, s.final_n);
            f64s(&mut csv, s.final_error);
            csv.push('\n');
        }
        files.push(write_atomic(dir, CONVERGENCE_CSV, csv.as_bytes())?);
    }
    if a.decomposition.is_some() {
        let mut csv = String::from("seed,steps,max_identity_error,max_abs_zeta,max_abs_omega\n");
        for s in seeds {
            let _ = write!(csv, "{},{}", s.seed, s.final_n);
            f64s(&mut csv, [s.max_identity_error, s.max_abs_zeta, s.max_abs_omega].into_iter().flatten());
            csv.push('\n');
        }
        files.push(write_atomic(dir, DECOMPOSITION_CSV, csv.as_bytes())?);
        let mut csv = String::from("seed,n,delta_norm\n");
        for s in seeds {
            for (n, d) in &s.delta {
                let _ = writeln!(csv, "{},{n},{d:?}", s.seed);
            }
        }
        files.push(write_atomic(dir, DELTA_CSV, csv.as_bytes())?);
        if a.decomposition.as_ref().is_some_and(|d| d.bound.is_some()) {
            let rows: Vec<_> = seeds.iter().map(|s| json!({"seed": s.seed, "bound": s.bound})).collect();
            files.push(write_json(dir, BOUND_JSON, &rows)?);
        }
    }
    if a.delta_tail.is_some() {
        let mut csv = String::from("seed,n,delta_norm\n");
        for s in seeds {
            for (n, d) in &s.tail_norms {
                let _ = writeln!(csv, "{},{n},{d:?}", s.seed);
            }
        }
        files.push(write_atomic(dir, TAIL_NORMS_CSV, csv.as_bytes())?);
    }
    Ok(files)
}

fn tail_report(cfg: &ExperimentConfig, seeds: &[SeedSummary]) -> CliResult<nmrl::decomp::TailReport> {
    let spec = cfg.analyses.delta_tail.as_ref().expect("tail spec present");
    let norms: Vec<Vec<f64>> = spec
        .checkpoints
        .iter()
        .map(|&n| {
            seeds
                .iter()
                .filter_map(|s| s.tail_norms.iter().find(|(k, _)| *k == n).map(|(_, d)| *d))
                .collect()
        })
        .collect();
    Ok(tail_check(&norms, &spec.checkpoints, cfg.schedule.d2())?)
}
