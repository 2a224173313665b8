//! Experiment configuration: a versioned JSON document in which unknown keys are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nmrl::agent::Model;
use nmrl::presets::{model_from_json, InitSpec, Preset};
use nmrl::qlearn::{CheckpointGrid, StepSchedule};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    #[default]
    Log,
    Final,
    Every(u64),
}

impl From<GridSpec> for CheckpointGrid {
    fn from(g: GridSpec) -> Self {
        match g {
            GridSpec::Log => CheckpointGrid::Log,
            GridSpec::Final => CheckpointGrid::Final,
            GridSpec::Every(k) => CheckpointGrid::Every(k),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSpec {
    None,
    #[default]
    Grid,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub delta1: f64,
    pub n0: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSpec {
    #[serde(default)]
    pub record: RecordSpec,
    #[serde(default)]
    pub bound: Option<BoundSpec>,
}

fn default_tail_checkpoints() -> Vec<u64> {
    vec![1_000, 10_000, 100_000]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaTailSpec {
    #[serde(default = "default_tail_checkpoints")]
    pub checkpoints: Vec<u64>,
}

fn default_cap() -> u64 {
    nmrl::decomp::dependence::DEFAULT_HISTORY_CAP as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependenceSpec {
    pub horizon: usize,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsFeatures {
    OneHot,
    /// Gaussian bumps centred on every symbol index.
    Radial { sigma: f64 },
}

fn default_train_sizes() -> Vec<usize> {
    vec![100, 1_000, 10_000]
}
fn default_warmup() -> usize {
    200
}
fn default_test_steps() -> usize {
    1_000
}
fn default_obs_features() -> ObsFeatures {
    ObsFeatures::OneHot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmeSpec {
    #[serde(default = "default_train_sizes")]
    pub train_sizes: Vec<usize>,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_test_steps")]
    pub test_steps: usize,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_obs_features")]
    pub obs_features: ObsFeatures,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(default)]
    pub decomposition: Option<DecompositionSpec>,
    #[serde(default)]
    pub delta_tail: Option<DeltaTailSpec>,
    #[serde(default)]
    pub dependence_matrices: Option<DependenceSpec>,
    #[serde(default)]
    pub cme_filter: Option<CmeSpec>,
}

impl Analyses {
    /// Whether any analysis needs Q-learning runs.
    pub fn needs_runs(&self) -> bool {
        self.convergence.is_some() || self.decomposition.is_some() || self.delta_tail.is_some()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default)]
    env: Option<Value>,
    #[serde(default)]
    env_path: Option<PathBuf>,
    #[serde(default)]
    rcass: Option<Value>,
    #[serde(default)]
    policy: Option<Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawSeeds {
    List(Vec<u64>),
    Count(SeedCount),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedCount {
    count: usize,
    #[serde(default)]
    start: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: u32,
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    model: Option<RawModel>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    schedule: Option<Value>,
    #[serde(default)]
    init: Option<Value>,
    #[serde(default)]
    q0: f64,
    #[serde(default)]
    n_steps: u64,
    seeds: RawSeeds,
    #[serde(default)]
    analyses: Analyses,
    #[serde(default)]
    out: Option<PathBuf>,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub model: Model,
    /// `{"env", "rcass", "policy"}` as resolved.
    pub model_json: Value,
    pub gamma: f64,
    pub schedule: StepSchedule,
    pub init: InitSpec,
    pub q0: f64,
    pub n_steps: u64,
    pub seeds: Vec<u64>,
    pub seed_start: u64,
    pub analyses: Analyses,
    pub out: Option<PathBuf>,
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{key}")),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

fn under(prefix: &str) -> impl Fn(nmrl::Error) -> CliError + '_ {
    move |e| match e {
        nmrl::Error::Config { path, msg } => CliError::config(format!("{prefix}{path}"), msg),
        other => CliError::Core(other),
    }
}

fn init_to_json(init: &InitSpec) -> Value {
    match init {
        InitSpec::Stationary => json!("stationary"),
        InitSpec::BurnIn(b) => json!({ "burn_in": b }),
        InitSpec::Joint(law) => json!({ "joint": law }),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses and validates; relative `env_path`s resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = pointer(e.path());
            CliError::config(path, e.into_inner().to_string())
        })?;
        if raw.version != CONFIG_VERSION {
            return Err(CliError::config("/version", format!("unsupported version {}, expected {CONFIG_VERSION}", raw.version)));
        }

        let preset = match &raw.preset {
            Some(name) => Some(Preset::load(name).map_err(under(""))?),
            None => None,
        };
        let from_preset = |key: &str| preset.as_ref().map(|p| p.raw[key].clone());
        let m = raw.model.clone();
        let env = match (m.as_ref().and_then(|m| m.env.clone()), m.as_ref().and_then(|m| m.env_path.clone())) {
            (Some(_), Some(_)) => return Err(CliError::config("/model", "give either env or env_path, not both")),
            (Some(v), None) => v,
            (None, Some(p)) => {
                let full = base.join(&p);
                if !full.is_file() {
                    return Err(CliError::config("/model/env_path", format!("file {} does not exist", full.display())));
                }
                let text = std::fs::read_to_string(&full).map_err(|e| CliError::io(&full, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::config("/model/env_path", format!("{}: {e}", full.display())))?
            }
            (None, None) => from_preset("env").ok_or_else(|| CliError::config("/model/env", "missing: give a preset or an environment"))?,
        };
        let rcass = m
            .as_ref()
            .and_then(|m| m.rcass.clone())
            .or_else(|| from_preset("rcass"))
            .ok_or_else(|| CliError::config("/model/rcass", "missing field"))?;
        let policy = m
            .as_ref()
            .and_then(|m| m.policy.clone())
            .or_else(|| from_preset("policy"))
            .unwrap_or_else(|| json!({"type": "uniform"}));
        let model = model_from_json(&env, &rcass, &policy).map_err(under("/model"))?;

        let gamma = raw
            .gamma
            .or(preset.as_ref().map(|p| p.gamma))
            .ok_or_else(|| CliError::config("/gamma", "missing field"))?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(CliError::config("/gamma", format!("need 0 < γ < 1, got {gamma}")));
        }
        let schedule = match &raw.schedule {
            Some(v) => StepSchedule::from_json(v).map_err(under("/schedule"))?,
            None => preset.as_ref().map(|p| p.schedule).unwrap_or_else(StepSchedule::default_power),
        };
        let init = match &raw.init {
            Some(v) => InitSpec::from_json(v).map_err(under("/init"))?,
            None => preset.as_ref().map(|p| p.init.clone()).unwrap_or(InitSpec::Stationary),
        };
        if let InitSpec::Joint(law) = &init {
            if law.len() != model.n_joint() {
                return Err(CliError::config("/init/joint", format!("expected {} entries, found {}", model.n_joint(), law.len())));
            }
        }
        let hi = 1.0 / (1.0 - gamma);
        if !(0.0..=hi).contains(&raw.q0) {
            return Err(CliError::config("/q0", format!("must lie in [0, {hi}]")));
        }

        let (seeds, seed_start) = match raw.seeds {
            RawSeeds::List(v) => (v, 0),
            RawSeeds::Count(c) => ((c.start..c.start + c.count as u64).collect(), c.start),
        };
        let cfg = ExperimentConfig {
            preset: raw.preset,
            model,
            model_json: json!({"env": env, "rcass": rcass, "policy": policy}),
            gamma,
            schedule,
            init,
            q0: raw.q0,
            n_steps: raw.n_steps,
            seeds,
            seed_start,
            analyses: raw.analyses,
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed list by `n` consecutive seeds from the configured start.
    pub fn with_seed_count(mut self, n: usize) -> CliResult<Self> {
        self.seeds = (self.seed_start..self.seed_start + n as u64).collect();
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("/seeds", "at least one seed is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(*s) {
                return Err(CliError::config(format!("/seeds/{i}"), format!("seed {s} is repeated")));
            }
        }
        let a = &self.analyses;
        if let Some(t) = &a.delta_tail {
            for (i, &n) in t.checkpoints.iter().enumerate() {
                if n == 0 || n > self.n_steps || !CheckpointGrid::Log.contains(n) {
                    return Err(CliError::config(
                        format!("/analyses/delta_tail/checkpoints/{i}"),
                        format!("{n} must be a log-grid count (d·10^k) within n_steps = {}", self.n_steps),
                    ));
                }
            }
        }
        if let Some(b) = a.decomposition.as_ref().and_then(|d| d.bound) {
            let n_start = self.schedule.certificate().n_start;
            if b.n0 < n_start || b.n0 > self.n_steps || !CheckpointGrid::Log.contains(b.n0) || !CheckpointGrid::Log.contains(n_start) {
                return Err(CliError::config(
                    "/analyses/decomposition/bound/n0",
                    format!("need N = {n_start} ≤ n0 ≤ n_steps with n0 and N on the log grid"),
                ));
            }
            if !(b.delta1 > 0.0) {
                return Err(CliError::config("/analyses/decomposition/bound/delta1", "must be positive"));
            }
        }
        if let Some(d) = &a.dependence_matrices {
            if d.horizon == 0 {
                return Err(CliError::config("/analyses/dependence_matrices/horizon", "must be at least 1"));
            }
        }
        if let Some(c) = &a.cme_filter {
            if c.train_sizes.is_empty() || c.train_sizes.contains(&0) {
                return Err(CliError::config("/analyses/cme_filter/train_sizes", "need at least one positive size"));
            }
            if c.test_steps == 0 {
                return Err(CliError::config("/analyses/cme_filter/test_steps", "must be positive"));
            }
            if let Some(l) = c.lambda {
                if !(l >= 0.0) {
                    return Err(CliError::config("/analyses/cme_filter/lambda", "must be non-negative"));
                }
            }
            if let ObsFeatures::Radial { sigma } = c.obs_features {
                if !(sigma > 0.0) {
                    return Err(CliError::config("/analyses/cme_filter/obs_features/sigma", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Fully resolved configuration, written next to the outputs.
    pub fn resolved_json(&self) -> Value {
        json!({
            "version": CONFIG_VERSION,
            "preset": self.preset,
            "model": self.model_json,
            "gamma": self.gamma,
            "schedule": self.schedule.to_json(),
            "init": init_to_json(&self.init),
            "q0": self.q0,
            "n_steps": self.n_steps,
            "seeds": self.seeds,
            "analyses": self.analyses,
        })
    }
}
