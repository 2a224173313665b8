//! Fixed benchmark instances shipped with the crate.

use serde_json::Value;

use crate::agent::{Model, Policy, Rcass};
use crate::env::HmmEnvironment;
use crate::error::{under, Error, Result};
use crate::qlearn::StepSchedule;
use crate::shape;

const SOURCES: &[(&str, &str)] = &[
    ("markov-consistent", include_str!("../presets/markov-consistent.json")),
    ("hmm2-window1", include_str!("../presets/hmm2-window1.json")),
    ("hmm3-window2", include_str!("../presets/hmm3-window2.json")),
    ("copy-process", include_str!("../presets/copy-process.json")),
    ("iid-window1", include_str!("../presets/iid-window1.json")),
    ("cme-sticky3", include_str!("../presets/cme-sticky3.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    SOURCES.iter().map(|(n, _)| *n)
}

/// How a run draws its initial joint state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// From the stationary law of the joint chain.
    Stationary,
    BurnIn(u64),
    /// An explicit law over joint states.
    Joint(Vec<f64>),
}

impl InitSpec {
    /// `"stationary"`, `{"burn_in": n}` or `{"joint": [...]}`.
    pub fn from_json(v: &Value) -> Result<Self> {
        if v.as_str() == Some("stationary") {
            return Ok(InitSpec::Stationary);
        }
        if let Some(b) = v.get("burn_in") {
            shape::reject_unknown(v, "", &["burn_in"])?;
            return b
                .as_u64()
                .map(InitSpec::BurnIn)
                .ok_or_else(|| Error::config("/burn_in", "expected a non-negative integer"));
        }
        if let Some(j) = v.get("joint") {
            shape::reject_unknown(v, "", &["joint"])?;
            let arr = j.as_array().ok_or_else(|| Error::config("/joint", "expected an array"))?;
            let law = arr
                .iter()
                .enumerate()
                .map(|(k, p)| match p.as_f64() {
                    Some(p) if p >= 0.0 => Ok(p),
                    _ => Err(Error::config(format!("/joint/{k}"), "expected a non-negative number")),
                })
                .collect::<Result<Vec<f64>>>()?;
            let total: f64 = law.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::config("/joint", format!("sums to {total}, expected 1")));
            }
            return Ok(InitSpec::Joint(law));
        }
        Err(Error::config("", "expected \"stationary\", {\"burn_in\": n} or {\"joint\": [...]}"))
    }
}

/// Builds a model from its `env`, `rcass` and `policy` objects.
pub fn model_from_json(env: &Value, rcass: &Value, policy: &Value) -> Result<Model> {
    let env = HmmEnvironment::from_json(env).map_err(under("/env"))?;
    let rcass = Rcass::from_json(rcass, env.n_obs(), env.n_act()).map_err(under("/rcass"))?;
    let policy = Policy::from_json(policy, rcass.n_agent(), env.n_act()).map_err(under("/policy"))?;
    Model::new(env, rcass, policy)
}

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: String,
    pub model: Model,
    pub gamma: f64,
    pub schedule: StepSchedule,
    pub init: InitSpec,
    /// The source JSON.
    pub raw: Value,
}

impl Preset {
    pub fn load(name: &str) -> Result<Self> {
        let (name, src) = SOURCES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::config("/preset", format!("unknown preset {name:?}; known: {}", names().collect::<Vec<_>>().join(", "))))?;
        let raw: Value = serde_json::from_str(src)?;
        let f = |k: &str| shape::field(&raw, "", k);
        let model = model_from_json(f("env")?, f("rcass")?, f("policy")?)?;
        let gamma = f("gamma")?.as_f64().ok_or_else(|| Error::config("/gamma", "expected a number"))?;
        Ok(Preset {
            name,
            description: f("description")?.as_str().unwrap_or_default().to_string(),
            model,
            gamma,
            schedule: StepSchedule::from_json(f("schedule")?).map_err(under("/schedule"))?,
            init: InitSpec::from_json(f("init")?).map_err(under("/init"))?,
            raw,
        })
    }
}
