//! Recursively computed agent states, stationary randomized policies and the
//! simulation loop.
//!
//! An [`Rcass`] is a finite recursion `Γ' = h₁(Γ, u, o')` over a `Γ`-space
//! with a readout `s = g₁(Γ)` onto the agent states. The window construction
//! keeps the current observation and the previous `K` (observation, action)
//! pairs. Windows are encoded as mixed-radix integers, least significant digit
//! first:
//!
//! ```text
//! γ = O_n + n_obs·(U_{n-1} + n_act·(O_{n-1} + n_obs·(U_{n-2} + …)))
//! ```
//!
//! so the update is a shift: `γ' = o' + n_obs·(u + n_act·(γ mod n_obs·(n_act·n_obs)^{K-1}))`.

use std::io::{BufRead, Write};

use rand::Rng;
use serde_json::Value;

use crate::env::{sample_categorical, Belief, FiniteSpaces, HmmEnvironment, ROW_TOLERANCE};
use crate::error::{Error, Result};
use crate::shape;

/// Default cap on the size of a window `Γ`-space.
pub const DEFAULT_GAMMA_CAP: usize = 100_000;

/// Default burn-in length when no stationary law is supplied.
pub const DEFAULT_BURN_IN: u64 = 10_000;

/// How the readout of a window recursion labels agent states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowReadout {
    /// Agent state is the whole window.
    Full,
    /// Agent state keeps the window's observations and drops its actions.
    Observations,
}

/// A recursively computable approximate sufficient statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Rcass {
    n_gamma: usize,
    n_obs: usize,
    n_act: usize,
    n_agent: usize,
    /// `[(γ * n_act + u) * n_obs + o']`
    update: Vec<usize>,
    readout: Vec<usize>,
    window: Option<(usize, WindowReadout)>,
}

impl Rcass {
    pub fn new(n_obs: usize, n_act: usize, n_gamma: usize, update: Vec<usize>, readout: Vec<usize>) -> Result<Self> {
        if n_gamma == 0 || n_obs == 0 || n_act == 0 {
            return Err(Error::config("/n_gamma", "all sizes must be at least 1"));
        }
        if update.len() != n_gamma * n_act * n_obs {
            return Err(Error::config("/update", "wrong number of entries"));
        }
        if let Some(k) = update.iter().position(|&g| g >= n_gamma) {
            return Err(Error::config(format!("/update[{k}]"), "entry outside the Γ-space"));
        }
        if readout.len() != n_gamma {
            return Err(Error::config("/readout", "wrong number of entries"));
        }
        let n_agent = readout.iter().max().map_or(0, |m| m + 1);
        let mut hit = vec![false; n_agent];
        for &s in &readout {
            hit[s] = true;
        }
        if let Some(s) = hit.iter().position(|h| !h) {
            return Err(Error::config(
                "/readout",
                format!("readout is not surjective: agent state {s} is never labelled"),
            ));
        }
        Ok(Rcass {
            n_gamma,
            n_obs,
            n_act,
            n_agent,
            update,
            readout,
            window: None,
        })
    }

    /// Window recursion over `[O_{n-K}, U_{n-K}, …, U_{n-1}, O_n]` with identity readout.
    pub fn window(n_obs: usize, n_act: usize, k: usize) -> Result<Self> {
        Self::window_with(n_obs, n_act, k, WindowReadout::Full, DEFAULT_GAMMA_CAP)
    }

    /// Window recursion whose agent state keeps only the `K + 1` observations.
    pub fn observation_window(n_obs: usize, n_act: usize, k: usize) -> Result<Self> {
        Self::window_with(n_obs, n_act, k, WindowReadout::Observations, DEFAULT_GAMMA_CAP)
    }

    pub fn window_with(n_obs: usize, n_act: usize, k: usize, readout: WindowReadout, cap: usize) -> Result<Self> {
        if n_obs == 0 || n_act == 0 {
            return Err(Error::config("/K", "observation and action counts must be positive"));
        }
        let size = (n_obs as u128) * ((n_obs * n_act) as u128).pow(k as u32);
        if size > cap as u128 {
            return Err(Error::Budget {
                what: "window Γ-space",
                required: size,
                cap: cap as u128,
            });
        }
        let n_gamma = size as usize;
        let low = n_gamma / (n_obs * n_act).pow(k.min(1) as u32);
        let mut update = Vec::with_capacity(n_gamma * n_act * n_obs);
        for g in 0..n_gamma {
            for u in 0..n_act {
                for o in 0..n_obs {
                    update.push(if k == 0 { o } else { o + n_obs * (u + n_act * (g % low)) });
                }
            }
        }
        let labels: Vec<usize> = match readout {
            WindowReadout::Full => (0..n_gamma).collect(),
            WindowReadout::Observations => (0..n_gamma)
                .map(|g| {
                    let mut rest = g;
                    let mut digits = Vec::with_capacity(k + 1);
                    digits.push(rest % n_obs);
                    rest /= n_obs;
                    for _ in 0..k {
                        rest /= n_act;
                        digits.push(rest % n_obs);
                        rest /= n_obs;
                    }
                    digits.iter().rev().fold(0, |acc, d| acc * n_obs + d)
                })
                .collect(),
        };
        let mut r = Rcass::new(n_obs, n_act, n_gamma, update, labels)?;
        r.window = Some((k, readout));
        Ok(r)
    }

    pub fn n_gamma(&self) -> usize {
        self.n_gamma
    }
    pub fn n_agent(&self) -> usize {
        self.n_agent
    }
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
    pub fn n_act(&self) -> usize {
        self.n_act
    }
    /// Window length and readout, when built by the window construction.
    pub fn window_spec(&self) -> Option<(usize, WindowReadout)> {
        self.window
    }

    /// `h₁(γ, u, o')`.
    pub fn step(&self, gamma: usize, u: usize, o_next: usize) -> Result<usize> {
        if gamma >= self.n_gamma || u >= self.n_act || o_next >= self.n_obs {
            return Err(Error::config(
                "rcass_step",
                format!("index out of range: γ={gamma}, u={u}, o'={o_next}"),
            ));
        }
        Ok(self.next(gamma, u, o_next))
    }

    #[inline]
    pub(crate) fn next(&self, gamma: usize, u: usize, o_next: usize) -> usize {
        self.update[(gamma * self.n_act + u) * self.n_obs + o_next]
    }

    /// `g₁(γ)`.
    #[inline]
    pub fn readout(&self, gamma: usize) -> usize {
        self.readout[gamma]
    }

    /// Parses either `{"type":"window","K":k[,"readout":"full"|"observations"]}` or the
    /// explicit form `{"n_gamma":…, "update":[γ][u][o'], "readout":[γ]}`.
    pub fn from_json(v: &Value, n_obs: usize, n_act: usize) -> Result<Self> {
        if let Some(kind) = v.get("type") {
            shape::reject_unknown(v, "", &["type", "K", "readout"])?;
            if kind != "window" {
                return Err(Error::config("/type", format!("unknown rcass type {kind}")));
            }
            let k = shape::field(v, "", "K")?
                .as_u64()
                .ok_or_else(|| Error::config("/K", "expected a non-negative integer"))? as usize;
            let readout = match v.get("readout").and_then(Value::as_str) {
                None | Some("full") => WindowReadout::Full,
                Some("observations") => WindowReadout::Observations,
                Some(other) => return Err(Error::config("/readout", format!("unknown readout {other:?}"))),
            };
            return Self::window_with(n_obs, n_act, k, readout, DEFAULT_GAMMA_CAP);
        }
        shape::reject_unknown(v, "", &["n_gamma", "update", "readout"])?;
        let n_gamma = shape::count(shape::field(v, "", "n_gamma")?, "/n_gamma")?;
        let update = shape::index_table(shape::field(v, "", "update")?, "/update", &[n_gamma, n_act, n_obs], n_gamma)?;
        let readout = shape::index_table(shape::field(v, "", "readout")?, "/readout", &[n_gamma], usize::MAX)?;
        Self::new(n_obs, n_act, n_gamma, update, readout)
    }
}

/// Stationary randomized policy `φ(u | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_agent: usize,
    n_act: usize,
    probs: Vec<f64>,
}

/// Default uniform-mixing weight.
pub const DEFAULT_POLICY_EPSILON: f64 = 0.05;

impl Policy {
    /// `table[s * n_act + u]`; rows validated to `1e-12` and renormalized.
    pub fn new(n_agent: usize, n_act: usize, mut table: Vec<f64>) -> Result<Self> {
        if n_agent == 0 || n_act == 0 || table.len() != n_agent * n_act {
            return Err(Error::config("/table", "shape does not match (n_agent, n_act)"));
        }
        for (s, row) in table.chunks_mut(n_act).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::config(format!("/table/{s}"), "row is not a probability vector"));
            }
            row.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Policy { n_agent, n_act, probs: table })
    }

    pub fn uniform(n_agent: usize, n_act: usize) -> Self {
        Policy {
            n_agent,
            n_act,
            probs: vec![1.0 / n_act as f64; n_agent * n_act],
        }
    }

    /// `φ = ε + (1 − 𝔲ε)·base`, so every entry is at least `ε`.
    pub fn mixed(base: &Policy, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || epsilon * base.n_act as f64 > 1.0 {
            return Err(Error::config("/epsilon", format!("need 0 ≤ ε ≤ 1/n_act, got {epsilon}")));
        }
        let keep = 1.0 - epsilon * base.n_act as f64;
        Policy::new(
            base.n_agent,
            base.n_act,
            base.probs.iter().map(|p| epsilon + keep * p).collect(),
        )
    }

    pub fn n_agent(&self) -> usize {
        self.n_agent
    }
    pub fn n_act(&self) -> usize {
        self.n_act
    }

    /// Row `φ(· | s)`.
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_act..(s + 1) * self.n_act]
    }

    pub fn prob(&self, s: usize, u: usize) -> f64 {
        self.probs[s * self.n_act + u]
    }

    pub fn min_entry(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `{"type":"uniform"}` or `{"table":[s][u], "epsilon": ε?}`.
    pub fn from_json(v: &Value, n_agent: usize, n_act: usize) -> Result<Self> {
        if let Some(kind) = v.get("type") {
            shape::reject_unknown(v, "", &["type"])?;
            return match kind.as_str() {
                Some("uniform") => Ok(Policy::uniform(n_agent, n_act)),
                _ => Err(Error::config("/type", format!("unknown policy type {kind}"))),
            };
        }
        shape::reject_unknown(v, "", &["table", "epsilon"])?;
        let table = shape::table(shape::field(v, "", "table")?, "/table", &[n_agent, n_act])?;
        let base = Policy::new(n_agent, n_act, table)?;
        match v.get("epsilon") {
            None => Ok(base),
            Some(e) => {
                let eps = e.as_f64().ok_or_else(|| Error::config("/epsilon", "expected a number"))?;
                Policy::mixed(&base, eps)
            }
        }
    }
}

/// Environment, agent-state recursion and policy with mutually consistent spaces.
#[derive(Debug, Clone)]
pub struct Model {
    pub env: HmmEnvironment,
    pub rcass: Rcass,
    pub policy: Policy,
    spaces: FiniteSpaces,
}

impl Model {
    pub fn new(env: HmmEnvironment, rcass: Rcass, policy: Policy) -> Result<Self> {
        if rcass.n_obs() != env.n_obs() || rcass.n_act() != env.n_act() {
            return Err(Error::config("rcass", "observation/action counts differ from the environment"));
        }
        if policy.n_agent() != rcass.n_agent() || policy.n_act() != env.n_act() {
            return Err(Error::config("policy", "shape differs from (n_agent, n_act)"));
        }
        if let Some(n) = env.reward_agent_count() {
            if n != rcass.n_agent() {
                return Err(Error::config(
                    "/reward",
                    format!("reward table has {n} agent states, the recursion has {}", rcass.n_agent()),
                ));
            }
        }
        let spaces = FiniteSpaces::new(env.n_obs(), env.n_act(), rcass.n_agent(), env.n_hidden())?;
        Ok(Model { env, rcass, policy, spaces })
    }

    pub fn spaces(&self) -> FiniteSpaces {
        self.spaces
    }

    /// Number of joint states `(x, γ, u)`.
    pub fn n_joint(&self) -> usize {
        self.spaces.n_hidden * self.rcass.n_gamma() * self.spaces.n_act
    }

    #[inline]
    pub fn joint_index(&self, x: usize, gamma: usize, u: usize) -> usize {
        (x * self.rcass.n_gamma() + gamma) * self.spaces.n_act + u
    }

    #[inline]
    pub fn joint_parts(&self, j: usize) -> (usize, usize, usize) {
        let n_act = self.spaces.n_act;
        let n_gamma = self.rcass.n_gamma();
        (j / (n_act * n_gamma), (j / n_act) % n_gamma, j % n_act)
    }

    /// `(s, u)` cell index, s-major.
    #[inline]
    pub fn cell(&self, s: usize, u: usize) -> usize {
        s * self.spaces.n_act + u
    }
}

/// One recorded transition of the simulated system.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub n: u64,
    pub x: usize,
    /// Hidden-state posterior given the history up to `O_n`.
    pub belief: Belief,
    pub gamma: usize,
    pub s: usize,
    pub u: usize,
    pub o_next: usize,
    pub gamma_next: usize,
    pub s_next: usize,
    pub reward: f64,
}

/// Initial condition of a simulation.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// Draw `(x₀, γ₀, u₀)` from a law over joint states (normally the stationary one);
    /// the belief starts at `P(x₀ | γ₀)` under that law.
    Joint(&'a [f64]),
    /// Start at `x₀ ~ uniform`, `γ₀ = 0`, uniform belief, and discard this many steps.
    BurnIn(u64),
}

/// Streaming simulator of `(x, belief, γ, u)`.
#[derive(Debug, Clone)]
pub struct Simulator<'m> {
    model: &'m Model,
    n: u64,
    x: usize,
    belief: Belief,
    gamma: usize,
    u: usize,
}

impl<'m> Simulator<'m> {
    pub fn new<R: Rng + ?Sized>(model: &'m Model, init: Init<'_>, rng: &mut R) -> Result<Self> {
        let h = model.spaces().n_hidden;
        match init {
            Init::Joint(law) => {
                if law.len() != model.n_joint() {
                    return Err(Error::config("init", "joint law has the wrong length"));
                }
                let j = sample_categorical(law, rng);
                let (x, gamma, u) = model.joint_parts(j);
                let weights: Vec<f64> = (0..h)
                    .map(|xi| {
                        (0..model.spaces().n_act)
                            .map(|ui| law[model.joint_index(xi, gamma, ui)])
                            .sum()
                    })
                    .collect();
                let belief = Belief::from_unnormalized(weights)?;
                Ok(Simulator { model, n: 0, x, belief, gamma, u })
            }
            Init::BurnIn(b) => {
                let x = rng.random_range(0..h);
                let gamma = 0;
                let u = sample_categorical(model.policy.row(model.rcass.readout(gamma)), rng);
                let mut sim = Simulator {
                    model,
                    n: 0,
                    x,
                    belief: Belief::uniform(h),
                    gamma,
                    u,
                };
                for _ in 0..b {
                    sim.step(rng)?;
                }
                sim.n = 0;
                Ok(sim)
            }
        }
    }

    pub fn x(&self) -> usize {
        self.x
    }
    pub fn belief(&self) -> &Belief {
        &self.belief
    }
    pub fn gamma(&self) -> usize {
        self.gamma
    }
    pub fn action(&self) -> usize {
        self.u
    }

    /// Advances one step and returns the transition taken.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Step> {
        let m = self.model;
        let (x_next, o_next) = m.env.step(self.x, self.u, rng)?;
        let gamma_next = m.rcass.next(self.gamma, self.u, o_next);
        let s = m.rcass.readout(self.gamma);
        let s_next = m.rcass.readout(gamma_next);
        let reward = m.env.reward(s, self.u, o_next);
        let belief_next = m
            .env
            .belief_update(&self.belief, self.u, o_next)
            .map_err(|e| match e {
                Error::FilterDegenerate { obs, .. } => Error::FilterDegenerate { step: Some(self.n), obs },
                other => other,
            })?;
        let u_next = sample_categorical(m.policy.row(s_next), rng);
        let step = Step {
            n: self.n,
            x: self.x,
            belief: std::mem::replace(&mut self.belief, belief_next),
            gamma: self.gamma,
            s,
            u: self.u,
            o_next,
            gamma_next,
            s_next,
            reward,
        };
        self.n += 1;
        self.x = x_next;
        self.gamma = gamma_next;
        self.u = u_next;
        Ok(step)
    }
}

/// A finite stretch of the simulated process.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x0: usize,
    pub belief0: Belief,
    pub gamma0: usize,
    pub steps: Vec<Step>,
}

/// Runs `n_steps` transitions from the given initial condition.
pub fn simulate<R: Rng + ?Sized>(model: &Model, n_steps: u64, init: Init<'_>, rng: &mut R) -> Result<Trajectory> {
    let mut sim = Simulator::new(model, init, rng)?;
    let (x0, belief0, gamma0) = (sim.x, sim.belief.clone(), sim.gamma);
    let steps = (0..n_steps).map(|_| sim.step(rng)).collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { x0, belief0, gamma0, steps })
}

/// A row of the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub n: u64,
    pub x: usize,
    pub gamma: usize,
    pub s: usize,
    pub u: usize,
    pub o_next: usize,
    pub reward: f64,
}

impl From<&Step> for LogRow {
    fn from(s: &Step) -> Self {
        LogRow {
            n: s.n,
            x: s.x,
            gamma: s.gamma,
            s: s.s,
            u: s.u,
            o_next: s.o_next,
            reward: s.reward,
        }
    }
}

pub const TRAJECTORY_HEADER: &str = "n,x,gamma,s,u,o_next,reward";

pub fn write_log_row<W: Write>(w: &mut W, row: &LogRow) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{:?}",
        row.n, row.x, row.gamma, row.s, row.u, row.o_next, row.reward
    )
}

/// Writes the trajectory log CSV.
pub fn write_trajectory_log<W: Write>(w: &mut W, traj: &Trajectory) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for step in &traj.steps {
        write_log_row(w, &step.into())?;
    }
    Ok(())
}

/// Reads a trajectory log CSV.
pub fn read_trajectory_log<R: BufRead>(r: R) -> Result<Vec<LogRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != TRAJECTORY_HEADER {
                return Err(Error::config("trajectory log", format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::config(format!("trajectory log line {}", i + 1), "expected 7 columns"));
        }
        let bad = |_| Error::config(format!("trajectory log line {}", i + 1), "malformed field");
        rows.push(LogRow {
            n: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            x: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            gamma: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            s: f[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            u: f[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            o_next: f[5].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            reward: f[6].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        });
    }
    Ok(rows)
}
