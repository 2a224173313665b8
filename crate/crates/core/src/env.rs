//! Controlled hidden-Markov observation environments.
//!
//! A hidden chain `X` on `n_hidden` states moves under the agent's action,
//! `X' ~ T[x, u]`, and emits an observation `O' ~ E[x']`. The observation
//! process alone is generally not Markov, but its law given the whole past is
//! exactly computable: it only depends on the posterior of the hidden state
//! (the belief), which is propagated by the Bayes filter
//!
//! ```text
//! b'(i) ∝ Σ_j b(j) T[j, u][i] E[i][o']
//! ```

use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::shape;

/// Tolerance for row sums when validating probability tables.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Cardinalities of the finite observation, action, agent-state and hidden-state spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiniteSpaces {
    pub n_obs: usize,
    pub n_act: usize,
    pub n_agent: usize,
    pub n_hidden: usize,
}

impl FiniteSpaces {
    pub fn new(n_obs: usize, n_act: usize, n_agent: usize, n_hidden: usize) -> Result<Self> {
        for (name, n) in [
            ("n_obs", n_obs),
            ("n_act", n_act),
            ("n_agent", n_agent),
            ("n_hidden", n_hidden),
        ] {
            if n == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if n_agent * n_act < 2 {
            return Err(Error::config(
                "n_agent*n_act",
                "at least two (state, action) cells are required",
            ));
        }
        Ok(FiniteSpaces {
            n_obs,
            n_act,
            n_agent,
            n_hidden,
        })
    }

    /// Number of (agent state, action) cells.
    pub fn n_cells(&self) -> usize {
        self.n_agent * self.n_act
    }
}

/// Reward table `r(s, u, o')` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// Indexed `[s][u][o']`.
    PerAgent { n_agent: usize, values: Vec<f64> },
    /// Indexed `[u][o']`, the same for every agent state.
    Shared { values: Vec<f64> },
}

/// A finite controlled hidden-Markov observation process with rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmEnvironment {
    n_hidden: usize,
    n_obs: usize,
    n_act: usize,
    /// `[(x * n_act + u) * n_hidden + x']`
    transition: Vec<f64>,
    /// `[x * n_obs + o]`
    emission: Vec<f64>,
    reward: Reward,
}

fn check_rows(values: &mut [f64], row_len: usize, path: &str, labels: &dyn Fn(usize) -> String) -> Result<()> {
    for (r, row) in values.chunks_mut(row_len).enumerate() {
        let mut sum = 0.0;
        for (k, &p) in row.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::config(
                    format!("{path}/{}/{k}", labels(r)),
                    format!("probability must be finite and non-negative, got {p}"),
                ));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::config(
                format!("{path}/{}", labels(r)),
                format!("row sums to {sum:.17}, expected 1 within {ROW_TOLERANCE:e}"),
            ));
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(())
}

impl HmmEnvironment {
    /// Builds an environment from flat tables: `transition[(x*n_act+u)*n_hidden+x']`,
    /// `emission[x*n_obs+o]`. Rows are validated to `1e-12` and renormalized once.
    pub fn new(
        n_hidden: usize,
        n_obs: usize,
        n_act: usize,
        mut transition: Vec<f64>,
        mut emission: Vec<f64>,
        reward: Reward,
    ) -> Result<Self> {
        for (name, n) in [("n_hidden", n_hidden), ("n_obs", n_obs), ("n_act", n_act)] {
            if n == 0 {
                return Err(Error::config(format!("/{name}"), "must be at least 1"));
            }
        }
        if transition.len() != n_hidden * n_act * n_hidden {
            return Err(Error::config("/T", "wrong number of entries"));
        }
        if emission.len() != n_hidden * n_obs {
            return Err(Error::config("/E", "wrong number of entries"));
        }
        check_rows(&mut transition, n_hidden, "/T", &|r| {
            format!("{}/{}", r / n_act, r % n_act)
        })?;
        check_rows(&mut emission, n_obs, "/E", &|r| r.to_string())?;
        let (values, expected) = match &reward {
            Reward::PerAgent { n_agent, values } => (values, n_agent * n_act * n_obs),
            Reward::Shared { values } => (values, n_act * n_obs),
        };
        if n_agent_of(&reward) == Some(0) {
            return Err(Error::config("/reward", "n_agent must be at least 1"));
        }
        if values.len() != expected {
            return Err(Error::config("/reward", "wrong number of entries"));
        }
        if let Some(k) = values.iter().position(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config(
                format!("/reward[{k}]"),
                format!("reward must lie in [0, 1], got {}", values[k]),
            ));
        }
        Ok(HmmEnvironment {
            n_hidden,
            n_obs,
            n_act,
            transition,
            emission,
            reward,
        })
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
    pub fn n_act(&self) -> usize {
        self.n_act
    }

    /// Agent-state count the reward table is tied to, if any.
    pub fn reward_agent_count(&self) -> Option<usize> {
        n_agent_of(&self.reward)
    }

    /// Row `T[x, u][·]`.
    pub fn transition_row(&self, x: usize, u: usize) -> &[f64] {
        let start = (x * self.n_act + u) * self.n_hidden;
        &self.transition[start..start + self.n_hidden]
    }

    /// Row `E[x][·]`.
    pub fn emission_row(&self, x: usize) -> &[f64] {
        &self.emission[x * self.n_obs..(x + 1) * self.n_obs]
    }

    pub fn reward(&self, s: usize, u: usize, o_next: usize) -> f64 {
        match &self.reward {
            Reward::PerAgent { values, .. } => values[(s * self.n_act + u) * self.n_obs + o_next],
            Reward::Shared { values } => values[u * self.n_obs + o_next],
        }
    }

    /// Samples `x' ~ T[x, u]` then `o' ~ E[x']`.
    pub fn step<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> Result<(usize, usize)> {
        if x >= self.n_hidden {
            return Err(Error::config("x", format!("hidden state {x} out of range")));
        }
        if u >= self.n_act {
            return Err(Error::config("u", format!("action {u} out of range")));
        }
        let x_next = sample_categorical(self.transition_row(x, u), rng);
        let o_next = sample_categorical(self.emission_row(x_next), rng);
        Ok((x_next, o_next))
    }

    /// One-step predicted hidden law `Σ_x b[x] T[x, u][·]`.
    pub fn predict(&self, belief: &Belief, u: usize) -> Vec<f64> {
        let mut pred = vec![0.0; self.n_hidden];
        for (x, &w) in belief.weights().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (p, &t) in pred.iter_mut().zip(self.transition_row(x, u)) {
                *p += w * t;
            }
        }
        pred
    }

    /// `P(O_{n+1} = · | belief, u)`.
    pub fn observation_law(&self, belief: &Belief, u: usize) -> Vec<f64> {
        let pred = self.predict(belief, u);
        (0..self.n_obs)
            .map(|o| {
                pred.iter()
                    .enumerate()
                    .map(|(x, &p)| p * self.emission[x * self.n_obs + o])
                    .sum()
            })
            .collect()
    }

    /// Exact one-step Bayes posterior of the hidden state after action `u` and observation `o_next`.
    pub fn belief_update(&self, belief: &Belief, u: usize, o_next: usize) -> Result<Belief> {
        let pred = self.predict(belief, u);
        let joint: Vec<f64> = pred
            .iter()
            .enumerate()
            .map(|(x, &p)| p * self.emission[x * self.n_obs + o_next])
            .collect();
        let norm: f64 = joint.iter().sum();
        if !(norm > 0.0) {
            return Err(Error::FilterDegenerate {
                step: None,
                obs: o_next,
            });
        }
        Ok(Belief(joint.into_iter().map(|j| j / norm).collect()))
    }

    /// Parses the JSON environment definition.
    pub fn from_json(v: &Value) -> Result<Self> {
        shape::reject_unknown(v, "", &["n_hidden", "n_obs", "n_act", "T", "E", "reward"])?;
        let n_hidden = shape::count(shape::field(v, "", "n_hidden")?, "/n_hidden")?;
        let n_obs = shape::count(shape::field(v, "", "n_obs")?, "/n_obs")?;
        let n_act = shape::count(shape::field(v, "", "n_act")?, "/n_act")?;
        let transition = shape::table(shape::field(v, "", "T")?, "/T", &[n_hidden, n_act, n_hidden])?;
        let emission = shape::table(shape::field(v, "", "E")?, "/E", &[n_hidden, n_obs])?;
        let rv = shape::field(v, "", "reward")?;
        let reward = match depth(rv) {
            2 => Reward::Shared {
                values: shape::table(rv, "/reward", &[n_act, n_obs])?,
            },
            3 => {
                let n_agent = rv.as_array().map(Vec::len).unwrap_or(0);
                Reward::PerAgent {
                    n_agent,
                    values: shape::table(rv, "/reward", &[n_agent, n_act, n_obs])?,
                }
            }
            _ => {
                return Err(Error::config(
                    "/reward",
                    "expected a 3-d array [s][u][o'] or a 2-d array [u][o']",
                ))
            }
        };
        Self::new(n_hidden, n_obs, n_act, transition, emission, reward)
    }

    pub fn to_json(&self) -> Value {
        let reward = match &self.reward {
            Reward::PerAgent { n_agent, values } => {
                shape::nest(values, &[*n_agent, self.n_act, self.n_obs])
            }
            Reward::Shared { values } => shape::nest(values, &[self.n_act, self.n_obs]),
        };
        json!({
            "n_hidden": self.n_hidden,
            "n_obs": self.n_obs,
            "n_act": self.n_act,
            "T": shape::nest(&self.transition, &[self.n_hidden, self.n_act, self.n_hidden]),
            "E": shape::nest(&self.emission, &[self.n_hidden, self.n_obs]),
            "reward": reward,
        })
    }
}

fn n_agent_of(reward: &Reward) -> Option<usize> {
    match reward {
        Reward::PerAgent { n_agent, .. } => Some(*n_agent),
        Reward::Shared { .. } => None,
    }
}

fn depth(v: &Value) -> usize {
    match v.as_array().and_then(|a| a.first()) {
        Some(first) => 1 + depth(first),
        None if v.is_array() => 1,
        None => 0,
    }
}

/// Posterior law of the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("belief", "empty weight vector"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("belief", "weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::config("belief", format!("weights sum to {sum}")));
        }
        Ok(Belief(weights))
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::config("belief", "weights have zero total mass"));
        }
        Belief::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Belief(vec![1.0 / n as f64; n])
    }

    pub fn point(n: usize, at: usize) -> Self {
        let mut w = vec![0.0; n];
        w[at] = 1.0;
        Belief(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Inverse-CDF draw from a probability vector; consumes exactly one uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
