//! Tabular Q-learning on the agent state, treating it as if it were Markov:
//!
//! ```text
//! Q_{n+1}(s,u) = Q_n(s,u) + a(n)·1{S_n=s, U_n=u}·[r(S_n,U_n,O_{n+1}) + γ·max_a Q_n(S_{n+1},a) − Q_n(s,u)]
//! ```

use std::io::{BufRead, Write};

use rand::Rng;
use serde_json::{json, Value};

use crate::agent::{Init, LogRow, Model, Rcass, Simulator, Step, Trajectory};
use crate::error::{Error, Result};
use crate::shape;

/// A step-size sequence `n ↦ a(n)`.
pub trait StepSize {
    fn step_size(&self, n: u64) -> f64;
}

impl<F: Fn(u64) -> f64> StepSize for F {
    fn step_size(&self, n: u64) -> f64 {
        self(n)
    }
}

/// Functional form of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `a(n) = a₀ / (n + n₀)^{d₂}`
    Power { a0: f64, n0: f64, d2: f64 },
    /// `a(n) = a₀ / (n + 1)`
    Harmonic { a0: f64 },
}

/// Certified constants with `d₁/n ≤ a(n) ≤ d₃·n^{−d₂}`, `a(n+1) ≤ a(n)` and `a(n) < 1` for `n ≥ N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub d1: f64,
    pub d3: f64,
    pub n_start: u64,
}

/// Upper end of the range on which certificates are checked by direct evaluation.
pub const CERTIFY_HORIZON: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    kind: ScheduleKind,
    cert: Certificate,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, cert: Certificate) -> Result<Self> {
        let s = StepSchedule { kind, cert };
        s.validate(CERTIFY_HORIZON)?;
        Ok(s)
    }

    /// `1/(n+1)^{0.75}` certified with `d₁ = 0.5`, `d₃ = 1`, `N = 1`.
    pub fn default_power() -> Self {
        StepSchedule {
            kind: ScheduleKind::Power { a0: 1.0, n0: 1.0, d2: 0.75 },
            cert: Certificate { d1: 0.5, d3: 1.0, n_start: 1 },
        }
    }

    /// `{"kind": "power", "a0", "n0", "d2", "certificate": {"d1", "d3", "N"}}` or
    /// `{"kind": "harmonic", "a0", "certificate": …}`.
    pub fn from_json(v: &Value) -> Result<Self> {
        let num = |obj: &Value, path: &str, key: &str| -> Result<f64> {
            shape::field(obj, path, key)?
                .as_f64()
                .ok_or_else(|| Error::config(format!("{path}/{key}"), "expected a number"))
        };
        let kind = match shape::field(v, "", "kind")?.as_str() {
            Some("power") => {
                shape::reject_unknown(v, "", &["kind", "a0", "n0", "d2", "certificate"])?;
                ScheduleKind::Power {
                    a0: num(v, "", "a0")?,
                    n0: num(v, "", "n0")?,
                    d2: num(v, "", "d2")?,
                }
            }
            Some("harmonic") => {
                shape::reject_unknown(v, "", &["kind", "a0", "certificate"])?;
                ScheduleKind::Harmonic { a0: num(v, "", "a0")? }
            }
            _ => return Err(Error::config("/kind", "expected \"power\" or \"harmonic\"")),
        };
        let c = shape::field(v, "", "certificate")?;
        shape::reject_unknown(c, "/certificate", &["d1", "d3", "N"])?;
        let n_start = shape::count(shape::field(c, "/certificate", "N")?, "/certificate/N")? as u64;
        let cert = Certificate {
            d1: num(c, "/certificate", "d1")?,
            d3: num(c, "/certificate", "d3")?,
            n_start,
        };
        StepSchedule::new(kind, cert)
    }

    pub fn to_json(&self) -> Value {
        let cert = json!({"d1": self.cert.d1, "d3": self.cert.d3, "N": self.cert.n_start});
        match self.kind {
            ScheduleKind::Power { a0, n0, d2 } => json!({"kind": "power", "a0": a0, "n0": n0, "d2": d2, "certificate": cert}),
            ScheduleKind::Harmonic { a0 } => json!({"kind": "harmonic", "a0": a0, "certificate": cert}),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn certificate(&self) -> Certificate {
        self.cert
    }

    pub fn d2(&self) -> f64 {
        match self.kind {
            ScheduleKind::Power { d2, .. } => d2,
            ScheduleKind::Harmonic { .. } => 1.0,
        }
    }

    #[inline]
    pub fn at(&self, n: u64) -> f64 {
        match self.kind {
            ScheduleKind::Power { a0, n0, d2 } => a0 / (n as f64 + n0).powf(d2),
            ScheduleKind::Harmonic { a0 } => a0 / (n as f64 + 1.0),
        }
    }

    /// Checks the Robbins–Monro conditions from the functional form and the
    /// certificate by direct evaluation on `[N, horizon]`.
    pub fn validate(&self, horizon: u64) -> Result<()> {
        match self.kind {
            ScheduleKind::Power { a0, n0, d2 } => {
                if !(a0 > 0.0) || !(n0 >= 0.0) {
                    return Err(Error::config("/schedule", "need a0 > 0 and n0 ≥ 0"));
                }
                if !(d2 > 0.5 && d2 <= 1.0) {
                    return Err(Error::config(
                        "/schedule/d2",
                        format!("need 0.5 < d2 ≤ 1 for Σa = ∞, Σa² < ∞; got {d2}"),
                    ));
                }
            }
            ScheduleKind::Harmonic { a0 } => {
                if !(a0 > 0.0) {
                    return Err(Error::config("/schedule/a0", "need a0 > 0"));
                }
            }
        }
        let Certificate { d1, d3, n_start } = self.cert;
        if !(d1 > 0.0 && d3 > 0.0) || n_start == 0 {
            return Err(Error::config("/schedule/certificate", "need d1 > 0, d3 > 0 and N ≥ 1"));
        }
        let d2 = self.d2();
        let mut prev = self.at(n_start);
        for n in n_start..=horizon {
            let a = if n == n_start { prev } else { self.at(n) };
            let nf = n as f64;
            if a >= 1.0 {
                return Err(Error::config("/schedule", format!("a({n}) = {a} is not below 1")));
            }
            if a > prev {
                return Err(Error::config("/schedule", format!("a({n}) > a({})", n - 1)));
            }
            if d1 / nf > a {
                return Err(Error::config("/schedule/certificate/d1", format!("d1/n exceeds a(n) at n = {n}")));
            }
            if a > d3 * nf.powf(-d2) {
                return Err(Error::config("/schedule/certificate/d3", format!("a(n) exceeds d3·n^-d2 at n = {n}")));
            }
            prev = a;
        }
        Ok(())
    }
}

impl StepSize for StepSchedule {
    fn step_size(&self, n: u64) -> f64 {
        self.at(n)
    }
}

/// Q-values over `(s, u)` cells, s-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_agent: usize,
    n_act: usize,
    gamma: f64,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_agent: usize, n_act: usize, gamma: f64) -> Result<Self> {
        Self::from_values(n_agent, n_act, gamma, vec![0.0; n_agent * n_act])
    }

    pub fn from_values(n_agent: usize, n_act: usize, gamma: f64, values: Vec<f64>) -> Result<Self> {
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(Error::config("/gamma", format!("discount must lie in [0, 1), got {gamma}")));
        }
        if values.len() != n_agent * n_act {
            return Err(Error::config("q0", "wrong number of cells"));
        }
        let q = QTable { n_agent, n_act, gamma, values };
        if let Some(k) = q.out_of_range() {
            return Err(Error::config(
                format!("q0[{k}]"),
                format!("value {} outside [0, 1/(1-γ)]", q.values[k]),
            ));
        }
        Ok(q)
    }

    pub fn n_agent(&self) -> usize {
        self.n_agent
    }
    pub fn n_act(&self) -> usize {
        self.n_act
    }
    pub fn discount(&self) -> f64 {
        self.gamma
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, s: usize, u: usize) -> f64 {
        self.values[s * self.n_act + u]
    }

    /// `max_a Q(s, a)` and its maximizer; ties go to the lowest action index.
    #[inline]
    pub fn greedy(&self, s: usize) -> (usize, f64) {
        let row = &self.values[s * self.n_act..(s + 1) * self.n_act];
        let mut best = (0, row[0]);
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (a, v);
            }
        }
        best
    }

    #[inline]
    pub fn max_value(&self, s: usize) -> f64 {
        self.greedy(s).1
    }

    /// Upper end of the invariant range, `1/(1−γ)`.
    pub fn upper(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    /// First cell outside `[0, 1/(1−γ)]`, if any.
    pub fn out_of_range(&self) -> Option<usize> {
        let hi = self.upper();
        self.values.iter().position(|v| !(*v >= 0.0 && *v <= hi))
    }

    /// Sup-norm distance.
    pub fn distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies one Q-learning update at `(s, u)` and returns the increment.
    #[inline]
    pub fn update(&mut self, s: usize, u: usize, s_next: usize, reward: f64, a_n: f64) -> f64 {
        let target = reward + self.gamma * self.max_value(s_next);
        let k = s * self.n_act + u;
        let inc = a_n * (target - self.values[k]);
        self.values[k] += inc;
        inc
    }
}

/// Which update counts `n` are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointGrid {
    /// `n` divisible by `10^⌊log₁₀ n⌋`: 1..9, 10, 20, …, 90, 100, 200, …
    Log,
    Every(u64),
    /// Only the final count.
    Final,
}

impl CheckpointGrid {
    pub fn contains(&self, n: u64) -> bool {
        if n == 0 {
            return false;
        }
        match *self {
            CheckpointGrid::Log => {
                let mut p = 1;
                while p * 10 <= n {
                    p *= 10;
                }
                n % p == 0
            }
            CheckpointGrid::Every(k) => k > 0 && n % k == 0,
            CheckpointGrid::Final => false,
        }
    }
}

/// Everything a per-step observer can see.
#[derive(Debug)]
pub struct StepContext<'a> {
    pub step: &'a Step,
    pub a_n: f64,
    /// `Q_n`, before the update.
    pub q_prev: &'a QTable,
    /// `Q_{n+1}`, after the update.
    pub q_next: &'a QTable,
}

/// Observer invoked in lockstep with the Q-learning iteration.
pub trait StepHook {
    fn on_step(&mut self, ctx: &StepContext<'_>) -> Result<()>;

    /// Called after `n` updates whenever `n` is a checkpoint.
    fn on_checkpoint(&mut self, _n: u64, _q: &QTable) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub grid: CheckpointGrid,
    pub keep_trajectory: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            grid: CheckpointGrid::Log,
            keep_trajectory: false,
        }
    }
}

/// Result of a Q-learning run.
#[derive(Debug, Clone)]
pub struct QRun {
    /// `(n, Q_n)` at every checkpoint, `n` strictly increasing.
    pub trace: Vec<(u64, Vec<f64>)>,
    pub q: QTable,
    pub trajectory: Option<Trajectory>,
}

/// Runs the simulator and the Q-learning update in lockstep.
#[allow(clippy::too_many_arguments)]
pub fn run_qlearning<R: Rng + ?Sized>(
    model: &Model,
    sched: &StepSchedule,
    q0: &QTable,
    n_steps: u64,
    init: Init<'_>,
    rng: &mut R,
    mut hook: Option<&mut dyn StepHook>,
    opts: RunOptions,
) -> Result<QRun> {
    if q0.n_agent() != model.spaces().n_agent || q0.n_act() != model.spaces().n_act {
        return Err(Error::config("q0", "shape differs from (n_agent, n_act)"));
    }
    if let Some(k) = q0.out_of_range() {
        return Err(Error::config(format!("q0[{k}]"), "value outside [0, 1/(1-γ)]"));
    }
    let mut sim = Simulator::new(model, init, rng)?;
    let mut traj = opts.keep_trajectory.then(|| Trajectory {
        x0: sim.x(),
        belief0: sim.belief().clone(),
        gamma0: sim.gamma(),
        steps: Vec::new(),
    });
    let mut q = q0.clone();
    let mut prev = q0.clone();
    let mut trace = Vec::new();
    let hi = q.upper();
    for n in 0..n_steps {
        let step = sim.step(rng)?;
        let a_n = sched.at(n);
        prev.values.copy_from_slice(&q.values);
        q.update(step.s, step.u, step.s_next, step.reward, a_n);
        let v = q.get(step.s, step.u);
        if !(v >= 0.0 && v <= hi) {
            return Err(Error::Numerical(format!(
                "Q({}, {}) = {v} left [0, 1/(1-γ)] at step {n}",
                step.s, step.u
            )));
        }
        if let Some(h) = hook.as_deref_mut() {
            h.on_step(&StepContext {
                step: &step,
                a_n,
                q_prev: &prev,
                q_next: &q,
            })?;
        }
        let count = n + 1;
        if opts.grid.contains(count) || count == n_steps {
            trace.push((count, q.values.clone()));
            if let Some(h) = hook.as_deref_mut() {
                h.on_checkpoint(count, &q)?;
            }
        }
        if let Some(t) = traj.as_mut() {
            t.steps.push(step);
        }
    }
    Ok(QRun { trace, q, trajectory: traj })
}

/// Recomputes the Q trace from a trajectory log.
pub fn replay_qlearning(
    rows: &[LogRow],
    rcass: &Rcass,
    sched: &StepSchedule,
    q0: &QTable,
    grid: CheckpointGrid,
) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut q = q0.clone();
    let mut trace = Vec::new();
    let total = rows.len() as u64;
    for (i, row) in rows.iter().enumerate() {
        if row.n != i as u64 {
            return Err(Error::config("trajectory log", format!("row {i} has n = {}", row.n)));
        }
        let s_next = rcass.readout(rcass.step(row.gamma, row.u, row.o_next)?);
        q.update(row.s, row.u, s_next, row.reward, sched.at(row.n));
        let count = row.n + 1;
        if grid.contains(count) || count == total {
            trace.push((count, q.values.clone()));
        }
    }
    Ok(trace)
}

/// Header `n,q_0_0,q_0_1,…` in s-major, u-minor order.
pub fn q_trace_header(n_agent: usize, n_act: usize) -> String {
    let mut h = String::from("n");
    for s in 0..n_agent {
        for u in 0..n_act {
            h.push_str(&format!(",q_{s}_{u}"));
        }
    }
    h
}

pub fn write_q_trace<W: Write>(w: &mut W, n_agent: usize, n_act: usize, trace: &[(u64, Vec<f64>)]) -> std::io::Result<()> {
    writeln!(w, "{}", q_trace_header(n_agent, n_act))?;
    for (n, vals) in trace {
        write!(w, "{n}")?;
        for v in vals {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parses a Q trace CSV back into `(n, values)` rows.
pub fn read_q_trace<R: BufRead>(r: R) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = || Error::config(format!("q trace line {}", i + 1), "malformed field");
        let n = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let vals = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        out.push((n, vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_touches_only_visited_cell() {
        let mut q = QTable::from_values(2, 2, 0.9, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        q.update(1, 0, 0, 0.5, 0.3);
        assert_eq!(q.get(0, 0), 1.0);
        assert_eq!(q.get(0, 1), 2.0);
        assert_eq!(q.get(1, 1), 4.0);
    }

    #[test]
    fn full_step_without_discount_copies_reward() {
        let mut q = QTable::from_values(1, 2, 0.0, vec![0.7, 0.2]).unwrap();
        q.update(0, 1, 0, 0.35, 1.0);
        assert_eq!(q.get(0, 1), 0.35);
    }

    #[test]
    fn straight_line_update() {
        let mut q = QTable::from_values(2, 2, 0.9, vec![1.0; 4]).unwrap();
        q.update(0, 1, 1, 0.5, 0.1);
        assert!((q.get(0, 1) - 1.04).abs() < 1e-15);
    }

    #[test]
    fn greedy_ties_go_low() {
        let q = QTable::from_values(1, 3, 0.5, vec![0.4, 0.7, 0.7]).unwrap();
        assert_eq!(q.greedy(0), (1, 0.7));
    }

    #[test]
    fn q0_outside_range_rejected() {
        assert!(QTable::from_values(1, 2, 0.9, vec![0.0, 10.5]).is_err());
        assert!(QTable::from_values(1, 2, 0.9, vec![-0.1, 1.0]).is_err());
    }

    #[test]
    fn default_schedule_certificate_holds() {
        StepSchedule::default_power().validate(CERTIFY_HORIZON).unwrap();
    }

    #[test]
    fn bad_certificates_are_rejected() {
        let kind = ScheduleKind::Power { a0: 1.0, n0: 1.0, d2: 0.75 };
        assert!(StepSchedule::new(kind, Certificate { d1: 0.8, d3: 1.0, n_start: 1 }).is_err());
        assert!(StepSchedule::new(kind, Certificate { d1: 0.5, d3: 0.5, n_start: 1 }).is_err());
        let flat = ScheduleKind::Power { a0: 1.0, n0: 1.0, d2: 0.5 };
        assert!(StepSchedule::new(flat, Certificate { d1: 0.1, d3: 1.0, n_start: 1 }).is_err());
    }

    #[test]
    fn harmonic_schedule() {
        let s = StepSchedule::new(
            ScheduleKind::Harmonic { a0: 0.9 },
            Certificate { d1: 0.45, d3: 0.9, n_start: 1 },
        )
        .unwrap();
        assert_eq!(s.at(3), 0.9 / 4.0);
        assert_eq!(s.d2(), 1.0);
    }

    #[test]
    fn log_grid() {
        let hits: Vec<u64> = (0..=300).filter(|&n| CheckpointGrid::Log.contains(n)).collect();
        let mut expect: Vec<u64> = (1..10).collect();
        expect.extend((1..10).map(|k| 10 * k));
        expect.extend([100, 200, 300]);
        assert_eq!(hits, expect);
    }

    #[test]
    fn q_trace_header_names_cells() {
        assert_eq!(q_trace_header(2, 2), "n,q_0_0,q_0_1,q_1_0,q_1_1");
    }
}
