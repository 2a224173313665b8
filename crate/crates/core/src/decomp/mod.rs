//! Per-step decomposition of the Q-learning increment.
//!
//! At the visited cell `c = (S_n, U_n)` the bracket of the update splits as
//!
//! ```text
//! r + γ max Q(S_{n+1}) − Q(c) = F + ζ + M
//! F = r̄(c) + γ Σ_{s'} q(s'|c) max Q(s') − Q(c)
//! ζ = (E[r | history] − r̄(c)) + γ (Σ_{s'} P(s' | history) max Q(s') − Σ_{s'} q(s'|c) max Q(s'))
//! M = the rest, a martingale difference
//! ```
//!
//! The history is summarized exactly by the hidden-state belief and the
//! recursion state. `ω` is the same offset applied to the Poisson solution
//! `V(Q_n, Z_{n+1})`, and `Δ(n)` accumulates `ζ + ω` with the step-size weights.

pub mod bound;
pub mod dependence;
pub mod tail;

use std::io::Write;

use crate::agent::{Model, Step};
use crate::env::Belief;
use crate::error::Result;
use crate::oracle::JointChainOracle;
use crate::qlearn::{CheckpointGrid, QTable, StepContext, StepHook, StepSchedule};

pub use bound::{b_sum, beta, chi, finite_time_bound, BoundConstants, BoundInput, FiniteTimeBound};
pub use dependence::{dependence_matrices, dependence_matrices_by_tables, DependenceMatrices};
pub use tail::{tail_check, TailReport};

/// `F`, `ζ`, `M` at the visited cell; all three vanish elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTerms {
    pub cell: usize,
    pub f: f64,
    pub zeta: f64,
    pub m: f64,
    /// The realized bracket `r + γ max Q(s') − Q(c)`.
    pub bracket: f64,
}

fn maxes(q: &QTable) -> Vec<f64> {
    (0..q.n_agent()).map(|s| q.max_value(s)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The offset `ζ` at the visited cell for history summary `(b, γ)` and action `u`.
pub fn zeta_at(oracle: &JointChainOracle, q: &QTable, b: &Belief, gamma: usize, u: usize) -> f64 {
    let m = oracle.model();
    let c = m.cell(m.rcass.readout(gamma), u);
    let mx = maxes(q);
    let (dist, er) = oracle.conditional_agent_laws(b, gamma, u);
    (er - oracle.rbar()[c]) + q.discount() * (dot(&dist, &mx) - dot(oracle.q_row(c), &mx))
}

/// Splits the bracket of one update into `F + ζ + M`.
#[allow(clippy::too_many_arguments)]
pub fn decomp_step(
    oracle: &JointChainOracle,
    b: &Belief,
    gamma: usize,
    u: usize,
    s_next: usize,
    reward: f64,
    q: &QTable,
) -> CellTerms {
    let m = oracle.model();
    let c = m.cell(m.rcass.readout(gamma), u);
    let mx = maxes(q);
    let g = q.discount();
    let qc = q.values()[c];
    let f = oracle.rbar()[c] + g * dot(oracle.q_row(c), &mx) - qc;
    let zeta = zeta_at(oracle, q, b, gamma, u);
    let bracket = reward + g * mx[s_next] - qc;
    CellTerms {
        cell: c,
        f,
        zeta,
        m: bracket - f - zeta,
        bracket,
    }
}

/// [`decomp_step`] for a recorded transition.
pub fn decompose(oracle: &JointChainOracle, step: &Step, q: &QTable) -> CellTerms {
    decomp_step(oracle, &step.belief, step.gamma, step.u, step.s_next, step.reward, q)
}

/// `P(Z_{n+1} = (s', u') | history)` from the belief.
pub fn next_cell_law(model: &Model, oracle: &JointChainOracle, b: &Belief, gamma: usize, u: usize) -> Vec<f64> {
    let (dist, _) = oracle.conditional_agent_laws(b, gamma, u);
    let n_act = model.spaces().n_act;
    let mut law = vec![0.0; dist.len() * n_act];
    for (s2, p) in dist.iter().enumerate() {
        for (u2, f) in model.policy.row(s2).iter().enumerate() {
            law[s2 * n_act + u2] = p * f;
        }
    }
    law
}

/// `ω = E[V(Q, Z_{n+1}) | history] − E[V(Q, Z_{n+1}) | S_n, U_n]`, a vector over cells.
///
/// With `V(q, z)_c = f_q(c) W[z, c]` this is `f_q(c) Σ_{z'} (P_hist(z') − ψ(z'|z_n)) W[z', c]`.
pub fn omega_step(oracle: &JointChainOracle, f: &[f64], b: &Belief, gamma: usize, u: usize) -> Vec<f64> {
    let m = oracle.model();
    let zn = m.cell(m.rcass.readout(gamma), u);
    let law = next_cell_law(m, oracle, b, gamma, u);
    let psi = oracle.psi();
    let w = oracle.poisson_basis();
    let n = f.len();
    let diff: Vec<f64> = (0..n).map(|z2| law[z2] - psi[(zn, z2)]).collect();
    (0..n)
        .map(|c| f[c] * (0..n).map(|z2| diff[z2] * w[(z2, c)]).sum::<f64>())
        .collect()
}

/// Running `Δ(n)` with `Δ(1) = 0` and `Δ(n+1) = (1 − a(n))Δ(n) + a(n)(ζ_n + ω_n)` for `n ≥ 1`.
///
/// This reproduces `Δ(n) = Σ_{m=1}^{n−1} χ(n−1, m+1) a(m)(ζ_m + ω_m)`: the term at
/// `m = 0` never enters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaAccumulator {
    /// The `n` in `Δ(n)` currently held.
    n: u64,
    delta: Vec<f64>,
}

impl DeltaAccumulator {
    pub fn new(n_cells: usize) -> Self {
        DeltaAccumulator {
            n: 1,
            delta: vec![0.0; n_cells],
        }
    }

    /// Feeds `ξ_m = ζ_m + ω_m` for step `m`; steps must arrive in order from 0.
    pub fn push(&mut self, m: u64, a_m: f64, xi: &[f64]) {
        assert!(m == self.n || (m == 0 && self.n == 1), "Δ accumulator fed out of order at m = {m}");
        if m == 0 {
            return;
        }
        for (d, x) in self.delta.iter_mut().zip(xi) {
            *d = (1.0 - a_m) * *d + a_m * x;
        }
        self.n = m + 1;
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn value(&self) -> &[f64] {
        &self.delta
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// `Δ(n)` by direct summation over `m = 1, …, n−1`, for cross-checking.
pub fn delta_direct(sched: &StepSchedule, xi: &[Vec<f64>], n: u64) -> Vec<f64> {
    let cells = xi.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cells];
    for m in 1..n {
        let w = chi(n - 1, m + 1, sched) * sched.at(m);
        for (o, x) in out.iter_mut().zip(&xi[m as usize]) {
            *o += w * x;
        }
    }
    out
}

/// One recorded row of the decomposition trace: vectors over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompRow {
    pub n: u64,
    pub f: Vec<f64>,
    pub zeta: Vec<f64>,
    pub m: Vec<f64>,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Which steps the recorder keeps rows for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    None,
    /// Rows at checkpoint counts of the grid.
    Grid(CheckpointGrid),
    All,
}

/// Per-step observer computing `F, ζ, M, ω, Δ` alongside a Q-learning run.
#[derive(Debug)]
pub struct DecompRecorder<'o> {
    oracle: &'o JointChainOracle,
    mode: RecordMode,
    delta: DeltaAccumulator,
    pub rows: Vec<DecompRow>,
    /// `(n, Δ(n))` at every checkpoint reported by the run.
    pub checkpoints: Vec<(u64, Vec<f64>)>,
    /// Largest `|Q_{n+1}(c) − Q_n(c) − a(n)(F + ζ + M)|` seen, over all cells.
    pub max_identity_error: f64,
    pub max_abs_zeta: f64,
    pub max_abs_omega: f64,
    pub steps: u64,
}

impl<'o> DecompRecorder<'o> {
    pub fn new(oracle: &'o JointChainOracle, mode: RecordMode) -> Self {
        DecompRecorder {
            oracle,
            mode,
            delta: DeltaAccumulator::new(oracle.n_cells()),
            rows: Vec::new(),
            checkpoints: Vec::new(),
            max_identity_error: 0.0,
            max_abs_zeta: 0.0,
            max_abs_omega: 0.0,
            steps: 0,
        }
    }

    pub fn delta(&self) -> &DeltaAccumulator {
        &self.delta
    }
}

impl StepHook for DecompRecorder<'_> {
    fn on_step(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        let step = ctx.step;
        let q = ctx.q_prev;
        let terms = decompose(self.oracle, step, q);
        let f_all = self.oracle.f_values(q);
        let omega = omega_step(self.oracle, &f_all, &step.belief, step.gamma, step.u);

        for (c, (a, b)) in ctx.q_next.values().iter().zip(q.values()).enumerate() {
            let want = if c == terms.cell { ctx.a_n * (terms.f + terms.zeta + terms.m) } else { 0.0 };
            self.max_identity_error = self.max_identity_error.max(((a - b) - want).abs());
        }
        self.max_abs_zeta = self.max_abs_zeta.max(terms.zeta.abs());
        self.max_abs_omega = omega.iter().fold(self.max_abs_omega, |m, w| m.max(w.abs()));

        let mut xi = omega.clone();
        xi[terms.cell] += terms.zeta;
        self.delta.push(step.n, ctx.a_n, &xi);
        self.steps += 1;

        let count = step.n + 1;
        let keep = match self.mode {
            RecordMode::None => false,
            RecordMode::Grid(g) => g.contains(count),
            RecordMode::All => true,
        };
        if keep {
            let cells = f_all.len();
            let spike = |v: f64| {
                let mut out = vec![0.0; cells];
                out[terms.cell] = v;
                out
            };
            self.rows.push(DecompRow {
                n: step.n,
                f: spike(terms.f),
                zeta: spike(terms.zeta),
                m: spike(terms.m),
                omega,
                delta: self.delta.value().to_vec(),
            });
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, n: u64, _q: &QTable) -> Result<()> {
        debug_assert_eq!(self.delta.n(), n.max(1));
        self.checkpoints.push((n, self.delta.value().to_vec()));
        Ok(())
    }
}

/// Header `n,F_0_0,…,zeta_0_0,…,M_0_0,…,omega_0_0,…,delta_0_0,…`.
pub fn decomp_trace_header(n_agent: usize, n_act: usize) -> String {
    let mut h = String::from("n");
    for name in ["F", "zeta", "M", "omega", "delta"] {
        for s in 0..n_agent {
            for u in 0..n_act {
                h.push_str(&format!(",{name}_{s}_{u}"));
            }
        }
    }
    h
}

/// Writes the trace; `delta` in a row with step index `n` is `Δ(n+1)`.
pub fn write_decomp_trace<W: Write>(w: &mut W, n_agent: usize, n_act: usize, rows: &[DecompRow]) -> std::io::Result<()> {
    writeln!(w, "{}", decomp_trace_header(n_agent, n_act))?;
    for r in rows {
        write!(w, "{}", r.n)?;
        for v in r.f.iter().chain(&r.zeta).chain(&r.m).chain(&r.omega).chain(&r.delta) {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// How the history is represented when averaging `ζ` over the stationary law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryModel {
    /// The hidden state itself is known: belief `δ_x` at each joint state.
    JointState,
    /// Belief `P(x | γ)` under the stationary law.
    GammaPosterior,
    /// Start from the stationary law with belief `P(x | γ₀)`, then enumerate all
    /// observation–action paths of the given length with exact filtering.
    Paths(usize),
}

/// `Σ π(history) ζ(Q, history)` per cell, by exact enumeration.
pub fn zeta_stationary_mean(oracle: &JointChainOracle, q: &QTable, how: HistoryModel) -> Vec<f64> {
    let m = oracle.model();
    let sp = m.spaces();
    let mut mean = vec![0.0; sp.n_cells()];
    let pi = oracle.stationary();
    match how {
        HistoryModel::JointState => {
            for (z, &p) in pi.iter().enumerate() {
                if p > 0.0 {
                    let (x, g, u) = m.joint_parts(z);
                    let c = m.cell(m.rcass.readout(g), u);
                    mean[c] += p * zeta_at(oracle, q, &Belief::point(sp.n_hidden, x), g, u);
                }
            }
        }
        HistoryModel::GammaPosterior => {
            for g in 0..m.rcass.n_gamma() {
                let Some(b) = oracle.hidden_given_gamma(g) else { continue };
                for u in 0..sp.n_act {
                    let p: f64 = (0..sp.n_hidden).map(|x| pi[m.joint_index(x, g, u)]).sum();
                    if p > 0.0 {
                        let c = m.cell(m.rcass.readout(g), u);
                        mean[c] += p * zeta_at(oracle, q, &b, g, u);
                    }
                }
            }
        }
        HistoryModel::Paths(len) => {
            for g in 0..m.rcass.n_gamma() {
                for u in 0..sp.n_act {
                    let mass: Vec<f64> = (0..sp.n_hidden).map(|x| pi[m.joint_index(x, g, u)]).collect();
                    if mass.iter().sum::<f64>() > 0.0 {
                        walk_paths(oracle, q, &mass, g, u, len, &mut mean);
                    }
                }
            }
        }
    }
    mean
}

/// `mass[x]` is the joint probability of the path so far and hidden state `x`.
fn walk_paths(oracle: &JointChainOracle, q: &QTable, mass: &[f64], g: usize, u: usize, left: usize, out: &mut [f64]) {
    let m = oracle.model();
    let total: f64 = mass.iter().sum();
    if left == 0 {
        let b = Belief::new(mass.iter().map(|w| w / total).collect()).expect("positive path mass");
        let c = m.cell(m.rcass.readout(g), u);
        out[c] += total * zeta_at(oracle, q, &b, g, u);
        return;
    }
    let sp = m.spaces();
    for o in 0..sp.n_obs {
        let mut next = vec![0.0; sp.n_hidden];
        for (x, &w) in mass.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (x2, &t) in m.env.transition_row(x, u).iter().enumerate() {
                next[x2] += w * t * m.env.emission_row(x2)[o];
            }
        }
        let g2 = m.rcass.next(g, u, o);
        let s2 = m.rcass.readout(g2);
        for u2 in 0..sp.n_act {
            let f = m.policy.prob(s2, u2);
            let branch: Vec<f64> = next.iter().map(|w| w * f).collect();
            if branch.iter().sum::<f64>() > 0.0 {
                walk_paths(oracle, q, &branch, g2, u2, left - 1, out);
            }
        }
    }
}
