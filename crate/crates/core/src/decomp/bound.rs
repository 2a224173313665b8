//! Step-size weights and the finite-time bound on `‖Q_n − Q*‖∞`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::qlearn::{StepSchedule, StepSize};

/// `χ(n, m) = Π_{k=m}^{n} (1 − a(k))` if `n ≥ m`, else 1.
pub fn chi<S: StepSize + ?Sized>(n: u64, m: u64, sched: &S) -> f64 {
    if n < m {
        return 1.0;
    }
    (m..=n).map(|k| 1.0 - sched.step_size(k)).product()
}

/// `b_k(n) = Σ_{m=k}^{n} a(m)`.
pub fn b_sum<S: StepSize + ?Sized>(k: u64, n: u64, sched: &S) -> f64 {
    (k..=n).map(|m| sched.step_size(m)).sum()
}

/// `β_k(n)`: `1/(k^{d₂−d₁} n^{d₁})` if `d₁ ≤ d₂`, else `1/n^{d₂}`.
pub fn beta(k: u64, n: u64, d1: f64, d2: f64) -> f64 {
    let (k, n) = (k as f64, n as f64);
    if d1 <= d2 {
        1.0 / (k.powf(d2 - d1) * n.powf(d1))
    } else {
        1.0 / n.powf(d2)
    }
}

/// Existence constants the analysis leaves unidentified; all default to 1 except `d₅ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub d4: f64,
    pub d5: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants {
            c1: 1.0,
            c2: 1.0,
            d: 1.0,
            c4: 1.0,
            c5: 1.0,
            c6: 1.0,
            c7: 1.0,
            d4: 1.0,
            d5: 0.0,
        }
    }
}

/// Problem-dependent quantities entering the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInput {
    pub gamma: f64,
    pub pi_min: f64,
    pub n_agent: usize,
    pub n_act: usize,
    /// `‖Q_{n₀} − Q*‖∞`.
    pub err_n0: f64,
    /// `‖Q_N‖∞`.
    pub q_big_n_norm: f64,
    /// `‖Δ(n)‖∞`, when known.
    pub delta_norm: Option<f64>,
}

/// Which probability expression applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `0 < δ₁ ≤ C`: exponent `−Dδ₁²/β`.
    Quadratic,
    /// `δ₁ > C`: exponent `−Dδ₁/β`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteTimeBound {
    pub alpha: f64,
    #[serde(rename = "C")]
    pub c_big: f64,
    pub b_n0_n: f64,
    /// `e^{−(1−α)b_{n₀}(n)}‖Q_{n₀} − Q*‖∞ + (δ₁ + a(n₀)c₁)/(1−α)`.
    pub bound: f64,
    /// `bound + ‖Δ(n)‖∞` when `Δ` was supplied.
    pub bound_with_delta: Option<f64>,
    pub regime: Regime,
    /// Raw lower bound on the probability; may be `≤ 0`.
    pub probability: f64,
    pub vacuous: bool,
}

/// Evaluates the bound and its probability at `(δ₁, n₀, n)`.
pub fn finite_time_bound(
    delta1: f64,
    n0: u64,
    n: u64,
    input: &BoundInput,
    k: &BoundConstants,
    sched: &StepSchedule,
) -> Result<FiniteTimeBound> {
    let cert = sched.certificate();
    if n0 < cert.n_start || n < n0 {
        return Err(Error::config("n0", format!("need N = {} ≤ n0 ≤ n, got n0 = {n0}, n = {n}", cert.n_start)));
    }
    if !(delta1 > 0.0) {
        return Err(Error::config("delta1", "must be positive"));
    }
    let alpha = 1.0 - (1.0 - input.gamma) * input.pi_min;
    if !(alpha < 1.0) {
        return Err(Error::ChainRejected(format!(
            "α = {alpha} is not below 1 (π_min = {})",
            input.pi_min
        )));
    }
    let gap = 1.0 - alpha;
    let b = b_sum(n0, n, sched);
    let bound = (-gap * b).exp() * input.err_n0 + (delta1 + sched.at(n0) * k.c1) / gap;
    let c_big = (2.0 * (1.0 + input.q_big_n_norm + 1.0 / gap) + k.c2).exp();
    let regime = if delta1 <= c_big { Regime::Quadratic } else { Regime::Linear };
    let num = match regime {
        Regime::Quadratic => k.d * delta1 * delta1,
        Regime::Linear => k.d * delta1,
    };
    let d2 = sched.d2();
    let tail: f64 = (n0 + 1..=n).map(|m| (-num / beta(n0, m, cert.d1, d2)).exp()).sum();
    let probability = 1.0 - 2.0 * (input.n_agent * input.n_act) as f64 * tail;
    Ok(FiniteTimeBound {
        alpha,
        c_big,
        b_n0_n: b,
        bound,
        bound_with_delta: input.delta_norm.map(|d| bound + d),
        regime,
        probability,
        vacuous: probability <= 0.0,
    })
}
