//! Dependence matrices over a finite horizon by exhaustive enumeration.
//!
//! With `W₁ = (γ₁, u₁)` (the recursion state summarizes the history up to time 1)
//! and `W_m = (o_m, u_m)` for `m > 1`,
//!
//! ```text
//! Φ[i,j] = sup d_TV( law(Z_j, O_{j+1} | w₁…w_{i−1}, w_i), law(Z_j, O_{j+1} | w₁…w_{i−1}, w_i') )   i < j
//! Ψ[i,j] = the same with (Z_j, Z_{j+1}),                                                         i ≤ j
//! ```
//!
//! the sup running over prefixes and perturbations of positive probability, and
//! `Φ[i,i] = 1`. Two independent routes are provided: recursive filtering of
//! the prefix followed by pushing the joint law forward, and explicit joint
//! probability tables over whole sequences, summed over hidden paths.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::agent::Model;
use crate::env::tv_distance;
use crate::error::{Error, Result};
use crate::oracle::JointChain;

/// Default cap on the number of enumerated sequences.
pub const DEFAULT_HISTORY_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceMatrices {
    pub horizon: usize,
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub phi_norm: f64,
    pub psi_norm: f64,
}

#[derive(Serialize)]
struct MatricesJson {
    horizon: usize,
    phi: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    phi_norm: f64,
    psi_norm: f64,
}

impl DependenceMatrices {
    fn new(phi: DMatrix<f64>, psi: DMatrix<f64>) -> Self {
        let norm = |m: &DMatrix<f64>| m.clone().svd(false, false).singular_values.max();
        DependenceMatrices {
            horizon: phi.nrows(),
            phi_norm: norm(&phi),
            psi_norm: norm(&psi),
            phi,
            psi,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect();
        serde_json::to_value(MatricesJson {
            horizon: self.horizon,
            phi: rows(&self.phi),
            psi: rows(&self.psi),
            phi_norm: self.phi_norm,
            psi_norm: self.psi_norm,
        })
        .expect("plain numbers serialize")
    }

    /// Largest entrywise gap to another pair of matrices.
    pub fn max_difference(&self, other: &DependenceMatrices) -> f64 {
        (&self.phi - &other.phi).amax().max((&self.psi - &other.psi).amax())
    }
}

fn check_budget(model: &Model, n: usize, cap: u128) -> Result<()> {
    if n == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    let sp = model.spaces();
    let b = (sp.n_obs * sp.n_act) as u128;
    let required = (model.rcass.n_gamma() * sp.n_act) as u128 * b.checked_pow(n as u32).unwrap_or(u128::MAX);
    if required > cap {
        return Err(Error::Budget {
            what: "dependence-matrix histories",
            required,
            cap,
        });
    }
    Ok(())
}

fn check_init(model: &Model, init: &[f64]) -> Result<()> {
    if init.len() != model.n_joint() {
        return Err(Error::config("init", "joint law has the wrong length"));
    }
    if !(init.iter().sum::<f64>() > 0.0) {
        return Err(Error::config("init", "joint law has no mass"));
    }
    Ok(())
}

/// Accumulates sup-TV over pairs of alternatives.
fn absorb(phi: &mut DMatrix<f64>, psi: &mut DMatrix<f64>, i: usize, laws: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) {
    for a in 0..laws.len() {
        for b in a + 1..laws.len() {
            for (k, j) in (i..phi.ncols()).enumerate() {
                if j > i {
                    let t = tv_distance(&laws[a].0[k], &laws[b].0[k]);
                    phi[(i, j)] = phi[(i, j)].max(t);
                }
                let t = tv_distance(&laws[a].1[k], &laws[b].1[k]);
                psi[(i, j)] = psi[(i, j)].max(t);
            }
        }
    }
}

/// Route 1: filter each prefix, then push the joint law forward through the kernel.
pub fn dependence_matrices(model: &Model, init: &[f64], n: usize, cap: u128) -> Result<DependenceMatrices> {
    check_budget(model, n, cap)?;
    check_init(model, init)?;
    let chain = JointChain::build(model)?;
    let sp = model.spaces();
    let mut phi = DMatrix::zeros(n, n);
    let mut psi = DMatrix::zeros(n, n);
    for i in 0..n {
        phi[(i, i)] = 1.0;
    }
    let mut alts = Vec::new();
    for g in 0..model.rcass.n_gamma() {
        for u in 0..sp.n_act {
            let mass: Vec<f64> = (0..sp.n_hidden).map(|x| init[model.joint_index(x, g, u)]).collect();
            if mass.iter().sum::<f64>() > 0.0 {
                alts.push(Prefix { mass, g, u });
            }
        }
    }
    let mut cx = FilterCtx { model, chain: &chain, n, phi: &mut phi, psi: &mut psi };
    cx.level(0, alts);
    Ok(DependenceMatrices::new(phi, psi))
}

struct Prefix {
    mass: Vec<f64>,
    g: usize,
    u: usize,
}

struct FilterCtx<'a> {
    model: &'a Model,
    chain: &'a JointChain,
    n: usize,
    phi: &'a mut DMatrix<f64>,
    psi: &'a mut DMatrix<f64>,
}

impl FilterCtx<'_> {
    /// `alts` are the positive-probability values of `W_{i+1}` after a fixed prefix.
    fn level(&mut self, i: usize, alts: Vec<Prefix>) {
        let laws: Vec<_> = alts.iter().map(|p| self.laws(i, p)).collect();
        absorb(self.phi, self.psi, i, &laws);
        if i + 1 == self.n {
            return;
        }
        for p in &alts {
            let next = self.extend(p);
            self.level(i + 1, next);
        }
    }

    fn extend(&self, p: &Prefix) -> Vec<Prefix> {
        let m = self.model;
        let sp = m.spaces();
        let mut out = Vec::new();
        for o in 0..sp.n_obs {
            let mut pred = vec![0.0; sp.n_hidden];
            for (x, &w) in p.mass.iter().enumerate() {
                if w > 0.0 {
                    for (x2, &t) in m.env.transition_row(x, p.u).iter().enumerate() {
                        pred[x2] += w * t * m.env.emission_row(x2)[o];
                    }
                }
            }
            let g2 = m.rcass.next(p.g, p.u, o);
            let s2 = m.rcass.readout(g2);
            for u2 in 0..sp.n_act {
                let f = m.policy.prob(s2, u2);
                let mass: Vec<f64> = pred.iter().map(|w| w * f).collect();
                if mass.iter().sum::<f64>() > 0.0 {
                    out.push(Prefix { mass, g: g2, u: u2 });
                }
            }
        }
        out
    }

    /// Laws of `(Z_j, O_{j+1})` and `(Z_j, Z_{j+1})` for `j = i, …, n−1` (0-based).
    fn laws(&self, i: usize, p: &Prefix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.model;
        let sp = m.spaces();
        let cells = sp.n_cells();
        let total: f64 = p.mass.iter().sum();
        let mut mu = vec![0.0; m.n_joint()];
        for (x, &w) in p.mass.iter().enumerate() {
            mu[m.joint_index(x, p.g, p.u)] = w / total;
        }
        let mut out_phi = Vec::new();
        let mut out_psi = Vec::new();
        for _ in i..self.n {
            let mut lp = vec![0.0; cells * sp.n_obs];
            let mut ls = vec![0.0; cells * cells];
            for (z, &w) in mu.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (x, g, u) = m.joint_parts(z);
                let c = m.cell(m.rcass.readout(g), u);
                let law = m.env.observation_law(&crate::env::Belief::point(sp.n_hidden, x), u);
                for (o, po) in law.iter().enumerate() {
                    lp[c * sp.n_obs + o] += w * po;
                }
                for &(z2, t) in self.chain.row(z) {
                    let (_, g2, u2) = m.joint_parts(z2);
                    ls[c * cells + m.cell(m.rcass.readout(g2), u2)] += w * t;
                }
            }
            out_phi.push(lp);
            out_psi.push(ls);
            mu = self.chain.push_forward(&mu);
        }
        (out_phi, out_psi)
    }
}

/// Route 2: explicit probability tables over whole sequences `(w₁, …, w_{n+1})`,
/// each entry summed over all hidden paths.
pub fn dependence_matrices_by_tables(model: &Model, init: &[f64], n: usize, cap: u128) -> Result<DependenceMatrices> {
    check_budget(model, n, cap)?;
    check_init(model, init)?;
    let sp = model.spaces();
    let (h, n_obs, n_act) = (sp.n_hidden, sp.n_obs, sp.n_act);
    let b = n_obs * n_act;
    let first = model.rcass.n_gamma() * n_act;
    let tail = b.pow(n as u32);
    let size = first * tail;
    let n_paths = h.pow(n as u32 + 1);

    // per sequence: probability, cells z_1..z_{n+1}, observations o_2..o_{n+1}
    let mut prob = vec![0.0; size];
    let mut cells = vec![0usize; size * (n + 1)];
    let mut obs = vec![0usize; size * n];
    let mut gs = vec![0usize; n + 1];
    let mut us = vec![0usize; n + 1];
    let mut os = vec![0usize; n + 1];
    for idx in 0..size {
        let mut rest = idx;
        let mut digits = vec![0usize; n];
        for d in digits.iter_mut().rev() {
            *d = rest % b;
            rest /= b;
        }
        gs[0] = rest / n_act;
        us[0] = rest % n_act;
        for (m, d) in digits.iter().enumerate() {
            os[m + 1] = d / n_act;
            us[m + 1] = d % n_act;
            gs[m + 1] = model.rcass.next(gs[m], us[m], os[m + 1]);
        }
        for m in 0..=n {
            cells[idx * (n + 1) + m] = model.cell(model.rcass.readout(gs[m]), us[m]);
        }
        for m in 0..n {
            obs[idx * n + m] = os[m + 1];
        }
        let mut total = 0.0;
        for path in 0..n_paths {
            let mut rest = path;
            let mut xs = vec![0usize; n + 1];
            for x in xs.iter_mut() {
                *x = rest % h;
                rest /= h;
            }
            let mut p = init[model.joint_index(xs[0], gs[0], us[0])];
            for m in 1..=n {
                if p == 0.0 {
                    break;
                }
                p *= model.env.transition_row(xs[m - 1], us[m - 1])[xs[m]]
                    * model.env.emission_row(xs[m])[os[m]]
                    * model.policy.prob(model.rcass.readout(gs[m]), us[m]);
            }
            total += p;
        }
        prob[idx] = total;
    }

    let n_cells = sp.n_cells();
    let mut phi = DMatrix::zeros(n, n);
    let mut psi = DMatrix::zeros(n, n);
    for i in 0..n {
        phi[(i, i)] = 1.0;
    }
    for i in 0..n {
        // sequences sharing w_1..w_{i+1} form contiguous blocks
        let block = b.pow((n - i) as u32);
        let group = if i == 0 { first } else { b };
        let n_groups = size / (block * group);
        for gi in 0..n_groups {
            let mut laws = Vec::new();
            for a in 0..group {
                let start = (gi * group + a) * block;
                let range = start..start + block;
                let mass: f64 = prob[range.clone()].iter().sum();
                if !(mass > 0.0) {
                    continue;
                }
                let mut lp = vec![vec![0.0; n_cells * n_obs]; n - i];
                let mut ls = vec![vec![0.0; n_cells * n_cells]; n - i];
                for idx in range {
                    let p = prob[idx] / mass;
                    if p == 0.0 {
                        continue;
                    }
                    for (k, j) in (i..n).enumerate() {
                        let cj = cells[idx * (n + 1) + j];
                        lp[k][cj * n_obs + obs[idx * n + j]] += p;
                        ls[k][cj * n_cells + cells[idx * (n + 1) + j + 1]] += p;
                    }
                }
                laws.push((lp, ls));
            }
            absorb(&mut phi, &mut psi, i, &laws);
        }
    }
    Ok(DependenceMatrices::new(phi, psi))
}
