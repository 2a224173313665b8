//! Conditional mean embeddings and a learned linear filter.
//!
//! With feature maps `φ` and `ϕ`, the conditional law of `Y` given `X = x` is
//! represented by `μ_{Y|x} = μ_Y + U (φ(x) − μ_X)` where `U = C_{YX}(C_{XX} + λI)^{−1}`.
//! The filter propagates an embedding of the state posterior with two linear
//! operators, `μ' = 𝒯₁ μ + 𝒯₂ φ(o')`, fitted by ridge regression of `ϕ(s_{n+1})`
//! on `[ϕ(s_n); φ(o_{n+1})]` using uncentered second moments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{sample_categorical, tv_distance, Belief, HmmEnvironment};
use crate::error::{Error, Result};

/// Default ridge scale: `λ = RIDGE_SCALE · trace(C)/dim`.
pub const RIDGE_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    OneHot { n: usize },
    /// Gaussian bumps `exp(−(x − ℓ_k)²/(2σ²))` at the landmarks.
    Radial { sigma: f64, landmarks: Vec<f64> },
}

impl FeatureMap {
    pub fn one_hot(n: usize) -> Self {
        FeatureMap::OneHot { n }
    }

    pub fn radial(sigma: f64, landmarks: Vec<f64>) -> Result<Self> {
        if !(sigma > 0.0) || landmarks.is_empty() {
            return Err(Error::config("feature_map", "radial features need σ > 0 and at least one landmark"));
        }
        Ok(FeatureMap::Radial { sigma, landmarks })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::OneHot { n } => *n,
            FeatureMap::Radial { landmarks, .. } => landmarks.len(),
        }
    }

    pub fn features(&self, x: usize) -> DVector<f64> {
        match self {
            FeatureMap::OneHot { n } => {
                let mut v = DVector::zeros(*n);
                v[x] = 1.0;
                v
            }
            FeatureMap::Radial { sigma, landmarks } => DVector::from_iterator(
                landmarks.len(),
                landmarks.iter().map(|l| (-(x as f64 - l).powi(2) / (2.0 * sigma * sigma)).exp()),
            ),
        }
    }
}

/// Empirical means and (cross-)covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    pub cxx: DMatrix<f64>,
    pub cyx: DMatrix<f64>,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub m: usize,
}

fn moments(xs: &[DVector<f64>], ys: &[DVector<f64>], centered: bool) -> Result<CrossCovariance> {
    let m = xs.len();
    if m == 0 || ys.len() != m {
        return Err(Error::Insufficient("need at least one (x, y) sample pair".into()));
    }
    let (dx, dy) = (xs[0].len(), ys[0].len());
    let mut cxx = DMatrix::zeros(dx, dx);
    let mut cyx = DMatrix::zeros(dy, dx);
    let mut mu_x = DVector::zeros(dx);
    let mut mu_y = DVector::zeros(dy);
    for (x, y) in xs.iter().zip(ys) {
        cxx.ger(1.0, x, x, 1.0);
        cyx.ger(1.0, y, x, 1.0);
        mu_x += x;
        mu_y += y;
    }
    let inv = 1.0 / m as f64;
    cxx *= inv;
    cyx *= inv;
    mu_x *= inv;
    mu_y *= inv;
    if centered {
        cxx.ger(-1.0, &mu_x, &mu_x, 1.0);
        cyx.ger(-1.0, &mu_y, &mu_x, 1.0);
        cxx = (&cxx + cxx.transpose()) * 0.5;
    }
    Ok(CrossCovariance { cxx, cyx, mu_x, mu_y, m })
}

/// Centered `C_XX`, `C_YX` and the mean maps.
pub fn fit_cross_covariance(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<CrossCovariance> {
    moments(xs, ys, true)
}

/// Uncentered second moments `E[φφᵀ]`, `E[ϕφᵀ]`.
pub fn fit_second_moments(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<CrossCovariance> {
    moments(xs, ys, false)
}

pub fn default_ridge(cxx: &DMatrix<f64>) -> f64 {
    RIDGE_SCALE * cxx.trace() / cxx.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmeOperator {
    pub matrix: DMatrix<f64>,
    pub lambda: f64,
    pub m: usize,
}

/// `C_YX (C_XX + λI)^{−1}`.
pub fn conditional_operator(cyx: &DMatrix<f64>, cxx: &DMatrix<f64>, lambda: f64, m: usize) -> Result<CmeOperator> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", "ridge must be non-negative"));
    }
    let n = cxx.nrows();
    let a = cxx + DMatrix::identity(n, n) * lambda;
    let rhs = cyx.transpose();
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).ok_or_else(|| {
            Error::Numerical(format!("C_XX + λI is singular at λ = {lambda:e}; use a larger ridge"))
        })?,
    };
    let matrix = sol.transpose();
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite conditional operator at λ = {lambda:e}; use a larger ridge")));
    }
    Ok(CmeOperator { matrix, lambda, m })
}

/// Centered conditional embedding `μ_{Y|x} = μ_Y + U(φ(x) − μ_X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEmbedding {
    pub op: CmeOperator,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
}

impl ConditionalEmbedding {
    pub fn fit(xs: &[DVector<f64>], ys: &[DVector<f64>], lambda: Option<f64>) -> Result<Self> {
        let cc = fit_cross_covariance(xs, ys)?;
        let lambda = lambda.unwrap_or_else(|| default_ridge(&cc.cxx));
        let op = conditional_operator(&cc.cyx, &cc.cxx, lambda, cc.m)?;
        Ok(ConditionalEmbedding {
            op,
            mu_x: cc.mu_x,
            mu_y: cc.mu_y,
        })
    }

    pub fn conditional_mean(&self, phi_x: &DVector<f64>) -> DVector<f64> {
        &self.mu_y + &self.op.matrix * (phi_x - &self.mu_x)
    }
}

/// Fitted filter operators `𝒯₁` (state block) and `𝒯₂` (observation block).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOperators {
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub lambda: f64,
    pub m: usize,
    pub state_map: FeatureMap,
    pub obs_map: FeatureMap,
}

/// Per-row shift `v` minimizing `Σ|T1_ik + v| + Σ|T2_il − v|`; the smallest-magnitude
/// minimizer is taken.
fn l1_shift(row1: &[f64], row2: &[f64]) -> f64 {
    let mut pts: Vec<f64> = row1.iter().map(|v| -v).chain(row2.iter().cloned()).collect();
    pts.sort_by(f64::total_cmp);
    let n = pts.len();
    let (lo, hi) = if n % 2 == 1 { (pts[n / 2], pts[n / 2]) } else { (pts[n / 2 - 1], pts[n / 2]) };
    0.0f64.clamp(lo, hi)
}

/// Ridge fit of `ϕ(s_{n+1})` on `[ϕ(s_n); φ(o_{n+1})]` from `(s_n, o_{n+1}, s_{n+1})` triples.
///
/// With one-hot maps on both blocks the regressors satisfy `1ᵀϕ(s) = 1ᵀφ(o)`, so the
/// split of a constant between the blocks is unidentified; each output row is then
/// shifted to the representative of least L1 norm, which leaves the filter unchanged
/// on normalized inputs.
pub fn fit_filter_operators(
    triples: &[(usize, usize, usize)],
    state_map: &FeatureMap,
    obs_map: &FeatureMap,
    lambda: Option<f64>,
) -> Result<FilterOperators> {
    if triples.is_empty() {
        return Err(Error::Insufficient("no training triples".into()));
    }
    let (ds, d_o) = (state_map.dim(), obs_map.dim());
    let zs: Vec<DVector<f64>> = triples
        .iter()
        .map(|&(s, o, _)| {
            let mut z = DVector::zeros(ds + d_o);
            z.rows_mut(0, ds).copy_from(&state_map.features(s));
            z.rows_mut(ds, d_o).copy_from(&obs_map.features(o));
            z
        })
        .collect();
    let ys: Vec<DVector<f64>> = triples.iter().map(|&(_, _, s2)| state_map.features(s2)).collect();
    let mom = fit_second_moments(&zs, &ys)?;
    let lambda = lambda.unwrap_or_else(|| default_ridge(&mom.cxx));
    let op = conditional_operator(&mom.cyx, &mom.cxx, lambda, mom.m).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("degenerate filter design: {msg}")),
        other => other,
    })?;
    let mut t1 = op.matrix.columns(0, ds).into_owned();
    let mut t2 = op.matrix.columns(ds, d_o).into_owned();
    if matches!(state_map, FeatureMap::OneHot { .. }) && matches!(obs_map, FeatureMap::OneHot { .. }) {
        for i in 0..ds {
            let r1: Vec<f64> = t1.row(i).iter().cloned().collect();
            let r2: Vec<f64> = t2.row(i).iter().cloned().collect();
            let v = l1_shift(&r1, &r2);
            t1.row_mut(i).add_scalar_mut(v);
            t2.row_mut(i).add_scalar_mut(-v);
        }
    }
    Ok(FilterOperators {
        t1,
        t2,
        lambda,
        m: op.m,
        state_map: state_map.clone(),
        obs_map: obs_map.clone(),
    })
}

impl FilterOperators {
    /// `𝒯₁ μ + 𝒯₂ φ(o')`, unprojected.
    pub fn filter_update(&self, mu_prev: &DVector<f64>, o_next: usize) -> DVector<f64> {
        &self.t1 * mu_prev + &self.t2 * self.obs_map.features(o_next)
    }

    /// One filter step followed by simplex projection.
    pub fn step(&self, mu_prev: &DVector<f64>, o_next: usize) -> DVector<f64> {
        DVector::from_vec(project_simplex(self.filter_update(mu_prev, o_next).as_slice()))
    }

    pub fn to_json(&self) -> Value {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect() };
        json!({
            "T1": rows(&self.t1),
            "T2": rows(&self.t2),
            "lambda": self.lambda,
            "m": self.m,
            "state_map": self.state_map,
            "obs_map": self.obs_map,
        })
    }
}

/// Clips negatives and renormalizes; an all-nonpositive input maps to uniform.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| if x.is_finite() { x.max(0.0) } else { 0.0 }).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// State estimate from an embedding: argmax after projection.
pub fn infer_state(mu: &[f64]) -> usize {
    argmax(&project_simplex(mu))
}

/// Hidden states `x_0..=x_len` and observations `o_1..=o_len` of an environment run under action 0.
pub fn sample_uncontrolled<R: Rng + ?Sized>(env: &HmmEnvironment, len: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(len + 1);
    let mut os = Vec::with_capacity(len);
    xs.push(rng.random_range(0..env.n_hidden()));
    for _ in 0..len {
        let (x2, o) = env.step(*xs.last().expect("non-empty"), 0, rng)?;
        xs.push(x2);
        os.push(o);
    }
    Ok((xs, os))
}

/// Training triples `(x_n, o_{n+1}, x_{n+1})` labelled by the hidden state.
pub fn training_triples(xs: &[usize], os: &[usize]) -> Vec<(usize, usize, usize)> {
    os.iter().enumerate().map(|(n, &o)| (xs[n], o, xs[n + 1])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterRow {
    pub step: usize,
    pub tv: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterEvaluation {
    pub rows: Vec<FilterRow>,
    pub mean_tv: f64,
    pub agreement: f64,
}

/// Runs the learned and the exact filter side by side from uniform beliefs,
/// scoring steps after `warmup`.
pub fn evaluate_filter(ops: &FilterOperators, env: &HmmEnvironment, os: &[usize], warmup: usize) -> Result<FilterEvaluation> {
    let h = env.n_hidden();
    if ops.state_map.dim() != h {
        return Err(Error::config("state_map", "dimension differs from the hidden-state count"));
    }
    let mut exact = Belief::uniform(h);
    let mut mu = DVector::from_element(h, 1.0 / h as f64);
    let mut rows = Vec::new();
    for (n, &o) in os.iter().enumerate() {
        exact = env.belief_update(&exact, 0, o).map_err(|e| match e {
            Error::FilterDegenerate { obs, .. } => Error::FilterDegenerate { step: Some(n as u64), obs },
            other => other,
        })?;
        mu = ops.step(&mu, o);
        if n >= warmup {
            rows.push(FilterRow {
                step: n,
                tv: tv_distance(mu.as_slice(), exact.weights()),
                agree: infer_state(mu.as_slice()) == argmax(exact.weights()),
            });
        }
    }
    let k = rows.len().max(1) as f64;
    Ok(FilterEvaluation {
        mean_tv: rows.iter().map(|r| r.tv).sum::<f64>() / k,
        agreement: rows.iter().filter(|r| r.agree).count() as f64 / k,
        rows,
    })
}

/// Draws `(x, y)` pairs from a joint table `p[x * ny + y]`.
pub fn sample_joint<R: Rng + ?Sized>(p: &[f64], ny: usize, m: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..m)
        .map(|_| {
            let k = sample_categorical(p, rng);
            (k / ny, k % ny)
        })
        .collect()
}
