//! Empirical tails of `‖Δ(n)‖∞` across seeds and their fit to `exp(−c₇δ²n^{2d₂−1})`.

use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_SEEDS: usize = 200;
/// Number of `δ` points per checkpoint.
pub const GRID_POINTS: usize = 16;

/// Least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

pub fn least_squares(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit { slope, intercept, r2, points: n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailAtN {
    pub n: u64,
    pub delta_grid: Vec<f64>,
    /// `P̂(‖Δ(n)‖∞ ≥ δ)` on the grid.
    pub tail: Vec<f64>,
    /// Fit of `log P̂` against `δ²` over grid points with `P̂ > 0`.
    pub fit: Option<LineFit>,
    pub non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub d2: f64,
    pub seeds: usize,
    pub per_n: Vec<TailAtN>,
    /// Pooled fit of `log P̂` against `δ²·n^{2d₂−1}`.
    pub pooled: Option<LineFit>,
    /// `−slope` of the pooled fit.
    pub c7_hat: Option<f64>,
    pub all_slopes_negative: bool,
}

/// Empirical tail of `values` at `delta`.
pub fn empirical_tail(values: &[f64], delta: f64) -> f64 {
    values.iter().filter(|v| **v >= delta).count() as f64 / values.len() as f64
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let k = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[k]
}

/// `norms[k][seed] = ‖Δ(n_grid[k])‖∞` for each seed.
pub fn tail_check(norms: &[Vec<f64>], n_grid: &[u64], d2: f64) -> Result<TailReport> {
    if norms.len() != n_grid.len() {
        return Err(Error::config("n_grid", "one row of norms per checkpoint is required"));
    }
    let seeds = norms.first().map_or(0, Vec::len);
    if seeds < MIN_SEEDS || norms.iter().any(|r| r.len() != seeds) {
        return Err(Error::Insufficient(format!(
            "tail estimation needs at least {MIN_SEEDS} seeds per checkpoint, got {seeds}"
        )));
    }
    let lo = n_grid.iter().min().copied().unwrap_or(0);
    let hi = n_grid.iter().max().copied().unwrap_or(0);
    if n_grid.len() < 3 || lo == 0 || hi < 10 * lo {
        return Err(Error::Insufficient("need at least 3 checkpoints spanning a decade".into()));
    }
    let mut per_n = Vec::new();
    let (mut px, mut py) = (Vec::new(), Vec::new());
    for (row, &n) in norms.iter().zip(n_grid) {
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let (a, b) = (quantile(&sorted, 0.05), quantile(&sorted, 0.95));
        let delta_grid: Vec<f64> = if b > 0.0 {
            (0..GRID_POINTS)
                .map(|k| a + (b - a) * k as f64 / (GRID_POINTS - 1) as f64)
                .filter(|d| *d > 0.0)
                .collect()
        } else {
            // every norm vanishes: probe a fixed positive grid
            (1..=GRID_POINTS).map(|k| k as f64 * 1e-3).collect()
        };
        let tail: Vec<f64> = delta_grid.iter().map(|&d| empirical_tail(row, d)).collect();
        let non_increasing = tail.windows(2).all(|w| w[1] <= w[0]);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        let scale = (n as f64).powf(2.0 * d2 - 1.0);
        for (&d, &p) in delta_grid.iter().zip(&tail) {
            if p > 0.0 {
                x.push(d * d);
                y.push(p.ln());
                px.push(d * d * scale);
                py.push(p.ln());
            }
        }
        per_n.push(TailAtN {
            n,
            fit: least_squares(&x, &y),
            delta_grid,
            tail,
            non_increasing,
        });
    }
    let pooled = least_squares(&px, &py);
    let all_slopes_negative = per_n.iter().all(|t| t.fit.is_some_and(|f| f.slope < 0.0));
    Ok(TailReport {
        d2,
        seeds,
        c7_hat: pooled.map(|f| -f.slope),
        pooled,
        per_n,
        all_slopes_negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = least_squares(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-15 && (f.intercept - 1.0).abs() < 1e-15);
        assert!((f.r2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norms_give_zero_tail() {
        let norms = vec![vec![0.0; 200]; 3];
        let r = tail_check(&norms, &[100, 1000, 10000], 0.75).unwrap();
        for t in &r.per_n {
            assert!(t.tail.iter().all(|p| *p == 0.0));
            assert!(t.fit.is_none());
        }
        assert!(!r.all_slopes_negative);
    }

    #[test]
    fn too_few_seeds_rejected() {
        let norms = vec![vec![0.1; 50]; 3];
        assert!(matches!(
            tail_check(&norms, &[100, 1000, 10000], 0.75),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn narrow_grid_rejected() {
        let norms = vec![vec![0.1; 200]; 3];
        assert!(tail_check(&norms, &[100, 200, 300], 0.75).is_err());
    }
}
