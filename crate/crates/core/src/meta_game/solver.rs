//! Zero-sum matrix game solving and exact best responses.
//!
//! The primary solver is a dense tableau simplex (Bland's rule) on the
//! positively shifted matrix. Its output is re-checked against the
//! maximin/minimax inequalities; if the check fails the solver falls back to
//! regret matching with averaged strategies.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SOLVER_TOL: f64 = 1e-8;
const PIVOT_EPS: f64 = 1e-12;
const TIE_EPS: f64 = 1e-12;
const RM_CHECK_EVERY: usize = 64;
const RM_MAX_ITERS: usize = 2_000_000;

/// Mixed strategy over one side's population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetaStrategy {
    probs: Vec<f64>,
}

impl MetaStrategy {
    /// Validates `probs >= 0` and `sum = 1` within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_finite("meta-strategy", &probs)?;
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty meta-strategy".into()));
        }
        if let Some(p) = probs.iter().find(|p| **p < 0.0) {
            return Err(Error::InvalidArgument(format!("negative probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Clamps tiny negatives from floating-point noise and renormalizes.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let w: Vec<f64> = weights.iter().map(|x| x.max(0.0)).collect();
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidArgument("weights have no positive mass".into()));
        }
        Self::new(w.iter().map(|x| x / sum).collect())
    }

    pub fn pure(n: usize, i: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// Extends with zero-probability entries up to length `n`.
    pub fn padded(&self, n: usize) -> Self {
        let mut probs = self.probs.clone();
        probs.resize(n.max(probs.len()), 0.0);
        Self { probs }
    }

    /// Draws an index by inverse CDF.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Simplex,
    RegretMatching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedGameSolution {
    pub sigma_row: MetaStrategy,
    pub sigma_col: MetaStrategy,
    pub value: f64,
    /// `max_i (U s_col)_i - min_j (s_row^T U)_j` of the returned pair.
    pub gap: f64,
    pub method: SolveMethod,
}

pub(crate) fn check_matrix(u: &[Vec<f64>]) -> Result<(usize, usize)> {
    let m = u.len();
    let n = u.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("matrix must be at least 1x1".into()));
    }
    if u.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("ragged matrix".into()));
    }
    for row in u {
        check_finite("payoff matrix", row)?;
    }
    Ok((m, n))
}

/// `U sigma_col`: each row's payoff against the column mixture.
pub fn row_payoffs(u: &[Vec<f64>], sigma_col: &[f64]) -> Vec<f64> {
    u.iter().map(|r| r.iter().zip(sigma_col).map(|(a, b)| a * b).sum()).collect()
}

/// `sigma_row^T U`: each column's payoff (to the row player) against the row mixture.
pub fn col_payoffs(u: &[Vec<f64>], sigma_row: &[f64]) -> Vec<f64> {
    let n = u[0].len();
    (0..n)
        .map(|j| u.iter().zip(sigma_row).map(|(r, p)| p * r[j]).sum())
        .collect()
}

/// Smallest-index pure row maximizing `(U sigma_col)_i`.
pub fn best_response_row(u: &[Vec<f64>], sigma_col: &[f64]) -> usize {
    let v = row_payoffs(u, sigma_col);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - TIE_EPS * (1.0 + max.abs());
    v.iter().position(|&x| x >= threshold).unwrap_or(0)
}

/// Smallest-index pure column minimizing `(sigma_row^T U)_j`.
pub fn best_response_col(u: &[Vec<f64>], sigma_row: &[f64]) -> usize {
    let v = col_payoffs(u, sigma_row);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = min + TIE_EPS * (1.0 + min.abs());
    v.iter().position(|&x| x <= threshold).unwrap_or(0)
}

/// Exact exploitability of a strategy pair: the row best-response payoff
/// minus the column best-response payoff. Zero exactly at equilibrium.
pub fn exploitability(u: &[Vec<f64>], sigma_row: &[f64], sigma_col: &[f64]) -> f64 {
    let best_row = row_payoffs(u, sigma_col).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let best_col = col_payoffs(u, sigma_row).into_iter().fold(f64::INFINITY, f64::min);
    best_row - best_col
}

fn max_abs(u: &[Vec<f64>]) -> f64 {
    u.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the zero-sum game where the row player maximizes `U`.
pub fn solve_zero_sum(u: &[Vec<f64>], tol: f64) -> Result<RestrictedGameSolution> {
    check_matrix(u)?;
    let scaled_tol = tol * (1.0 + max_abs(u));
    if let Some(sol) = simplex(u) {
        if sound(u, &sol, scaled_tol) {
            return Ok(sol);
        }
    }
    regret_matching(u, scaled_tol)
}

fn sound(u: &[Vec<f64>], sol: &RestrictedGameSolution, tol: f64) -> bool {
    let lo = col_payoffs(u, sol.sigma_row.probs()).into_iter().fold(f64::INFINITY, f64::min);
    let hi = row_payoffs(u, sol.sigma_col.probs()).into_iter().fold(f64::NEG_INFINITY, f64::max);
    lo >= sol.value - tol && hi <= sol.value + tol
}

/// Column player's LP on `A = U - min + 1 > 0`:
/// `max 1^T y  s.t.  A y <= 1, y >= 0`, whose optimum is `1 / v(A)`.
/// The row strategy is read off the duals of the slack columns.
fn simplex(u: &[Vec<f64>]) -> Option<RestrictedGameSolution> {
    let m = u.len();
    let n = u[0].len();
    let min = u.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - min;
    let width = n + m + 1;
    // Rows 0..m are constraints, row m is the objective (reduced costs).
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        for j in 0..n {
            t[i][j] = u[i][j] + shift;
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = 1.0;
    }
    for j in 0..n {
        t[m][j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let max_pivots = 50 * (m + n) + 1000;
    let mut pivots = 0;
    while let Some(enter) = (0..n + m).find(|&j| t[m][j] < -PIVOT_EPS) {
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][enter] > PIVOT_EPS {
                let ratio = t[i][width - 1] / t[i][enter];
                let better = match leave {
                    None => true,
                    Some(l) => ratio < best - PIVOT_EPS || (ratio <= best + PIVOT_EPS && basis[i] < basis[l]),
                };
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        // The feasible region is bounded (A > 0), so a leaving row exists.
        let r = leave?;
        let pv = t[r][enter];
        t[r].iter_mut().for_each(|x| *x /= pv);
        let pivot_row = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r {
                let f = row[enter];
                if f != 0.0 {
                    row.iter_mut().zip(&pivot_row).for_each(|(x, p)| *x -= f * p);
                }
            }
        }
        basis[r] = enter;
        pivots += 1;
        if pivots > max_pivots {
            return None;
        }
    }
    let mut y = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            y[b] = t[i][width - 1];
        }
    }
    let x: Vec<f64> = (0..m).map(|i| t[m][n + i]).collect();
    let total: f64 = y.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let sigma_col = MetaStrategy::from_weights(&y).ok()?;
    let sigma_row = MetaStrategy::from_weights(&x).ok()?;
    let value = 1.0 / total - shift;
    let gap = exploitability(u, sigma_row.probs(), sigma_col.probs());
    Some(RestrictedGameSolution {
        sigma_row,
        sigma_col,
        value,
        gap,
        method: SolveMethod::Simplex,
    })
}

/// Regret matching (the "plus" variant: regrets floored at zero, alternating
/// updates, linearly weighted averages), run until the averaged pair's
/// duality gap is within `tol` or the iteration cap is hit.
pub fn regret_matching(u: &[Vec<f64>], tol: f64) -> Result<RestrictedGameSolution> {
    let (m, n) = check_matrix(u)?;
    let mut regret_row = vec![0.0; m];
    let mut regret_col = vec![0.0; n];
    let mut avg_row = vec![0.0; m];
    let mut avg_col = vec![0.0; n];
    let strategy = |regret: &[f64]| -> Vec<f64> {
        let s: f64 = regret.iter().sum();
        if s > 0.0 {
            regret.iter().map(|p| p / s).collect()
        } else {
            vec![1.0 / regret.len() as f64; regret.len()]
        }
    };
    let mut best: Option<RestrictedGameSolution> = None;
    for it in 1..=RM_MAX_ITERS {
        let w = it as f64;
        let sc = strategy(&regret_col);
        let rp = row_payoffs(u, &sc);
        let sr = strategy(&regret_row);
        let v: f64 = rp.iter().zip(&sr).map(|(a, b)| a * b).sum();
        regret_row.iter_mut().zip(&rp).for_each(|(r, x)| *r = (*r + x - v).max(0.0));
        avg_row.iter_mut().zip(&sr).for_each(|(a, x)| *a += w * x);

        let sr = strategy(&regret_row);
        let cp = col_payoffs(u, &sr);
        let v: f64 = cp.iter().zip(&sc).map(|(a, b)| a * b).sum();
        regret_col.iter_mut().zip(&cp).for_each(|(r, x)| *r = (*r + v - x).max(0.0));
        avg_col.iter_mut().zip(&sc).for_each(|(a, x)| *a += w * x);

        if it % RM_CHECK_EVERY == 0 || it == RM_MAX_ITERS {
            let sigma_row = MetaStrategy::from_weights(&avg_row)?;
            let sigma_col = MetaStrategy::from_weights(&avg_col)?;
            let lo = col_payoffs(u, sigma_row.probs()).into_iter().fold(f64::INFINITY, f64::min);
            let hi = row_payoffs(u, sigma_col.probs()).into_iter().fold(f64::NEG_INFINITY, f64::max);
            let sol = RestrictedGameSolution {
                sigma_row,
                sigma_col,
                value: 0.5 * (lo + hi),
                gap: hi - lo,
                method: SolveMethod::RegretMatching,
            };
            let done = sol.gap <= tol;
            if best.as_ref().is_none_or(|b| sol.gap < b.gap) {
                best = Some(sol);
            }
            if done {
                break;
            }
        }
    }
    Ok(best.expect("at least one check ran"))
}
