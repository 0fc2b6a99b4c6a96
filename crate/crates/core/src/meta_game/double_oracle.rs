//! Exact double oracle on a fully known matrix game.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::solver::{
    best_response_col, best_response_row, check_matrix, exploitability, solve_zero_sum, MetaStrategy,
    RestrictedGameSolution, DEFAULT_SOLVER_TOL,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Termination threshold on exact full-game exploitability.
pub const DEFAULT_DO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoResult {
    /// Full-game strategies and value at termination.
    pub solution: RestrictedGameSolution,
    /// Number of restricted games solved.
    pub iterations: usize,
    /// Row population in insertion order (may repeat an index).
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Full-game exploitability of each iteration's restricted solution.
    pub exploitability: Vec<f64>,
}

impl DoResult {
    /// Population snapshot before each iteration's expansion: entry `k` has
    /// `k + 1` strategies per side.
    pub fn trace(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        (0..self.iterations)
            .map(|k| (self.rows[..=k].to_vec(), self.cols[..=k].to_vec()))
            .collect()
    }
}

/// Initial pure pair drawn from `seed`: row first, then column.
pub fn initial_pair(rows: usize, cols: usize, seed: u64) -> (usize, usize) {
    let mut rng = Rng::seed_from_u64(seed);
    let r = rng.random_range(0..rows);
    let c = rng.random_range(0..cols);
    (r, c)
}

/// Sums a population-indexed strategy into a full-game strategy.
pub fn aggregate(population: &[usize], sigma: &[f64], n: usize) -> Vec<f64> {
    let mut full = vec![0.0; n];
    for (&k, &p) in population.iter().zip(sigma) {
        full[k] += p;
    }
    full
}

fn restrict(u: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|&i| cols.iter().map(|&j| u[i][j]).collect()).collect()
}

pub fn double_oracle_matrix(u: &[Vec<f64>], seed: u64) -> Result<DoResult> {
    let (m, n) = check_matrix(u)?;
    double_oracle_from(u, initial_pair(m, n, seed), DEFAULT_DO_TOL)
}

/// Double oracle from an explicit initial pair. Each non-terminal iteration
/// appends both sides' exact best responses to the restricted equilibrium.
pub fn double_oracle_from(u: &[Vec<f64>], init: (usize, usize), tol: f64) -> Result<DoResult> {
    let (m, n) = check_matrix(u)?;
    if init.0 >= m || init.1 >= n {
        return Err(Error::InvalidArgument(format!("initial pair {init:?} outside {m}x{n}")));
    }
    let mut rows = vec![init.0];
    let mut cols = vec![init.1];
    let mut history = Vec::new();
    let cap = 2 * (m + n) + 4;
    for iteration in 1..=cap {
        let sol = solve_zero_sum(&restrict(u, &rows, &cols), DEFAULT_SOLVER_TOL)?;
        let sr = aggregate(&rows, sol.sigma_row.probs(), m);
        let sc = aggregate(&cols, sol.sigma_col.probs(), n);
        let e = exploitability(u, &sr, &sc);
        history.push(e);
        if e <= tol {
            let gap = e;
            return Ok(DoResult {
                solution: RestrictedGameSolution {
                    sigma_row: MetaStrategy::from_weights(&sr)?,
                    sigma_col: MetaStrategy::from_weights(&sc)?,
                    value: sol.value,
                    gap,
                    method: sol.method,
                },
                iterations: iteration,
                rows,
                cols,
                exploitability: history,
            });
        }
        rows.push(best_response_row(u, &sc));
        cols.push(best_response_col(u, &sr));
    }
    Err(Error::InvalidArgument(format!(
        "double oracle did not reach exploitability {tol} in {cap} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rps() -> Vec<Vec<f64>> {
        vec![vec![0.0, -1.0, 1.0], vec![1.0, 0.0, -1.0], vec![-1.0, 1.0, 0.0]]
    }

    #[test]
    fn rps_from_rock() {
        let r = double_oracle_from(&rps(), (0, 0), DEFAULT_DO_TOL).unwrap();
        assert!(r.iterations <= 4, "{}", r.iterations);
        assert!(r.solution.value.abs() < 1e-9);
        for p in r.solution.sigma_row.probs().iter().chain(r.solution.sigma_col.probs()) {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn saddle_terminates_fast() {
        let u = vec![vec![0.0, -1.0], vec![1.0, 0.0]];
        for init in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let r = double_oracle_from(&u, init, DEFAULT_DO_TOL).unwrap();
            assert!(r.iterations <= 2);
            assert_eq!(r.solution.sigma_row.probs(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn trace_prefixes_grow_by_one() {
        let r = double_oracle_from(&rps(), (0, 0), DEFAULT_DO_TOL).unwrap();
        let trace = r.trace();
        assert_eq!(trace.len(), r.iterations);
        for (k, (rows, cols)) in trace.iter().enumerate() {
            assert_eq!(rows.len(), k + 1);
            assert_eq!(cols.len(), k + 1);
        }
    }
}
