//! Empirical payoff matrix over two growing populations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversaries::AdversaryAttachment;
use crate::error::{Error, Result};
use crate::mdp::{EnvConfig, Policy};
use crate::perturb::PerturbationBudget;
use crate::rng::{derive_rng, derive_seed};
use crate::rollout::{rollout, RolloutModes};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Welford accumulator. A stream of identical values yields that value
/// exactly as its mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample standard deviation (0 with fewer than two samples).
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0).sqrt()
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.std() / (self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> PayoffEstimate {
        PayoffEstimate {
            mean: self.mean,
            stderr: self.stderr(),
            count: self.n,
        }
    }
}

/// Mean episodic agent return of `agent` against `adversary` over
/// `n_episodes` rollouts. The environment and rollout streams are derived
/// from `seed`, so the estimate is a pure function of its inputs.
pub fn estimate_payoff_entry(
    agent: &Policy,
    adversary: Option<&AdversaryAttachment>,
    budget: &PerturbationBudget,
    env: &EnvConfig,
    n_episodes: usize,
    modes: RolloutModes,
    seed: u64,
) -> Result<PayoffEstimate> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let mut e = env.build(derive_seed(seed, &[0]))?;
    let mut rng = derive_rng(seed, &[1]);
    let mut acc = Welford::default();
    for _ in 0..n_episodes {
        let tr = rollout(e.as_mut(), agent, adversary.map(|a| (a, budget)), modes, &mut rng)?;
        acc.push(tr.episode_return);
    }
    Ok(acc.estimate())
}

/// Cell of the payoff matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayoffCell {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
    /// Budget schedule scale the cell was estimated under.
    pub scale: f64,
}

/// Agent-side payoffs `U[i][j]` for agent policy `i` against adversary
/// policy `j`. The adversary's payoff is `-U`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    cells: Vec<Vec<PayoffCell>>,
    cols: usize,
    min_count: usize,
}

impl PayoffMatrix {
    pub fn new(min_count: usize) -> Self {
        Self {
            cells: Vec::new(),
            cols: 0,
            min_count: min_count.max(1),
        }
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn push_row(&mut self) {
        self.cells.push(vec![PayoffCell::default(); self.cols]);
    }

    pub fn push_col(&mut self) {
        self.cols += 1;
        self.cells.iter_mut().for_each(|r| r.push(PayoffCell::default()));
    }

    pub fn cell(&self, i: usize, j: usize) -> &PayoffCell {
        &self.cells[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, est: PayoffEstimate, scale: f64) {
        self.cells[i][j] = PayoffCell {
            mean: est.mean,
            stderr: est.stderr,
            count: est.count,
            scale,
        };
    }

    /// Agent-side value of a cell.
    pub fn agent_value(&self, i: usize, j: usize) -> f64 {
        self.cells[i][j].mean
    }

    /// Adversary-side value of a cell (the exact negation).
    pub fn adversary_value(&self, i: usize, j: usize) -> f64 {
        -self.cells[i][j].mean
    }

    /// Cells without enough samples for the solver, row-major.
    pub fn missing(&self) -> Vec<(usize, usize)> {
        self.coords().filter(|&(i, j)| self.cells[i][j].count < self.min_count).collect()
    }

    /// Cells estimated under a schedule scale below `scale`.
    pub fn stale(&self, scale: f64) -> Vec<(usize, usize)> {
        self.coords()
            .filter(|&(i, j)| self.cells[i][j].count > 0 && self.cells[i][j].scale < scale)
            .collect()
    }

    fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows()).flat_map(move |i| (0..self.cols).map(move |j| (i, j)))
    }

    /// Mean matrix for the solver. Fails if any cell is under-sampled.
    pub fn values(&self) -> Result<Vec<Vec<f64>>> {
        if let Some((i, j)) = self.missing().first() {
            return Err(Error::InvalidArgument(format!(
                "payoff cell ({i}, {j}) has {} < {} samples",
                self.cells[*i][*j].count, self.min_count
            )));
        }
        Ok(self.cells.iter().map(|r| r.iter().map(|c| c.mean).collect()).collect())
    }

    /// CSV with a header of adversary ids and one row per agent id.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["agent".to_string()];
        header.extend((0..self.cols).map(|j| format!("adversary_{j}")));
        w.write_record(&header)?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut rec = vec![format!("agent_{i}")];
            rec.extend(row.iter().map(|c| format!("{}", c.mean)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON sidecar with counts, standard errors and schedule scales.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let sidecar = serde_json::json!({
            "rows": self.rows(),
            "cols": self.cols,
            "min_count": self.min_count,
            "count": self.cells.iter().map(|r| r.iter().map(|c| c.count).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "stderr": self.cells.iter().map(|r| r.iter().map(|c| c.stderr).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "scale": self.cells.iter().map(|r| r.iter().map(|c| c.scale).collect::<Vec<_>>()).collect::<Vec<_>>(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_constant_stream_is_exact() {
        let mut w = Welford::default();
        for _ in 0..37 {
            w.push(0.1 + 0.2);
        }
        assert_eq!(w.mean(), 0.1 + 0.2);
        assert_eq!(w.std(), 0.0);
    }

    #[test]
    fn matrix_growth_and_missing_cells() {
        let mut m = PayoffMatrix::new(20);
        m.push_row();
        m.push_col();
        assert_eq!(m.missing(), vec![(0, 0)]);
        m.set(0, 0, PayoffEstimate { mean: 1.5, stderr: 0.0, count: 20 }, 1.0);
        m.push_row();
        m.push_col();
        assert_eq!(m.missing(), vec![(0, 1), (1, 0), (1, 1)]);
        assert!(m.values().is_err());
        assert_eq!(m.adversary_value(0, 0), -1.5);
    }
}
