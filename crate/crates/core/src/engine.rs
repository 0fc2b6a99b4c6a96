//! The GRAD outer loop: both populations grow by one best response per epoch,
//! the payoff matrix is completed, and the restricted game is re-solved until
//! the previous epoch's meta-strategies are certified by a small
//! exploitability estimate.
//!
//! The exploitability of the meta-strategies an epoch started from is read off
//! the payoff entries of the two new best responses, so certifying a pair
//! costs no training beyond the epoch itself. Epochs played under a ramped-down
//! budget never count as converged.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversaries::AdversaryAttachment;
use crate::error::{Error, Result};
use crate::eval::{natural_eval, random_action_return};
use crate::mdp::{EnvConfig, Policy};
use crate::meta_game::{
    estimate_payoff_entry, solve_zero_sum, MetaStrategy, PayoffEstimate, PayoffMatrix, DEFAULT_SOLVER_TOL,
};
use crate::oracle::{BestResponse, BestResponseOracle, GameSetup};
use crate::perturb::PerturbationBudget;
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Convergence threshold on the exploitability estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Threshold {
    Absolute { value: f64 },
    /// `fraction * (natural return - random-policy return)`; for matrix games
    /// `fraction * (max payoff - min payoff)`.
    Relative { fraction: f64 },
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Relative { fraction: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub max_epochs: usize,
    pub threshold: Threshold,
    /// Fraction of `max_epochs` over which budgets ramp up linearly.
    pub warmup_fraction: f64,
    /// Episodes per payoff cell; cells with fewer are never used.
    pub payoff_episodes: usize,
    /// Re-estimate cells computed under a partial budget once the schedule
    /// reaches its targets.
    pub refresh_stale: bool,
    /// Run the two best responses and the payoff cells on the thread pool.
    pub parallel: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            threshold: Threshold::default(),
            warmup_fraction: 0.5,
            payoff_episodes: 20,
            refresh_stale: true,
            parallel: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.payoff_episodes == 0 {
            return Err(Error::InvalidArgument("max_epochs and payoff_episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidArgument("warmup_fraction must lie in [0, 1]".into()));
        }
        match self.threshold {
            Threshold::Absolute { value } if !value.is_finite() => {
                Err(Error::InvalidArgument("threshold must be finite".into()))
            }
            Threshold::Relative { fraction } if !(fraction > 0.0 && fraction.is_finite()) => {
                Err(Error::InvalidArgument("threshold fraction must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Linear warmup of the perturbation budget over epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub target: PerturbationBudget,
    pub warmup_fraction: f64,
    pub total_epochs: usize,
}

impl BudgetSchedule {
    /// Scale during (1-based) epoch `epoch`: `min(1, (epoch / total) / warmup)`.
    pub fn scale(&self, epoch: usize) -> f64 {
        if self.warmup_fraction <= 0.0 {
            return 1.0;
        }
        let progress = epoch as f64 / self.total_epochs as f64;
        (progress / self.warmup_fraction).min(1.0)
    }

    pub fn active(&self, epoch: usize) -> PerturbationBudget {
        self.target.scaled(self.scale(epoch))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradState {
    /// Completed epochs.
    pub epoch: usize,
    pub agents: Vec<Policy>,
    pub adversaries: Vec<AdversaryAttachment>,
    pub payoff: PayoffMatrix,
    pub sigma_agent: MetaStrategy,
    pub sigma_adversary: MetaStrategy,
    pub schedule: BudgetSchedule,
    pub rng: Rng,
    /// Exploitability estimate of the meta-strategies each epoch started from.
    pub exploitability: Vec<f64>,
    /// Resolved convergence threshold.
    pub threshold: Option<f64>,
    pub converged: bool,
}

impl GradState {
    pub fn check(&self) -> Result<()> {
        let (n_a, n_v) = (self.agents.len(), self.adversaries.len());
        if self.payoff.rows() != n_a || self.payoff.cols() != n_v {
            return Err(Error::InvalidArgument(format!(
                "payoff is {}x{} but populations are {n_a}x{n_v}",
                self.payoff.rows(),
                self.payoff.cols()
            )));
        }
        if self.sigma_agent.len() != n_a || self.sigma_adversary.len() != n_v {
            return Err(Error::InvalidArgument("meta-strategies do not cover the populations".into()));
        }
        Ok(())
    }
}

/// Summary of one epoch, also written to the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub budget_scale: f64,
    pub exploitability: f64,
    pub threshold: f64,
    pub converged: bool,
    pub agent_response_value: f64,
    pub adversary_response_value: f64,
    pub cells_estimated: usize,
    pub game_value: f64,
    pub population: usize,
}

fn matrix_range(env: &EnvConfig) -> Option<f64> {
    match env {
        EnvConfig::MatrixGame { payoff } => {
            let flat = payoff.iter().flatten();
            let max = flat.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = flat.cloned().fold(f64::INFINITY, f64::min);
            Some(max - min)
        }
        _ => None,
    }
}

fn positive(x: f64) -> f64 {
    x.max(1e-12)
}

fn estimate_cells(
    cells: &[(usize, usize)],
    state: &GradState,
    budget: &PerturbationBudget,
    setup: &GameSetup,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<Vec<PayoffEstimate>> {
    let one = |&(i, j): &(usize, usize)| {
        estimate_payoff_entry(
            &state.agents[i],
            Some(&state.adversaries[j]),
            budget,
            &setup.env,
            cfg.payoff_episodes,
            setup.eval_modes(),
            derive_seed(seed, &[i as u64, j as u64]),
        )
    };
    if cfg.parallel {
        cells.par_iter().map(one).collect()
    } else {
        cells.iter().map(one).collect()
    }
}

/// Initial populations (one fresh policy per side, agent drawn first), the
/// single payoff cell and the trivial meta-strategies.
pub fn init_state(cfg: &EngineConfig, setup: &GameSetup, oracle: &dyn BestResponseOracle, seed: u64) -> Result<GradState> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let agent = oracle.initial_agent(setup, &mut rng)?;
    let adversary = oracle.initial_adversary(setup, &mut rng)?;
    let schedule = BudgetSchedule {
        target: setup.budget,
        warmup_fraction: cfg.warmup_fraction,
        total_epochs: cfg.max_epochs,
    };
    let mut state = GradState {
        epoch: 0,
        agents: vec![agent],
        adversaries: vec![adversary],
        payoff: PayoffMatrix::new(cfg.payoff_episodes),
        sigma_agent: MetaStrategy::pure(1, 0),
        sigma_adversary: MetaStrategy::pure(1, 0),
        schedule,
        rng,
        exploitability: Vec::new(),
        threshold: None,
        converged: false,
    };
    state.threshold = match (cfg.threshold, matrix_range(&setup.env)) {
        (Threshold::Absolute { value }, _) => Some(value),
        (Threshold::Relative { fraction }, Some(range)) => Some(positive(fraction * range)),
        (Threshold::Relative { .. }, None) => None,
    };
    state.payoff.push_row();
    state.payoff.push_col();
    let payoff_seed = state.rng.random::<u64>();
    let budget = state.schedule.active(0);
    let est = estimate_cells(&[(0, 0)], &state, &budget, setup, cfg, payoff_seed)?;
    state.payoff.set(0, 0, est[0], state.schedule.scale(0));
    Ok(state)
}

/// One epoch. The input state is left untouched; on error nothing is
/// committed.
pub fn grad_epoch(
    state: &GradState,
    cfg: &EngineConfig,
    setup: &GameSetup,
    oracle: &dyn BestResponseOracle,
) -> Result<(GradState, EpochReport)> {
    state.check()?;
    let mut st = state.clone();
    let k = st.epoch + 1;
    let scale = st.schedule.scale(k);
    let budget = st.schedule.active(k);
    let seed_agent = st.rng.random::<u64>();
    let seed_adv = st.rng.random::<u64>();
    let seed_payoff = st.rng.random::<u64>();

    let agent_job = || {
        oracle.agent_response(
            setup,
            &state.adversaries,
            &state.sigma_adversary,
            &budget,
            state.agents.last(),
            &mut rng_from_seed(seed_agent),
        )
    };
    let adv_job = || {
        oracle.adversary_response(
            setup,
            &state.agents,
            &state.sigma_agent,
            &budget,
            state.adversaries.last(),
            &mut rng_from_seed(seed_adv),
        )
    };
    let (br_agent, br_adv): (Result<BestResponse<Policy>>, Result<BestResponse<AdversaryAttachment>>) = if cfg.parallel {
        rayon::join(agent_job, adv_job)
    } else {
        (agent_job(), adv_job())
    };
    let (br_agent, br_adv) = (br_agent?, br_adv?);

    st.agents.push(br_agent.policy.clone());
    st.adversaries.push(br_adv.policy);
    st.payoff.push_row();
    st.payoff.push_col();

    let mut cells = st.payoff.missing();
    if cfg.refresh_stale && scale >= 1.0 && !budget.is_null() {
        cells.extend(st.payoff.stale(1.0));
        cells.sort_unstable();
        cells.dedup();
    }
    let estimates = estimate_cells(&cells, &st, &budget, setup, cfg, seed_payoff)?;
    for (&(i, j), est) in cells.iter().zip(estimates) {
        st.payoff.set(i, j, est, scale);
    }
    let u = st.payoff.values()?;

    let new_row = st.agents.len() - 1;
    let new_col = st.adversaries.len() - 1;
    let agent_value: f64 = state
        .sigma_adversary
        .probs()
        .iter()
        .enumerate()
        .map(|(j, p)| p * u[new_row][j])
        .sum();
    let adversary_value: f64 = -state
        .sigma_agent
        .probs()
        .iter()
        .enumerate()
        .map(|(i, p)| p * u[i][new_col])
        .sum::<f64>();
    let e_hat = agent_value + adversary_value;

    let threshold = match st.threshold {
        Some(t) => t,
        None => {
            let Threshold::Relative { fraction } = cfg.threshold else {
                unreachable!("absolute thresholds resolve at init")
            };
            let natural = natural_eval(&br_agent.policy, &setup.env, cfg.payoff_episodes, &[seed_payoff], setup.eval_mode)?;
            let random = random_action_return(&setup.env, cfg.payoff_episodes, seed_payoff)?;
            let t = positive(fraction * (natural.mean - random));
            st.threshold = Some(t);
            t
        }
    };

    let sol = solve_zero_sum(&u, DEFAULT_SOLVER_TOL)?;
    st.exploitability.push(e_hat);
    st.epoch = k;
    // A ramped-down budget defines a different game; only the target one can converge.
    let full_budget = scale >= 1.0 || st.schedule.target.is_null();
    let converged = full_budget && e_hat <= threshold;
    let game_value;
    if converged {
        st.converged = true;
        st.sigma_agent = state.sigma_agent.padded(st.agents.len());
        st.sigma_adversary = state.sigma_adversary.padded(st.adversaries.len());
        game_value = crate::meta_game::row_payoffs(&u, st.sigma_adversary.probs())
            .iter()
            .zip(st.sigma_agent.probs())
            .map(|(a, b)| a * b)
            .sum();
    } else {
        st.sigma_agent = sol.sigma_row;
        st.sigma_adversary = sol.sigma_col;
        game_value = sol.value;
    }
    let report = EpochReport {
        epoch: k,
        budget_scale: scale,
        exploitability: e_hat,
        threshold,
        converged,
        agent_response_value: br_agent.value,
        adversary_response_value: br_adv.value,
        cells_estimated: cells.len(),
        game_value,
        population: st.agents.len(),
    };
    Ok((st, report))
}

#[derive(Clone, Debug)]
pub struct GradOutcome {
    pub state: GradState,
    pub reports: Vec<EpochReport>,
    pub converged: bool,
}

/// Runs epochs from a fresh state until convergence or the epoch limit.
pub fn run_grad(
    cfg: &EngineConfig,
    setup: &GameSetup,
    oracle: &dyn BestResponseOracle,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<GradOutcome> {
    let state = init_state(cfg, setup, oracle, seed)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join("events.jsonl"));
        write_artifacts(dir, &state, None)?;
    }
    resume_grad(state, cfg, setup, oracle, run_dir)
}

/// Continues a run from `state` (for example one loaded from a checkpoint).
pub fn resume_grad(
    mut state: GradState,
    cfg: &EngineConfig,
    setup: &GameSetup,
    oracle: &dyn BestResponseOracle,
    run_dir: Option<&Path>,
) -> Result<GradOutcome> {
    let mut reports = Vec::new();
    while !state.converged && state.epoch < cfg.max_epochs {
        let (next, report) = grad_epoch(&state, cfg, setup, oracle)?;
        state = next;
        if let Some(dir) = run_dir {
            write_artifacts(dir, &state, Some(&report))?;
        }
        reports.push(report);
    }
    let converged = state.converged;
    Ok(GradOutcome {
        state,
        reports,
        converged,
    })
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("state-epoch-{epoch}.ckpt"))
}

fn write_artifacts(dir: &Path, state: &GradState, report: Option<&EpochReport>) -> Result<()> {
    save_checkpoint(state, &checkpoint_path(dir, state.epoch))?;
    state.payoff.write_csv(&dir.join("payoff.csv"))?;
    state.payoff.write_json(&dir.join("payoff.json"))?;
    let mut w = csv::Writer::from_path(dir.join("exploitability.csv"))?;
    w.write_record(["epoch", "exploitability"])?;
    for (k, e) in state.exploitability.iter().enumerate() {
        w.write_record([(k + 1).to_string(), e.to_string()])?;
    }
    w.flush()?;
    let event = match report {
        Some(r) => serde_json::json!({ "event": "epoch", "report": r }),
        None => serde_json::json!({ "event": "init", "population": state.agents.len() }),
    };
    let mut log = OpenOptions::new().create(true).append(true).open(dir.join("events.jsonl"))?;
    writeln!(log, "{event}")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    state: GradState,
}

pub fn save_checkpoint(state: &GradState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        state: state.clone(),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GradState> {
    let bytes = fs::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version:?}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
    file.state.check()?;
    Ok(file.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_linear_then_flat() {
        let s = BudgetSchedule {
            target: PerturbationBudget::state(0.1, 0.02).unwrap(),
            warmup_fraction: 0.5,
            total_epochs: 20,
        };
        assert!((s.active(5).epsilon - 0.05).abs() < 1e-15);
        assert_eq!(s.scale(10), 1.0);
        assert_eq!(s.scale(17), 1.0);
        assert_eq!(s.scale(0), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        let bad = EngineConfig {
            max_epochs: 0,
            ..EngineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
