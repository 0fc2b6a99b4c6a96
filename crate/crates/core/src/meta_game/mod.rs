//! Restricted zero-sum games over policy populations: payoff bookkeeping,
//! equilibrium solving, exploitability and the exact double oracle.

mod double_oracle;
mod payoff;
mod solver;

use crate::adversaries::AdversaryAttachment;
use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::oracle::{BestResponseOracle, GameSetup};
use crate::perturb::PerturbationBudget;
use crate::rng::{derive_seed, Rng};

pub use double_oracle::{aggregate, double_oracle_from, double_oracle_matrix, initial_pair, DoResult, DEFAULT_DO_TOL};
pub use payoff::{estimate_payoff_entry, PayoffCell, PayoffEstimate, PayoffMatrix, Welford};
pub use solver::{
    best_response_col, best_response_row, col_payoffs, exploitability, regret_matching, row_payoffs, solve_zero_sum,
    MetaStrategy, RestrictedGameSolution, SolveMethod, DEFAULT_SOLVER_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExploitabilityEstimate {
    /// Agent best-response payoff against the adversary mixture.
    pub agent_value: f64,
    /// Adversary best-response payoff (negated agent return) against the
    /// agent mixture.
    pub adversary_value: f64,
}

impl ExploitabilityEstimate {
    pub fn total(&self) -> f64 {
        self.agent_value + self.adversary_value
    }
}

/// Approximate exploitability of `(sigma_agent, sigma_adversary)`: fresh
/// best responses are obtained from `oracle` for both sides and their
/// payoffs against the opposing mixture are estimated by rollouts.
#[allow(clippy::too_many_arguments)]
pub fn approx_exploitability(
    setup: &GameSetup,
    oracle: &dyn BestResponseOracle,
    agents: &[Policy],
    adversaries: &[AdversaryAttachment],
    sigma_agent: &MetaStrategy,
    sigma_adversary: &MetaStrategy,
    budget: &PerturbationBudget,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<ExploitabilityEstimate> {
    if sigma_agent.len() != agents.len() || sigma_adversary.len() != adversaries.len() {
        return Err(Error::InvalidArgument("meta-strategies do not match the populations".into()));
    }
    let br_agent = oracle.agent_response(setup, adversaries, sigma_adversary, budget, agents.last(), rng)?;
    let br_adv = oracle.adversary_response(setup, agents, sigma_agent, budget, adversaries.last(), rng)?;
    let seed: u64 = rand::Rng::random(rng);
    let modes = setup.eval_modes();
    let mut agent_value = 0.0;
    for (j, (adv, p)) in adversaries.iter().zip(sigma_adversary.probs()).enumerate() {
        if *p > 0.0 {
            let est = estimate_payoff_entry(&br_agent.policy, Some(adv), budget, &setup.env, n_episodes, modes, derive_seed(seed, &[0, j as u64]))?;
            agent_value += p * est.mean;
        }
    }
    let mut adversary_value = 0.0;
    for (i, (agent, p)) in agents.iter().zip(sigma_agent.probs()).enumerate() {
        if *p > 0.0 {
            let est = estimate_payoff_entry(agent, Some(&br_adv.policy), budget, &setup.env, n_episodes, modes, derive_seed(seed, &[1, i as u64]))?;
            adversary_value -= p * est.mean;
        }
    }
    Ok(ExploitabilityEstimate {
        agent_value,
        adversary_value,
    })
}
