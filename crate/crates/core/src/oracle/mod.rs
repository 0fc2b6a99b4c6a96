//! Best-response oracles.
//!
//! An oracle produces one side's best response to the opponent's
//! meta-strategy. [`PpoOracle`] trains it with clipped-surrogate policy
//! gradient; [`EnumerationOracle`] computes it exactly on matrix games.

mod enumeration;
mod gae;
mod ppo;

use serde::{Deserialize, Serialize};

use crate::adversaries::{AdversaryAttachment, AdversaryKind};
use crate::error::Result;
use crate::mdp::{ActMode, ActionKind, Architecture, EnvConfig, Policy};
use crate::meta_game::MetaStrategy;
use crate::perturb::PerturbationBudget;
use crate::rng::Rng;
use crate::rollout::RolloutModes;

pub use enumeration::{pure_index, EnumerationOracle};
pub use gae::{gae_advantages, value_targets};
pub use ppo::{
    clipped_surrogate_update, ppo_loss_and_grad, train_best_response, write_curve_csv, CurvePoint, Learner, LossReport,
    OracleConfig, Opponents, PpoOracle, PpoOptimizer, Sample, TrainOutcome, UpdateStats, ValueFunction,
};

/// Everything an oracle needs to know about the game being played.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSetup {
    pub env: EnvConfig,
    pub adversary: AdversaryKind,
    /// Target budget; the engine passes scheduled fractions of it.
    pub budget: PerturbationBudget,
    pub agent_hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    #[serde(default)]
    pub normalize_obs: bool,
    /// Act mode of frozen policies during payoff estimation, evaluation and
    /// as opponents during best-response training.
    pub eval_mode: ActMode,
}

impl GameSetup {
    /// Matrix game with linear categorical policies on both sides.
    pub fn matrix(payoff: Vec<Vec<f64>>) -> Self {
        Self {
            env: EnvConfig::MatrixGame { payoff },
            adversary: AdversaryKind::Opponent,
            budget: PerturbationBudget::zero(),
            agent_hidden: Vec::new(),
            adversary_hidden: Vec::new(),
            normalize_obs: false,
            eval_mode: ActMode::Mean,
        }
    }

    pub fn eval_modes(&self) -> RolloutModes {
        RolloutModes {
            agent: self.eval_mode,
            adversary: self.eval_mode,
        }
    }

    /// Fresh agent policy with this setup's architecture.
    pub fn new_agent(&self, rng: &mut Rng) -> Result<Policy> {
        let spec = self.env.spec()?;
        let arch = match spec.action_kind {
            ActionKind::Continuous => Architecture::gaussian(
                spec.state_dim,
                &self.agent_hidden,
                spec.action_dim,
                Some(spec.action_bounds.clone()),
            ),
            ActionKind::Discrete => Architecture::categorical(spec.state_dim, &self.agent_hidden, spec.action_dim),
        };
        Policy::new(arch, self.normalize_obs, rng)
    }

    /// Fresh adversary attachment of this setup's kind at the target budget.
    pub fn new_adversary(&self, rng: &mut Rng) -> Result<AdversaryAttachment> {
        let spec = self.env.spec()?;
        AdversaryAttachment::new(
            self.adversary,
            &spec,
            self.env.opponent_moves()?,
            self.budget,
            &self.adversary_hidden,
            self.normalize_obs,
            rng,
        )
    }
}

/// A trained (or enumerated) best response and its estimated value for the
/// responding side.
#[derive(Clone, Debug)]
pub struct BestResponse<P> {
    pub policy: P,
    pub value: f64,
    pub curve: Vec<CurvePoint>,
}

pub trait BestResponseOracle: Send + Sync {
    fn initial_agent(&self, setup: &GameSetup, rng: &mut Rng) -> Result<Policy>;

    fn initial_adversary(&self, setup: &GameSetup, rng: &mut Rng) -> Result<AdversaryAttachment>;

    /// Agent response to adversaries sampled from `meta`. `warm` is the most
    /// recent agent in the population, for oracles that warm-start.
    fn agent_response(
        &self,
        setup: &GameSetup,
        opponents: &[AdversaryAttachment],
        meta: &MetaStrategy,
        budget: &PerturbationBudget,
        warm: Option<&Policy>,
        rng: &mut Rng,
    ) -> Result<BestResponse<Policy>>;

    fn adversary_response(
        &self,
        setup: &GameSetup,
        opponents: &[Policy],
        meta: &MetaStrategy,
        budget: &PerturbationBudget,
        warm: Option<&AdversaryAttachment>,
        rng: &mut Rng,
    ) -> Result<BestResponse<AdversaryAttachment>>;
}
