use rand::Rng as _;

use super::{BestResponse, BestResponseOracle, GameSetup};
use crate::adversaries::{AdversaryAttachment, AdversaryKind};
use crate::error::{Error, Result};
use crate::mdp::{Action, EnvConfig, Policy};
use crate::meta_game::{aggregate, best_response_col, best_response_row, col_payoffs, row_payoffs, MetaStrategy};
use crate::perturb::PerturbationBudget;
use crate::rng::Rng;

/// Exact best responses for matrix games. Policies are pure strategies.
#[derive(Clone, Copy, Debug, Default)]
pub struct EnumerationOracle;

/// The row or column a policy plays deterministically.
pub fn pure_index(policy: &Policy) -> Result<usize> {
    let obs = vec![1.0; policy.architecture().obs_dim];
    match policy.distribution(&obs)?.mode() {
        Action::Discrete(i) => Ok(i),
        Action::Continuous(_) => Err(Error::InvalidArgument("not a discrete policy".into())),
    }
}

fn matrix(setup: &GameSetup) -> Result<&[Vec<f64>]> {
    match &setup.env {
        EnvConfig::MatrixGame { payoff } => Ok(payoff),
        other => Err(Error::Unsupported(format!(
            "enumeration oracle needs a matrix game, got {}",
            other.label()
        ))),
    }
}

fn opponent_index(att: &AdversaryAttachment) -> Result<usize> {
    if att.kind != AdversaryKind::Opponent {
        return Err(Error::Unsupported("enumeration oracle plays opponent attachments only".into()));
    }
    pure_index(att.director()?)
}

impl BestResponseOracle for EnumerationOracle {
    fn initial_agent(&self, setup: &GameSetup, rng: &mut Rng) -> Result<Policy> {
        let u = matrix(setup)?;
        Policy::pure_choice(1, u.len(), rng.random_range(0..u.len()))
    }

    fn initial_adversary(&self, setup: &GameSetup, rng: &mut Rng) -> Result<AdversaryAttachment> {
        let u = matrix(setup)?;
        let n = u[0].len();
        AdversaryAttachment::pure_opponent(1, n, rng.random_range(0..n))
    }

    fn agent_response(
        &self,
        setup: &GameSetup,
        opponents: &[AdversaryAttachment],
        meta: &MetaStrategy,
        _budget: &PerturbationBudget,
        _warm: Option<&Policy>,
        _rng: &mut Rng,
    ) -> Result<BestResponse<Policy>> {
        let u = matrix(setup)?;
        let cols = opponents.iter().map(opponent_index).collect::<Result<Vec<_>>>()?;
        let sc = aggregate(&cols, meta.probs(), u[0].len());
        let i = best_response_row(u, &sc);
        Ok(BestResponse {
            policy: Policy::pure_choice(1, u.len(), i)?,
            value: row_payoffs(u, &sc)[i],
            curve: Vec::new(),
        })
    }

    fn adversary_response(
        &self,
        setup: &GameSetup,
        opponents: &[Policy],
        meta: &MetaStrategy,
        _budget: &PerturbationBudget,
        _warm: Option<&AdversaryAttachment>,
        _rng: &mut Rng,
    ) -> Result<BestResponse<AdversaryAttachment>> {
        let u = matrix(setup)?;
        let rows = opponents.iter().map(pure_index).collect::<Result<Vec<_>>>()?;
        let sr = aggregate(&rows, meta.probs(), u.len());
        let j = best_response_col(u, &sr);
        Ok(BestResponse {
            policy: AdversaryAttachment::pure_opponent(1, u[0].len(), j)?,
            value: -col_payoffs(u, &sr)[j],
            curve: Vec::new(),
        })
    }
}
