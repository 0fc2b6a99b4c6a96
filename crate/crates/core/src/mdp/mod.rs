//! Environment abstraction, the native desk-scale environments and the
//! stochastic policy representation.

mod balance;
mod matrix;
mod normalize;
mod pointmass;
mod policy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use balance::{make_balance_env, BalanceEnv, BALANCE_HORIZON};
pub use matrix::{make_matrix_game_env, MatrixGameEnv};
pub use normalize::{ObsNormalizer, RunningStat};
pub use pointmass::{make_pointmass_env, PointMassEnv, POINTMASS_HORIZON};
pub use policy::{
    ActMode, Activation, Architecture, Decision, Distribution, HeadKind, Policy, PolicyCheckpoint,
    POLICY_FORMAT_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    /// Vector length for continuous actions, number of choices for discrete.
    pub action_dim: usize,
    pub action_kind: ActionKind,
    pub horizon: usize,
    pub discount: f64,
    /// Per-dimension `[lo, hi]`; empty for discrete actions.
    pub action_bounds: Vec<(f64, f64)>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::InvalidSpec("state_dim and action_dim must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidSpec(format!("discount {} outside (0, 1]", self.discount)));
        }
        match self.action_kind {
            ActionKind::Continuous => {
                if self.action_bounds.len() != self.action_dim {
                    return Err(Error::InvalidSpec("one bound pair per action dimension".into()));
                }
                if let Some((lo, hi)) = self.action_bounds.iter().find(|(lo, hi)| !(lo < hi)) {
                    return Err(Error::InvalidSpec(format!("empty action interval [{lo}, {hi}]")));
                }
            }
            ActionKind::Discrete => {
                if !self.action_bounds.is_empty() {
                    return Err(Error::InvalidSpec("discrete actions take no bounds".into()));
                }
            }
        }
        Ok(())
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_bounds)
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// An episodic environment. `step` forces `done` at the horizon.
///
/// Two-player environments (matrix games) additionally take the opponent's
/// discrete move; single-player environments reject one.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &Action, opponent: Option<usize>) -> Result<Transition>;

    /// Size of the opponent's move set, for two-player environments.
    fn opponent_moves(&self) -> Option<usize> {
        None
    }
}

/// Serializable description of an environment, used as the factory for
/// fresh instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    MatrixGame {
        payoff: Vec<Vec<f64>>,
    },
    Pointmass {
        goal: [f64; 2],
        #[serde(default)]
        wind: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<[f64; 4]>,
    },
    Balance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<[f64; 2]>,
    },
}

impl EnvConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::MatrixGame { payoff } => Box::new(make_matrix_game_env(payoff.clone())?),
            EnvConfig::Pointmass { goal, wind, start } => {
                let mut env = make_pointmass_env(*goal, *wind, seed)?;
                if let Some(s) = start {
                    env.set_start(*s);
                }
                Box::new(env)
            }
            EnvConfig::Balance { start } => {
                let mut env = make_balance_env(seed);
                if let Some(s) = start {
                    env.set_start(s[0], s[1]);
                }
                Box::new(env)
            }
        })
    }

    /// Spec of the environment this config builds.
    pub fn spec(&self) -> Result<EnvSpec> {
        Ok(self.build(0)?.spec().clone())
    }

    pub fn opponent_moves(&self) -> Result<Option<usize>> {
        Ok(self.build(0)?.opponent_moves())
    }

    pub fn label(&self) -> &'static str {
        match self {
            EnvConfig::MatrixGame { .. } => "matrix_game",
            EnvConfig::Pointmass { .. } => "pointmass",
            EnvConfig::Balance { .. } => "balance",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let good = EnvSpec {
            state_dim: 2,
            action_dim: 1,
            action_kind: ActionKind::Continuous,
            horizon: 10,
            discount: 0.99,
            action_bounds: vec![(-1.0, 1.0)],
        };
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.horizon = 0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.discount = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.action_bounds = vec![(1.0, 1.0)];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn env_config_round_trips_through_json() {
        let cfg = EnvConfig::Pointmass {
            goal: [0.5, -0.5],
            wind: true,
            start: None,
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<EnvConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<EnvConfig>(r#"{"name":"balance","bogus":1}"#).is_err());
    }
}
