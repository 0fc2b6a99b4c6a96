use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;

use super::{Action, ActionKind, EnvSpec, Environment, Transition};
use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const BALANCE_HORIZON: usize = 200;
const DT: f64 = 0.05;
const INITIAL_SPREAD: f64 = 0.1;

/// Unstable 1-D balance task: `omega += 0.05 (sin theta + a)`,
/// `theta += 0.05 omega`, reward `1 - |theta| / pi`, early termination once
/// `|theta| > pi / 2`.
#[derive(Clone, Debug)]
pub struct BalanceEnv {
    spec: EnvSpec,
    start: Option<(f64, f64)>,
    theta: f64,
    omega: f64,
    t: usize,
    rng: Rng,
}

pub fn make_balance_env(seed: u64) -> BalanceEnv {
    BalanceEnv {
        spec: EnvSpec {
            state_dim: 2,
            action_dim: 1,
            action_kind: ActionKind::Continuous,
            horizon: BALANCE_HORIZON,
            discount: 0.99,
            action_bounds: vec![(-1.0, 1.0)],
        },
        start: None,
        theta: 0.0,
        omega: 0.0,
        t: 0,
        rng: rng_from_seed(seed),
    }
}

pub(crate) fn balance_reward(theta: f64) -> f64 {
    1.0 - theta.abs() / PI
}

impl BalanceEnv {
    pub fn set_start(&mut self, theta: f64, omega: f64) {
        self.start = Some((theta, omega));
    }
}

impl Environment for BalanceEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        (self.theta, self.omega) = match self.start {
            Some(s) => s,
            None => (self.rng.random_range(-INITIAL_SPREAD..INITIAL_SPREAD), 0.0),
        };
        vec![self.theta, self.omega]
    }

    fn step(&mut self, action: &Action, opponent: Option<usize>) -> Result<Transition> {
        if opponent.is_some() {
            return Err(Error::InvalidArgument("balance is a single-player environment".into()));
        }
        let a = action
            .as_continuous()
            .ok_or_else(|| Error::InvalidArgument("balance takes a continuous action".into()))?;
        check_dim("balance action", 1, a.len())?;
        let torque = a[0].clamp(-1.0, 1.0);
        self.omega += DT * (self.theta.sin() + torque);
        self.theta += DT * self.omega;
        self.t += 1;
        Ok(Transition {
            state: vec![self.theta, self.omega],
            reward: balance_reward(self.theta),
            done: self.t >= self.spec.horizon || self.theta.abs() > FRAC_PI_2,
        })
    }
}
