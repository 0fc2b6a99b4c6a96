use rand::Rng as _;

use super::{Action, ActionKind, EnvSpec, Environment, Transition};
use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const POINTMASS_HORIZON: usize = 100;
const DT: f64 = 0.05;
const DRAG: f64 = 0.95;
const ACTION_COST: f64 = 0.01;
const WIND_SCALE: f64 = 0.2;

/// 2-D point mass steered towards a fixed goal.
///
/// State `(x, y, vx, vy)`, action is an acceleration in `[-1, 1]^2`:
/// `pos += 0.05 * vel; vel = 0.95 * vel + 0.05 * (a + wind)`, reward
/// `-|pos - goal| - 0.01 |a|^2` on the post-step position.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    spec: EnvSpec,
    goal: [f64; 2],
    wind_enabled: bool,
    wind: [f64; 2],
    start: Option<[f64; 4]>,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
    rng: Rng,
}

pub fn make_pointmass_env(goal: [f64; 2], wind_enabled: bool, seed: u64) -> Result<PointMassEnv> {
    if goal.iter().any(|g| !(-1.0..=1.0).contains(g)) {
        return Err(Error::InvalidSpec(format!("goal {goal:?} outside [-1, 1]^2")));
    }
    let spec = EnvSpec {
        state_dim: 4,
        action_dim: 2,
        action_kind: ActionKind::Continuous,
        horizon: POINTMASS_HORIZON,
        discount: 0.99,
        action_bounds: vec![(-1.0, 1.0); 2],
    };
    Ok(PointMassEnv {
        spec,
        goal,
        wind_enabled,
        wind: [0.0; 2],
        start: None,
        pos: [0.0; 2],
        vel: [0.0; 2],
        t: 0,
        rng: rng_from_seed(seed),
    })
}

impl PointMassEnv {
    /// Fixes the reset state to `(x, y, vx, vy)` instead of a random position.
    pub fn set_start(&mut self, state: [f64; 4]) {
        self.start = Some(state);
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Environment for PointMassEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        match self.start {
            Some(s) => {
                self.pos = [s[0], s[1]];
                self.vel = [s[2], s[3]];
            }
            None => {
                self.pos = [self.rng.random_range(-1.0..1.0), self.rng.random_range(-1.0..1.0)];
                self.vel = [0.0; 2];
            }
        }
        self.wind = if self.wind_enabled {
            [
                self.rng.random_range(-WIND_SCALE..WIND_SCALE),
                self.rng.random_range(-WIND_SCALE..WIND_SCALE),
            ]
        } else {
            [0.0; 2]
        };
        self.observe()
    }

    fn step(&mut self, action: &Action, opponent: Option<usize>) -> Result<Transition> {
        if opponent.is_some() {
            return Err(Error::InvalidArgument("pointmass is a single-player environment".into()));
        }
        let a = action
            .as_continuous()
            .ok_or_else(|| Error::InvalidArgument("pointmass takes a continuous action".into()))?;
        check_dim("pointmass action", 2, a.len())?;
        let a = self.spec.clip_action(a);
        for k in 0..2 {
            self.pos[k] += DT * self.vel[k];
            self.vel[k] = DRAG * self.vel[k] + DT * (a[k] + self.wind[k]);
        }
        self.t += 1;
        let dist = ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt();
        let reward = -dist - ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
        Ok(Transition {
            state: self.observe(),
            reward,
            done: self.t >= self.spec.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resting_at_goal_costs_nothing() {
        let mut env = make_pointmass_env([0.3, -0.2], false, 1).unwrap();
        env.set_start([0.3, -0.2, 0.0, 0.0]);
        env.reset();
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let t = env.step(&Action::Continuous(vec![0.0, 0.0]), None).unwrap();
            total += t.reward;
            steps += 1;
            if t.done {
                break;
            }
        }
        assert_eq!(steps, POINTMASS_HORIZON);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn constant_push_matches_closed_form() {
        // vel_t = 1 - 0.95^t and pos_T = 0.05 * sum_{k<T} vel_k
        //       = 0.05 T - (1 - 0.95^T).
        let mut env = make_pointmass_env([1.0, 0.0], false, 0).unwrap();
        env.set_start([0.0; 4]);
        let mut s = env.reset();
        let mut total = 0.0;
        let mut expected_total = 0.0;
        for t in 1..=POINTMASS_HORIZON {
            let tr = env.step(&Action::Continuous(vec![1.0, 0.0]), None).unwrap();
            s = tr.state;
            total += tr.reward;
            let x = 0.05 * t as f64 - (1.0 - 0.95f64.powi(t as i32));
            expected_total += -(x - 1.0).abs() - 0.01;
        }
        let x_final = 0.05 * 100.0 - (1.0 - 0.95f64.powi(100));
        let v_final = 1.0 - 0.95f64.powi(100);
        assert!((s[0] - x_final).abs() < 1e-12, "{} vs {x_final}", s[0]);
        assert!((s[2] - v_final).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert!((total - expected_total).abs() < 1e-9);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut env = make_pointmass_env([0.0, 0.0], true, 42).unwrap();
            let mut out = env.reset();
            for k in 0..50 {
                let a = vec![(k as f64 * 0.1).sin(), (k as f64 * 0.07).cos()];
                let t = env.step(&Action::Continuous(a), None).unwrap();
                out.extend(t.state);
                out.push(t.reward);
            }
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn goal_must_lie_in_unit_box() {
        assert!(make_pointmass_env([1.5, 0.0], false, 0).is_err());
    }
}
