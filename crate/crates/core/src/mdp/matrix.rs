use super::{Action, ActionKind, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};

/// One-shot two-player zero-sum matrix game. The agent picks a row, the
/// opponent a column, and the agent receives `payoff[row][col]`.
#[derive(Clone, Debug)]
pub struct MatrixGameEnv {
    spec: EnvSpec,
    payoff: Vec<Vec<f64>>,
}

pub fn make_matrix_game_env(payoff: Vec<Vec<f64>>) -> Result<MatrixGameEnv> {
    let k = payoff.len();
    if k < 2 {
        return Err(Error::InvalidSpec(format!("matrix game needs K >= 2, got {k}")));
    }
    if let Some(row) = payoff.iter().position(|r| r.len() != k) {
        return Err(Error::InvalidSpec(format!(
            "payoff matrix is not square: row {row} has {} entries, expected {k}",
            payoff[row].len()
        )));
    }
    if payoff.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec("payoff entries must be finite".into()));
    }
    let spec = EnvSpec {
        state_dim: 1,
        action_dim: k,
        action_kind: ActionKind::Discrete,
        horizon: 1,
        discount: 1.0,
        action_bounds: vec![],
    };
    Ok(MatrixGameEnv { spec, payoff })
}

impl MatrixGameEnv {
    pub fn payoff(&self) -> &[Vec<f64>] {
        &self.payoff
    }
}

impl Environment for MatrixGameEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, action: &Action, opponent: Option<usize>) -> Result<Transition> {
        let k = self.payoff.len();
        let row = action
            .as_discrete()
            .ok_or_else(|| Error::InvalidArgument("matrix game takes a discrete row".into()))?;
        let col = opponent
            .ok_or_else(|| Error::InvalidArgument("matrix game needs the opponent's column".into()))?;
        if row >= k || col >= k {
            return Err(Error::InvalidArgument(format!("move ({row}, {col}) outside {k}x{k} game")));
        }
        Ok(Transition {
            state: vec![1.0],
            reward: self.payoff[row][col],
            done: true,
        })
    }

    fn opponent_moves(&self) -> Option<usize> {
        Some(self.payoff.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn matching_pennies_variant_lookup() {
        let mut env = make_matrix_game_env(vec![vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        env.reset();
        let t = env.step(&Action::Discrete(0), Some(1)).unwrap();
        assert_eq!(t.reward, -1.0);
        assert!(t.done);
    }

    #[test]
    fn rps_diagonal_is_zero() {
        let rps = vec![
            vec![0.0, -1.0, 1.0],
            vec![1.0, 0.0, -1.0],
            vec![-1.0, 1.0, 0.0],
        ];
        let mut env = make_matrix_game_env(rps).unwrap();
        assert_eq!(env.step(&Action::Discrete(0), Some(0)).unwrap().reward, 0.0);
    }

    #[test]
    fn random_game_enumeration_reproduces_matrix() {
        let mut rng = rng_from_seed(7);
        let m: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut env = make_matrix_game_env(m.clone()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                env.reset();
                let t = env.step(&Action::Discrete(i), Some(j)).unwrap();
                assert_eq!(t.reward, m[i][j]);
                assert!(t.done);
            }
        }
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(make_matrix_game_env(vec![]).is_err());
        assert!(make_matrix_game_env(vec![vec![1.0]]).is_err());
        assert!(make_matrix_game_env(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(make_matrix_game_env(vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).is_err());
        assert!(make_matrix_game_env(vec![vec![1.0, f64::NAN], vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn requires_opponent_move() {
        let mut env = make_matrix_game_env(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(env.step(&Action::Discrete(0), None).is_err());
        assert!(env.step(&Action::Discrete(2), Some(0)).is_err());
    }
}
