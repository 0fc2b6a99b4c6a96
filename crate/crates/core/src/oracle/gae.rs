//! Generalized advantage estimation.

use crate::error::{check_dim, Error, Result};

/// GAE over a flat batch of whole episodes. `dones[t]` marks the last step
/// of an episode, after which the bootstrap value is zero. The final step of
/// the batch is also treated as terminal.
pub fn gae_advantages(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    check_dim("values", n, values.len())?;
    check_dim("dones", n, dones.len())?;
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let terminal = dones[t] || t + 1 == n;
        let next_value = if terminal { 0.0 } else { values[t + 1] };
        let carry = if terminal { 0.0 } else { running };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    Ok(adv)
}

/// Critic regression targets `A + V`.
pub fn value_targets(advantages: &[f64], values: &[f64]) -> Vec<f64> {
    advantages.iter().zip(values).map(|(a, v)| a + v).collect()
}
