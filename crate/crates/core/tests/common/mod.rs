//! Finite-difference oracles and random instances shared by the gradient
//! tests and the acceptance suite.
#![allow(dead_code)]

use grad_core::mdp::{Action, Architecture, HeadKind, Policy};
use grad_core::oracle::{ppo_loss_and_grad, Sample, ValueFunction};
use grad_core::rng::{rng_from_seed, Rng};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, with a floor so that
/// two vanishing gradients compare equal.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&d) / n(a).max(n(b)).max(1e-6)
}

fn random_hidden(rng: &mut Rng) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![],
        1 => vec![rng.random_range(2..6)],
        _ => vec![rng.random_range(2..5), rng.random_range(2..5)],
    }
}

fn random_x(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()
}

pub fn random_policy(rng: &mut Rng, gaussian: bool) -> Policy {
    let obs = rng.random_range(1..5);
    let hidden = random_hidden(rng);
    let arch = if gaussian {
        let dim = rng.random_range(1..4);
        let bounds = rng
            .random_bool(0.5)
            .then(|| (0..dim).map(|_| (rng.random_range(-2.0..-0.5), rng.random_range(0.5..2.0))).collect());
        Architecture::gaussian(obs, &hidden, dim, bounds)
    } else {
        Architecture::categorical(obs, &hidden, rng.random_range(2..5))
    };
    let mut p = Policy::new(arch, false, rng).unwrap();
    // Move away from the initialization so the output layer is not tiny.
    for w in p.params_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    p
}

fn random_output(rng: &mut Rng, policy: &Policy) -> Action {
    let arch = policy.architecture();
    match arch.head {
        HeadKind::Gaussian => Action::Continuous((0..arch.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        HeadKind::Categorical => Action::Discrete(rng.random_range(0..arch.action_dim)),
    }
}

/// Relative error of the policy's backward pass on
/// `c_logp * log pi + c_ent * H` over a few random inputs.
pub fn policy_head_error(seed: u64, gaussian: bool) -> f64 {
    let mut rng = rng_from_seed(seed);
    let policy = random_policy(&mut rng, gaussian);
    let obs = policy.architecture().obs_dim;
    let points: Vec<(Vec<f64>, Action, f64, f64)> = (0..4)
        .map(|_| {
            let x = random_x(&mut rng, obs);
            let a = random_output(&mut rng, &policy);
            (x, a, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .collect();
    let mut grad = vec![0.0; policy.params().len()];
    for (x, a, cl, ce) in &points {
        policy.backward_normalized(x, a, *cl, *ce, &mut grad);
    }
    let fd = central_diff(policy.params(), |theta| {
        let mut p = policy.clone();
        p.params_mut().copy_from_slice(theta);
        points
            .iter()
            .map(|(x, a, cl, ce)| {
                let d = p.distribution_normalized(x);
                cl * d.log_prob(a).unwrap() + ce * d.entropy()
            })
            .sum()
    });
    rel_error(&grad, &fd)
}

pub fn critic_error(seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let obs = rng.random_range(1..5);
    let hidden = random_hidden(&mut rng);
    let critic = ValueFunction::new(obs, &hidden, &mut rng);
    let points: Vec<(Vec<f64>, f64)> = (0..4).map(|_| (random_x(&mut rng, obs), rng.random_range(-1.0..1.0))).collect();
    let mut grad = vec![0.0; critic.params().len()];
    for (x, c) in &points {
        critic.backward(x, *c, &mut grad);
    }
    let fd = central_diff(critic.params(), |theta| {
        let mut v = critic.clone();
        v.params_mut().copy_from_slice(theta);
        points.iter().map(|(x, c)| c * v.value(x)).sum()
    });
    rel_error(&grad, &fd)
}

/// Relative error of the full clipped-surrogate loss gradient (policy and
/// critic parameters together). Old log-probabilities are offset from the
/// current ones so that ratios fall on both sides of the clip range but not
/// within a finite-difference step of its kinks.
pub fn ppo_loss_error(seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let gaussian = rng.random_bool(0.5);
    let policy = random_policy(&mut rng, gaussian);
    let obs = policy.architecture().obs_dim;
    let critic = ValueFunction::new(obs, &policy.architecture().hidden.clone(), &mut rng);
    let clip = 0.2;
    let batch: Vec<Sample> = (0..8)
        .map(|_| {
            let x = random_x(&mut rng, obs);
            let output = random_output(&mut rng, &policy);
            let logp = policy.distribution_normalized(&x).log_prob(&output).unwrap();
            let offset = if rng.random_bool(0.5) {
                rng.random_range(-0.1..0.1)
            } else {
                rng.random_range(0.3..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            };
            Sample {
                x,
                output,
                logprob_old: logp - offset,
                advantage: rng.random_range(-2.0..2.0),
                target: rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let (vf, ent) = (0.5, 0.01);
    let report = ppo_loss_and_grad(&policy, &critic, &batch, clip, vf, ent).unwrap();
    let np = policy.params().len();
    let mut theta: Vec<f64> = policy.params().to_vec();
    theta.extend_from_slice(critic.params());
    let mut analytic = report.grad_policy.clone();
    analytic.extend_from_slice(&report.grad_value);
    let fd = central_diff(&theta, |t| {
        let mut p = policy.clone();
        p.params_mut().copy_from_slice(&t[..np]);
        let mut v = critic.clone();
        v.params_mut().copy_from_slice(&t[np..]);
        ppo_loss_and_grad(&p, &v, &batch, clip, vf, ent).unwrap().loss
    });
    rel_error(&analytic, &fd)
}
