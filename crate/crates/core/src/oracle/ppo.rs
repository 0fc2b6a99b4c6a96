//! Clipped-surrogate policy optimization with a separate critic network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gae::{gae_advantages, value_targets};
use super::{BestResponse, BestResponseOracle, GameSetup};
use crate::adversaries::AdversaryAttachment;
use crate::error::{check_finite, Error, Result};
use crate::mdp::{ActMode, Action, EnvConfig, HeadKind, Policy, RunningStat};
use crate::meta_game::MetaStrategy;
use crate::nn::{self, clip_grad_norm, Adam, MlpCache, MlpShape};
use crate::perturb::PerturbationBudget;
use crate::rng::Rng;
use crate::rollout::{rollout, RolloutModes};

const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Training iterations per best response.
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Defaults to 0 for Gaussian heads and 0.01 for categorical heads.
    pub ent_coef: Option<f64>,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Epochs stop once the approximate KL exceeds 1.5x this value.
    pub target_kl: Option<f64>,
    pub normalize_advantages: bool,
    pub scale_rewards: bool,
    /// Initialize each best response from the side's latest policy.
    pub warm_start: bool,
    /// Abort when the mean return stays this far below the first
    /// iteration's for ten consecutive iterations.
    pub divergence_margin: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            steps_per_iteration: 2048,
            minibatch_size: 256,
            epochs: 10,
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            learning_rate: 3e-4,
            ent_coef: None,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            target_kl: Some(0.03),
            normalize_advantages: true,
            scale_rewards: true,
            warm_start: false,
            divergence_margin: None,
        }
    }
}

impl OracleConfig {
    /// Small-budget settings for one-step matrix games: at most 20k
    /// environment steps per best response.
    pub fn matrix_game() -> Self {
        Self {
            iterations: 50,
            steps_per_iteration: 256,
            minibatch_size: 64,
            epochs: 4,
            learning_rate: 0.05,
            ent_coef: Some(0.0),
            max_grad_norm: 5.0,
            target_kl: None,
            normalize_advantages: false,
            scale_rewards: false,
            ..Self::default()
        }
    }

    /// Point-mass settings. Actions move the position only through the
    /// damped velocity, so a shorter discount keeps the advantage signal
    /// above the noise of the remaining episode.
    pub fn pointmass() -> Self {
        Self {
            gamma: 0.95,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("oracle: {m}")));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma and gae_lambda must be in (0, 1]");
        }
        if self.steps_per_iteration == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("steps_per_iteration, minibatch_size and epochs must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) || !(self.vf_coef >= 0.0) {
            return bad("learning_rate, vf_coef must be non-negative and max_grad_norm positive");
        }
        if self.ent_coef.is_some_and(|e| !(e >= 0.0)) || self.target_kl.is_some_and(|k| !(k > 0.0)) {
            return bad("ent_coef must be non-negative and target_kl positive");
        }
        Ok(())
    }

    pub fn entropy_coef(&self, head: HeadKind) -> f64 {
        self.ent_coef.unwrap_or(match head {
            HeadKind::Gaussian => 0.0,
            HeadKind::Categorical => 0.01,
        })
    }
}

/// State-value critic over policy-normalized observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    shape: MlpShape,
    params: Vec<f64>,
}

impl ValueFunction {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let shape = MlpShape::new(obs_dim, hidden, 1);
        let params = shape.init(1.0, rng);
        Self { shape, params }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        nn::forward(&self.shape, &self.params, x)[0]
    }

    /// Accumulates `coef * dV(x)/d(params)` into `grad` and returns `V(x)`.
    pub fn backward(&self, x: &[f64], coef: f64, grad: &mut [f64]) -> f64 {
        let mut cache = MlpCache::default();
        let v = nn::forward_cached(&self.shape, &self.params, x, &mut cache)[0];
        nn::backward(&self.shape, &self.params, &cache, &[coef], grad);
        v
    }
}

/// One learner decision prepared for the update.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Normalized observation the decision was taken on.
    pub x: Vec<f64>,
    pub output: Action,
    pub logprob_old: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_policy: Vec<f64>,
    pub grad_value: Vec<f64>,
}

/// Loss `mean(-min(r A, clip(r) A)) + vf_coef * mean(0.5 (V - R)^2)
/// - ent_coef * mean(H)` and its gradient.
pub fn ppo_loss_and_grad(
    policy: &Policy,
    critic: &ValueFunction,
    batch: &[Sample],
    clip: f64,
    vf_coef: f64,
    ent_coef: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let n = batch.len() as f64;
    let mut r = LossReport {
        loss: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        approx_kl: 0.0,
        clip_fraction: 0.0,
        grad_policy: vec![0.0; policy.params().len()],
        grad_value: vec![0.0; critic.params().len()],
    };
    for s in batch {
        let logp = policy.distribution_normalized(&s.x).log_prob(&s.output)?;
        let log_ratio = logp - s.logprob_old;
        let ratio = log_ratio.exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * s.advantage;
        r.policy_loss -= unclipped.min(clipped) / n;
        let c_logp = if unclipped <= clipped { -s.advantage * ratio / n } else { 0.0 };
        let (_, h) = policy.backward_normalized(&s.x, &s.output, c_logp, -ent_coef / n, &mut r.grad_policy);
        r.entropy += h / n;

        let v = critic.value(&s.x);
        critic.backward(&s.x, vf_coef * (v - s.target) / n, &mut r.grad_value);
        r.value_loss += 0.5 * (v - s.target).powi(2) / n;

        r.approx_kl += ((ratio - 1.0) - log_ratio) / n;
        if (ratio - 1.0).abs() > clip {
            r.clip_fraction += 1.0 / n;
        }
    }
    r.loss = r.policy_loss + vf_coef * r.value_loss - ent_coef * r.entropy;
    Ok(r)
}

/// Adam state for the policy and the critic.
#[derive(Clone, Debug)]
pub struct PpoOptimizer {
    pub policy: Adam,
    pub value: Adam,
}

impl PpoOptimizer {
    pub fn new(policy: &Policy, critic: &ValueFunction, lr: f64) -> Self {
        Self {
            policy: Adam::new(policy.params().len(), lr),
            value: Adam::new(critic.params().len(), lr),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// One epoch over `batch` in shuffled minibatches. Gradients of policy and
/// critic are clipped jointly to `max_grad_norm`. Returns averages over the
/// minibatches.
pub fn clipped_surrogate_update(
    policy: &mut Policy,
    critic: &mut ValueFunction,
    batch: &[Sample],
    config: &OracleConfig,
    ent_coef: f64,
    opt: &mut PpoOptimizer,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(rng);
    let mut stats = UpdateStats::default();
    for chunk in idx.chunks(config.minibatch_size) {
        let mut mb: Vec<Sample> = chunk.iter().map(|&i| batch[i].clone()).collect();
        if config.normalize_advantages && mb.len() > 1 {
            let mean = mb.iter().map(|s| s.advantage).sum::<f64>() / mb.len() as f64;
            let var = mb.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / mb.len() as f64;
            let sd = var.sqrt() + 1e-8;
            mb.iter_mut().for_each(|s| s.advantage = (s.advantage - mean) / sd);
        }
        let mut rep = ppo_loss_and_grad(policy, critic, &mb, config.clip, config.vf_coef, ent_coef)?;
        if !rep.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} (policy {}, value {}, entropy {})",
                rep.loss, rep.policy_loss, rep.value_loss, rep.entropy
            )));
        }
        let mut joint: Vec<f64> = rep.grad_policy.iter().chain(&rep.grad_value).copied().collect();
        let norm = clip_grad_norm(&mut joint, config.max_grad_norm);
        let (gp, gv) = joint.split_at(rep.grad_policy.len());
        rep.grad_policy.copy_from_slice(gp);
        rep.grad_value.copy_from_slice(gv);
        opt.policy.step(policy.params_mut(), &rep.grad_policy);
        opt.value.step(critic.params_mut(), &rep.grad_value);
        check_finite("policy parameters", policy.params())?;

        stats.policy_loss += rep.policy_loss;
        stats.value_loss += rep.value_loss;
        stats.entropy += rep.entropy;
        stats.approx_kl += rep.approx_kl;
        stats.clip_fraction += rep.clip_fraction;
        stats.grad_norm += norm;
        stats.minibatches += 1;
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

/// Side being trained, owning its policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Learner {
    Agent(Policy),
    Adversary(AdversaryAttachment),
}

impl Learner {
    pub fn policy(&self) -> Result<&Policy> {
        match self {
            Learner::Agent(p) => Ok(p),
            Learner::Adversary(a) => a.director(),
        }
    }

    fn policy_mut(&mut self) -> Result<&mut Policy> {
        match self {
            Learner::Agent(p) => Ok(p),
            Learner::Adversary(a) => a
                .director
                .as_mut()
                .ok_or_else(|| Error::Unsupported(format!("{} has no trainable director", a.kind.label()))),
        }
    }
}

/// Frozen opponents the learner trains against.
#[derive(Clone, Copy, Debug)]
pub enum Opponents<'a> {
    /// Unattacked agent training.
    None,
    Adversaries(&'a [AdversaryAttachment]),
    Agents(&'a [Policy]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub critic: ValueFunction,
    pub curve: Vec<CurvePoint>,
    /// Mean learner-side return over the last iteration's episodes.
    pub value: f64,
}

/// Scales rewards by the running standard deviation of the discounted return.
struct RewardScaler {
    gamma: f64,
    ret: f64,
    stat: RunningStat,
}

impl RewardScaler {
    fn new(gamma: f64) -> Self {
        Self {
            gamma,
            ret: 0.0,
            stat: RunningStat::new(1),
        }
    }

    fn scale(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        for (r, d) in rewards.iter().zip(dones) {
            self.ret = self.gamma * self.ret + r;
            self.stat.push(&[self.ret]);
            if *d {
                self.ret = 0.0;
            }
        }
        let sd = (self.stat.variance()[0] + 1e-8).sqrt();
        rewards.iter().map(|r| r / sd).collect()
    }
}

/// Trains `learner` against opponents drawn from `meta` once per episode.
/// Opponents act in `opponent_mode`; the learner samples.
#[allow(clippy::too_many_arguments)]
pub fn train_best_response(
    mut learner: Learner,
    opponents: Opponents<'_>,
    meta: Option<&MetaStrategy>,
    budget: &PerturbationBudget,
    env: &EnvConfig,
    config: &OracleConfig,
    opponent_mode: ActMode,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n_opp = match opponents {
        Opponents::None => 0,
        Opponents::Adversaries(a) => a.len(),
        Opponents::Agents(a) => a.len(),
    };
    match (&learner, opponents) {
        (Learner::Agent(_), Opponents::None | Opponents::Adversaries(_)) | (Learner::Adversary(_), Opponents::Agents(_)) => {}
        _ => return Err(Error::InvalidArgument("learner and opponents are on the same side".into())),
    }
    if n_opp > 0 {
        let m = meta.ok_or_else(|| Error::InvalidArgument("opponents need a meta-strategy".into()))?;
        if m.len() != n_opp {
            return Err(Error::Dimension {
                what: "meta-strategy",
                expected: n_opp,
                got: m.len(),
            });
        }
    } else if !matches!(opponents, Opponents::None) {
        return Err(Error::InvalidArgument("empty opponent population".into()));
    }

    let (obs_dim, hidden, head) = {
        let arch = learner.policy()?.architecture();
        (arch.obs_dim, arch.hidden.clone(), arch.head)
    };
    let ent_coef = config.entropy_coef(head);
    let mut env_inst = env.build(rng.random::<u64>())?;
    let mut critic = ValueFunction::new(obs_dim, &hidden, rng);
    let mut opt = PpoOptimizer::new(learner.policy()?, &critic, config.learning_rate);
    let mut scaler = RewardScaler::new(config.gamma);
    let modes = match learner {
        Learner::Agent(_) => RolloutModes {
            agent: ActMode::Sample,
            adversary: opponent_mode,
        },
        Learner::Adversary(_) => RolloutModes {
            agent: opponent_mode,
            adversary: ActMode::Sample,
        },
    };

    let mut curve = Vec::with_capacity(config.iterations);
    let mut total_steps = 0;
    let mut baseline: Option<f64> = None;
    let mut below = 0;
    let mut value = f64::NAN;
    for iteration in 0..config.iterations {
        let mut obs = Vec::new();
        let mut outputs = Vec::new();
        let mut logps = Vec::new();
        let mut rewards = Vec::new();
        let mut dones = Vec::new();
        let mut returns = Vec::new();
        while rewards.len() < config.steps_per_iteration {
            let tr = match (&learner, opponents) {
                (Learner::Agent(p), Opponents::None) => rollout(env_inst.as_mut(), p, None, modes, rng)?,
                (Learner::Agent(p), Opponents::Adversaries(advs)) => {
                    let k = meta.expect("checked above").sample(rng);
                    rollout(env_inst.as_mut(), p, Some((&advs[k], budget)), modes, rng)?
                }
                (Learner::Adversary(att), Opponents::Agents(agents)) => {
                    let k = meta.expect("checked above").sample(rng);
                    rollout(env_inst.as_mut(), &agents[k], Some((att, budget)), modes, rng)?
                }
                _ => unreachable!("side pairing checked above"),
            };
            let mut ret = 0.0;
            let last = tr.len() - 1;
            for (k, st) in tr.steps.into_iter().enumerate() {
                let (d, r) = match learner {
                    Learner::Agent(_) => (st.agent, st.reward),
                    Learner::Adversary(_) => {
                        let r = -st.reward;
                        let d = st
                            .adversary
                            .ok_or_else(|| Error::InvalidArgument("adversary took no decision".into()))?;
                        (d, r)
                    }
                };
                ret += r;
                obs.push(d.obs);
                outputs.push(d.output);
                logps.push(d.logprob);
                rewards.push(r);
                dones.push(k == last);
            }
            returns.push(ret);
        }
        total_steps += rewards.len();
        let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
        value = mean_return;

        let scaled = if config.scale_rewards {
            scaler.scale(&rewards, &dones)
        } else {
            rewards.clone()
        };
        let policy = learner.policy()?;
        let xs: Vec<Vec<f64>> = obs.iter().map(|o| policy.normalize(o)).collect();
        let values: Vec<f64> = xs.iter().map(|x| critic.value(x)).collect();
        let adv = gae_advantages(&scaled, &values, &dones, config.gamma, config.gae_lambda)?;
        let targets = value_targets(&adv, &values);
        let samples: Vec<Sample> = xs
            .into_iter()
            .zip(outputs)
            .zip(logps)
            .zip(adv.iter().zip(&targets))
            .map(|(((x, output), logprob_old), (a, t))| Sample {
                x,
                output,
                logprob_old,
                advantage: *a,
                target: *t,
            })
            .collect();

        let mut last_stats = UpdateStats::default();
        for _ in 0..config.epochs {
            let policy = learner.policy_mut()?;
            last_stats = clipped_surrogate_update(policy, &mut critic, &samples, config, ent_coef, &mut opt, rng)?;
            if config.target_kl.is_some_and(|kl| last_stats.approx_kl > 1.5 * kl) {
                break;
            }
        }
        learner
            .policy_mut()?
            .normalizer_mut()
            .update(obs.iter().map(Vec::as_slice));

        curve.push(CurvePoint {
            iteration,
            steps: total_steps,
            mean_return,
            policy_loss: last_stats.policy_loss,
            value_loss: last_stats.value_loss,
            approx_kl: last_stats.approx_kl,
            entropy: last_stats.entropy,
        });

        if let Some(margin) = config.divergence_margin {
            let base = *baseline.get_or_insert(mean_return);
            below = if mean_return < base - margin { below + 1 } else { 0 };
            if below >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "mean return {mean_return} stayed below {base} - {margin} for {below} iterations"
                )));
            }
        }
    }
    Ok(TrainOutcome {
        learner,
        critic,
        curve,
        value,
    })
}

/// Best responses trained with [`train_best_response`].
#[derive(Clone, Debug, Default)]
pub struct PpoOracle {
    pub config: OracleConfig,
}

impl PpoOracle {
    pub fn new(config: OracleConfig) -> Self {
        Self { config }
    }
}

impl BestResponseOracle for PpoOracle {
    fn initial_agent(&self, setup: &GameSetup, rng: &mut Rng) -> Result<Policy> {
        setup.new_agent(rng)
    }

    fn initial_adversary(&self, setup: &GameSetup, rng: &mut Rng) -> Result<AdversaryAttachment> {
        setup.new_adversary(rng)
    }

    fn agent_response(
        &self,
        setup: &GameSetup,
        opponents: &[AdversaryAttachment],
        meta: &MetaStrategy,
        budget: &PerturbationBudget,
        warm: Option<&Policy>,
        rng: &mut Rng,
    ) -> Result<BestResponse<Policy>> {
        let start = match warm {
            Some(p) if self.config.warm_start => p.clone(),
            _ => setup.new_agent(rng)?,
        };
        let out = train_best_response(
            Learner::Agent(start),
            Opponents::Adversaries(opponents),
            Some(meta),
            budget,
            &setup.env,
            &self.config,
            setup.eval_mode,
            rng,
        )?;
        let Learner::Agent(policy) = out.learner else {
            unreachable!("agent learner stays an agent")
        };
        Ok(BestResponse {
            policy,
            value: out.value,
            curve: out.curve,
        })
    }

    fn adversary_response(
        &self,
        setup: &GameSetup,
        opponents: &[Policy],
        meta: &MetaStrategy,
        budget: &PerturbationBudget,
        warm: Option<&AdversaryAttachment>,
        rng: &mut Rng,
    ) -> Result<BestResponse<AdversaryAttachment>> {
        if !setup.adversary.is_trainable() {
            return Err(Error::Unsupported(format!("{} adversaries are not trained", setup.adversary.label())));
        }
        let start = match warm {
            Some(a) if self.config.warm_start => a.clone(),
            _ => setup.new_adversary(rng)?,
        };
        let out = train_best_response(
            Learner::Adversary(start),
            Opponents::Agents(opponents),
            Some(meta),
            budget,
            &setup.env,
            &self.config,
            setup.eval_mode,
            rng,
        )?;
        let Learner::Adversary(policy) = out.learner else {
            unreachable!("adversary learner stays an adversary")
        };
        Ok(BestResponse {
            policy,
            value: out.value,
            curve: out.curve,
        })
    }
}
