use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Action, ObsNormalizer};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::nn::{self, MlpCache, MlpShape};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const POLICY_FORMAT_VERSION: u32 = 1;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Logit margin used for deterministic (pure-strategy) categorical policies.
const PURE_LOGIT: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Mean from the network, state-independent learned log-std.
    Gaussian,
    /// Logits from the network.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Recurrent cell flag. Only feed-forward networks are implemented.
    pub recurrent: bool,
    pub head: HeadKind,
    /// Output dimension (Gaussian) or number of choices (categorical).
    pub action_dim: usize,
    /// Sampled continuous actions are clipped to these before execution.
    pub action_bounds: Option<Vec<(f64, f64)>>,
}

impl Architecture {
    pub fn gaussian(obs_dim: usize, hidden: &[usize], action_dim: usize, bounds: Option<Vec<(f64, f64)>>) -> Self {
        Self {
            obs_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            recurrent: false,
            head: HeadKind::Gaussian,
            action_dim,
            action_bounds: bounds,
        }
    }

    pub fn categorical(obs_dim: usize, hidden: &[usize], choices: usize) -> Self {
        Self {
            obs_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            recurrent: false,
            head: HeadKind::Categorical,
            action_dim: choices,
            action_bounds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recurrent {
            return Err(Error::Unsupported("recurrent policy cells".into()));
        }
        if self.obs_dim == 0 || self.action_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("architecture dimensions must be positive".into()));
        }
        if let Some(b) = &self.action_bounds {
            if self.head != HeadKind::Gaussian {
                return Err(Error::InvalidArgument("action bounds apply to Gaussian heads only".into()));
            }
            check_dim("action bounds", self.action_dim, b.len())?;
            if b.iter().any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::InvalidArgument("action bounds need lo < hi".into()));
            }
        }
        Ok(())
    }

    pub fn mlp(&self) -> MlpShape {
        MlpShape::new(self.obs_dim, &self.hidden, self.action_dim)
    }

    pub fn param_count(&self) -> usize {
        self.mlp().param_count()
            + match self.head {
                HeadKind::Gaussian => self.action_dim,
                HeadKind::Categorical => 0,
            }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Mean,
}

/// Action distribution produced by a policy head.
#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl Distribution {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (Distribution::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                check_dim("action", mean.len(), a.len())?;
                Ok(gaussian_log_density(mean, log_std, a))
            }
            (Distribution::Categorical { logits }, Action::Discrete(i)) => log_softmax(logits)
                .get(*i)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("choice {i} out of range"))),
            _ => Err(Error::InvalidArgument("action kind does not match policy head".into())),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Distribution::Gaussian { log_std, .. } => log_std.iter().map(|l| l + 0.5 + HALF_LN_2PI).sum(),
            Distribution::Categorical { logits } => {
                let lp = log_softmax(logits);
                -lp.iter().map(|l| l.exp() * l).sum::<f64>()
            }
        }
    }

    pub fn probabilities(&self) -> Option<Vec<f64>> {
        match self {
            Distribution::Categorical { logits } => Some(log_softmax(logits).iter().map(|l| l.exp()).collect()),
            Distribution::Gaussian { .. } => None,
        }
    }

    pub fn mode(&self) -> Action {
        match self {
            Distribution::Gaussian { mean, .. } => Action::Continuous(mean.clone()),
            Distribution::Categorical { logits } => Action::Discrete(argmax(logits)),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Action {
        match self {
            Distribution::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, l)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + l.exp() * z
                    })
                    .collect(),
            ),
            Distribution::Categorical { .. } => {
                let probs = self.probabilities().expect("categorical");
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(probs.len() - 1)
            }
        }
    }
}

/// Diagonal-Gaussian log-density.
pub(crate) fn gaussian_log_density(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, l), x)| {
            let z = (x - m) / l.exp();
            -0.5 * z * z - l - HALF_LN_2PI
        })
        .sum()
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One decision taken by a policy: the raw observation it saw, the unclipped
/// output and that output's log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub obs: Vec<f64>,
    pub output: Action,
    pub logprob: f64,
}

/// Stochastic policy over a flat parameter vector: MLP parameters followed,
/// for Gaussian heads, by the log-std vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    arch: Architecture,
    params: Vec<f64>,
    normalizer: ObsNormalizer,
}

/// Self-describing policy container written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub parameters: Vec<f64>,
    pub normalizer: ObsNormalizer,
}

impl Policy {
    /// Freshly initialized policy: small output layer, log-std at `ln 0.5`.
    pub fn new(arch: Architecture, normalize_obs: bool, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = arch.mlp().init(0.01, rng);
        if arch.head == HeadKind::Gaussian {
            params.extend(std::iter::repeat_n(0.5f64.ln(), arch.action_dim));
        }
        let normalizer = ObsNormalizer::new(arch.obs_dim, normalize_obs);
        Ok(Self {
            arch,
            params,
            normalizer,
        })
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>, normalizer: ObsNormalizer) -> Result<Self> {
        arch.validate()?;
        check_dim("policy parameters", arch.param_count(), params.len())?;
        check_dim("normalizer", arch.obs_dim, normalizer.stats.mean.len())?;
        Ok(Self {
            arch,
            params,
            normalizer,
        })
    }

    /// Categorical policy that always picks `choice` (a pure strategy).
    pub fn pure_choice(obs_dim: usize, choices: usize, choice: usize) -> Result<Self> {
        if choice >= choices {
            return Err(Error::InvalidArgument(format!("choice {choice} >= {choices}")));
        }
        let arch = Architecture::categorical(obs_dim, &[], choices);
        let mut params = vec![0.0; arch.param_count()];
        params[obs_dim * choices + choice] = PURE_LOGIT;
        Self::from_parts(arch, params, ObsNormalizer::new(obs_dim, false))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut ObsNormalizer {
        &mut self.normalizer
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        self.normalizer.normalize(obs)
    }

    fn mlp_len(&self) -> usize {
        self.arch.mlp().param_count()
    }

    fn clamped_log_std(&self) -> Vec<f64> {
        self.params[self.mlp_len()..]
            .iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    /// Head distribution for an already-normalized input.
    pub fn distribution_normalized(&self, x: &[f64]) -> Distribution {
        let out = nn::forward(&self.arch.mlp(), &self.params[..self.mlp_len()], x);
        self.head(out)
    }

    /// Bounded Gaussian heads squash the mean into the action box with tanh,
    /// so a mean pushed past a bound still receives gradient.
    fn squash_mean(&self, out: &[f64]) -> Vec<f64> {
        match &self.arch.action_bounds {
            Some(bounds) => out
                .iter()
                .zip(bounds)
                .map(|(o, (lo, hi))| 0.5 * (lo + hi) + 0.5 * (hi - lo) * o.tanh())
                .collect(),
            None => out.to_vec(),
        }
    }

    fn head(&self, out: Vec<f64>) -> Distribution {
        match self.arch.head {
            HeadKind::Gaussian => Distribution::Gaussian {
                mean: self.squash_mean(&out),
                log_std: self.clamped_log_std(),
            },
            HeadKind::Categorical => Distribution::Categorical { logits: out },
        }
    }

    /// Head distribution for a raw observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<Distribution> {
        check_dim("observation", self.arch.obs_dim, obs.len())?;
        check_finite("observation", obs)?;
        check_finite("policy parameters", &self.params)?;
        Ok(self.distribution_normalized(&self.normalize(obs)))
    }

    /// Picks an action. Returns the executable action (clipped to the
    /// architecture's bounds) and the decision record, whose log-probability
    /// refers to the unclipped output.
    pub fn act(&self, obs: &[f64], mode: ActMode, rng: &mut Rng) -> Result<(Action, Decision)> {
        let dist = self.distribution(obs)?;
        let output = match mode {
            ActMode::Sample => dist.sample(rng),
            ActMode::Mean => dist.mode(),
        };
        let logprob = dist.log_prob(&output)?;
        let action = match (&output, &self.arch.action_bounds) {
            (Action::Continuous(a), Some(bounds)) => Action::Continuous(
                a.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect(),
            ),
            _ => output.clone(),
        };
        Ok((
            action,
            Decision {
                obs: obs.to_vec(),
                output,
                logprob,
            },
        ))
    }

    pub fn log_prob(&self, obs: &[f64], output: &Action) -> Result<f64> {
        self.distribution(obs)?.log_prob(output)
    }

    /// Accumulates `d(c_logp * log pi(output|x) + c_ent * H(pi(.|x)))/d(params)`
    /// into `grad` for a normalized input `x`. Returns `(log pi, H)`.
    pub fn backward_normalized(&self, x: &[f64], output: &Action, c_logp: f64, c_ent: f64, grad: &mut [f64]) -> (f64, f64) {
        let shape = self.arch.mlp();
        let n_mlp = self.mlp_len();
        let mut cache = MlpCache::default();
        let out = nn::forward_cached(&shape, &self.params[..n_mlp], x, &mut cache);
        let (logp, ent, grad_out) = match (self.arch.head, output) {
            (HeadKind::Gaussian, Action::Continuous(a)) => {
                let raw_log_std = &self.params[n_mlp..];
                let log_std = self.clamped_log_std();
                let mean = self.squash_mean(&out);
                let logp = gaussian_log_density(&mean, &log_std, a);
                let ent: f64 = log_std.iter().map(|l| l + 0.5 + HALF_LN_2PI).sum();
                let mut grad_mean = Vec::with_capacity(out.len());
                for k in 0..out.len() {
                    let var = (2.0 * log_std[k]).exp();
                    let dmean = match &self.arch.action_bounds {
                        Some(b) => 0.5 * (b[k].1 - b[k].0) * (1.0 - out[k].tanh().powi(2)),
                        None => 1.0,
                    };
                    grad_mean.push(c_logp * (a[k] - mean[k]) / var * dmean);
                    let z2 = (a[k] - mean[k]).powi(2) / var;
                    if raw_log_std[k] > LOG_STD_MIN && raw_log_std[k] < LOG_STD_MAX {
                        grad[n_mlp + k] += c_logp * (z2 - 1.0) + c_ent;
                    }
                }
                (logp, ent, grad_mean)
            }
            (HeadKind::Categorical, Action::Discrete(i)) => {
                let lp = log_softmax(&out);
                let ent = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                let g = lp
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let p = l.exp();
                        let onehot = if j == *i { 1.0 } else { 0.0 };
                        c_logp * (onehot - p) - c_ent * p * (l + ent)
                    })
                    .collect();
                (lp[*i], ent, g)
            }
            _ => panic!("action kind does not match policy head"),
        };
        nn::backward(&shape, &self.params[..n_mlp], &cache, &grad_out, &mut grad[..n_mlp]);
        (logp, ent)
    }

    /// FNV-1a over the parameter bits and normalizer statistics.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let stats = &self.normalizer.stats;
        let words = self
            .params
            .iter()
            .chain(&stats.mean)
            .map(|v| v.to_bits())
            .chain(std::iter::once(stats.count));
        for w in words {
            for byte in w.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format_version: POLICY_FORMAT_VERSION,
            architecture: self.arch.clone(),
            parameters: self.params.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: PolicyCheckpoint) -> Result<Self> {
        if ckpt.format_version != POLICY_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "policy format version {} (expected {POLICY_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Self::from_parts(ckpt.architecture, ckpt.parameters, ckpt.normalizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: PolicyCheckpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }
}
