//! Evaluation protocol: natural returns, attacks trained from scratch against
//! frozen agents, budget sweeps and the model-uncertainty sweep.
//!
//! Every grid cell runs on its own stream derived from `(seed, cell id)`, so
//! reports do not depend on how cells are scheduled.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversaries::{AdversaryAttachment, AdversaryKind};
use crate::error::{Error, Result};
use crate::mdp::{ActMode, ActionKind, Architecture, EnvConfig, Policy};
use crate::meta_game::{MetaStrategy, Welford};
use crate::oracle::{BestResponseOracle, GameSetup, OracleConfig, PpoOracle};
use crate::perturb::{AttackDomain, Norm, PerturbationBudget};
use crate::rng::{derive_rng, derive_seed, rng_from_seed};
use crate::rollout::{rollout, RolloutModes};

/// Default evaluation episodes per cell.
pub const DEFAULT_EVAL_EPISODES: usize = 100;
/// Attacker restarts per cell; the cell reports the weakest agent return.
pub const DEFAULT_RESTARTS: usize = 3;

/// A mixture over agent policies; one member is drawn per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMix {
    pub policies: Vec<Policy>,
    pub weights: MetaStrategy,
}

impl AgentMix {
    pub fn new(policies: Vec<Policy>, weights: MetaStrategy) -> Result<Self> {
        if policies.is_empty() || policies.len() != weights.len() {
            return Err(Error::InvalidArgument("mixture weights must cover a nonempty population".into()));
        }
        Ok(Self { policies, weights })
    }

    pub fn single(policy: Policy) -> Self {
        Self {
            policies: vec![policy],
            weights: MetaStrategy::pure(1, 0),
        }
    }

    /// Only the members with positive weight.
    pub fn support(&self) -> Self {
        let idx = self.weights.support();
        let policies = idx.iter().map(|&i| self.policies[i].clone()).collect();
        let w: Vec<f64> = idx.iter().map(|&i| self.weights.probs()[i]).collect();
        Self {
            policies,
            weights: MetaStrategy::from_weights(&w).expect("support weights are positive"),
        }
    }

    pub fn param_hashes(&self) -> Vec<u64> {
        self.policies.iter().map(Policy::param_hash).collect()
    }
}

/// Summary statistics of a sample of episode returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Stats {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let mut w = Welford::default();
        xs.iter().for_each(|&x| w.push(x));
        Ok(Self {
            mean: w.mean(),
            median: median(xs),
            std: w.std(),
            stderr: w.stderr(),
            count: xs.len(),
        })
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Episode returns of `agent` (optionally attacked) over `n_episodes`.
///
/// The environment stream and rollout stream are derived from `seed` exactly
/// as in payoff estimation; the mixture member is drawn from a third stream,
/// so a single-policy mix reproduces `estimate_payoff_entry` episode by
/// episode.
pub fn episode_returns(
    agent: &AgentMix,
    attack: Option<(&AdversaryAttachment, &PerturbationBudget)>,
    env: &EnvConfig,
    n_episodes: usize,
    modes: RolloutModes,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let mut e = env.build(derive_seed(seed, &[0]))?;
    let mut rng = derive_rng(seed, &[1]);
    let mut pick = derive_rng(seed, &[2]);
    (0..n_episodes)
        .map(|_| {
            let i = if agent.policies.len() == 1 { 0 } else { agent.weights.sample(&mut pick) };
            Ok(rollout(e.as_mut(), &agent.policies[i], attack, modes, &mut rng)?.episode_return)
        })
        .collect()
}

fn modes(mode: ActMode) -> RolloutModes {
    RolloutModes {
        agent: mode,
        adversary: mode,
    }
}

/// Unattacked returns pooled over `seeds`.
pub fn natural_eval(agent: &Policy, env: &EnvConfig, n_episodes: usize, seeds: &[u64], mode: ActMode) -> Result<Stats> {
    natural_eval_mix(&AgentMix::single(agent.clone()), env, n_episodes, seeds, mode)
}

pub fn natural_eval_mix(agent: &AgentMix, env: &EnvConfig, n_episodes: usize, seeds: &[u64], mode: ActMode) -> Result<Stats> {
    let mut all = Vec::with_capacity(n_episodes * seeds.len());
    for &s in seeds {
        all.extend(episode_returns(agent, None, env, n_episodes, modes(mode), s)?);
    }
    Stats::from_samples(&all)
}

fn uniform_budget(alpha: f64) -> Result<PerturbationBudget> {
    PerturbationBudget::new(0.0, 0.0, Norm::Linf, AttackDomain::ModelUncertainty { alpha })
}

fn random_attachment(env: &EnvConfig, budget: PerturbationBudget) -> Result<AdversaryAttachment> {
    let spec = env.spec()?;
    AdversaryAttachment::new(AdversaryKind::RandomBaseline, &spec, None, budget, &[], false, &mut rng_from_seed(0))
}

/// Mean return of a policy whose every action is replaced by a uniform
/// sample over the action space.
pub fn random_action_return(env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<f64> {
    let spec = env.spec()?;
    let arch = match spec.action_kind {
        ActionKind::Continuous => Architecture::gaussian(spec.state_dim, &[], spec.action_dim, Some(spec.action_bounds.clone())),
        ActionKind::Discrete => Architecture::categorical(spec.state_dim, &[], spec.action_dim),
    };
    let agent = AgentMix::single(Policy::new(arch, false, &mut rng_from_seed(seed))?);
    let budget = uniform_budget(1.0)?;
    let att = random_attachment(env, budget)?;
    let r = episode_returns(&agent, Some((&att, &budget)), env, n_episodes, modes(ActMode::Mean), seed)?;
    Ok(Stats::from_samples(&r)?.mean)
}

/// Attacker training settings shared by every cell of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub oracle: OracleConfig,
    pub adversary_hidden: Vec<usize>,
    pub normalize_obs: bool,
    pub restarts: usize,
    pub eval_episodes: usize,
    pub eval_mode: ActMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            oracle: OracleConfig::default(),
            adversary_hidden: vec![64, 64],
            normalize_obs: true,
            restarts: DEFAULT_RESTARTS,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            eval_mode: ActMode::Mean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// The restart under which the agent did worst.
    pub adversary: AdversaryAttachment,
    pub attacked: Stats,
    /// Mean attacked return of every restart.
    pub restart_means: Vec<f64>,
}

/// Trains fresh adversaries of `kind` against the frozen `agent` and reports
/// the agent's return under the strongest one. All restarts are evaluated on
/// the same episode stream. Fails if any agent parameter changes.
pub fn attack_from_scratch(
    agent: &AgentMix,
    kind: AdversaryKind,
    budget: &PerturbationBudget,
    env: &EnvConfig,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    attack_impl(agent, kind, budget, env, cfg, seed, eval_stream(seed))
}

fn attack_impl(
    agent: &AgentMix,
    kind: AdversaryKind,
    budget: &PerturbationBudget,
    env: &EnvConfig,
    cfg: &AttackConfig,
    seed: u64,
    eval_seed: u64,
) -> Result<AttackOutcome> {
    let agent = agent.support();
    let before = agent.param_hashes();
    let setup = GameSetup {
        env: env.clone(),
        adversary: kind,
        budget: *budget,
        agent_hidden: Vec::new(),
        adversary_hidden: cfg.adversary_hidden.clone(),
        normalize_obs: cfg.normalize_obs,
        eval_mode: cfg.eval_mode,
    };
    let oracle = PpoOracle {
        config: cfg.oracle.clone(),
    };
    let train = kind.is_trainable() && !budget.is_null();
    let restarts = if train { cfg.restarts.max(1) } else { 1 };
    let mut best: Option<(AdversaryAttachment, Stats)> = None;
    let mut restart_means = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let mut rng = derive_rng(seed, &[r as u64]);
        let adversary = if train {
            oracle
                .adversary_response(&setup, &agent.policies, &agent.weights, budget, None, &mut rng)?
                .policy
        } else {
            setup.new_adversary(&mut rng)?
        };
        let returns = episode_returns(&agent, Some((&adversary, budget)), env, cfg.eval_episodes, modes(cfg.eval_mode), eval_seed)?;
        let stats = Stats::from_samples(&returns)?;
        restart_means.push(stats.mean);
        if best.as_ref().is_none_or(|(_, b)| stats.mean < b.mean) {
            best = Some((adversary, stats));
        }
    }
    if agent.param_hashes() != before {
        return Err(Error::InvalidArgument("agent parameters changed during the attack".into()));
    }
    let (adversary, attacked) = best.expect("at least one restart");
    Ok(AttackOutcome {
        adversary,
        attacked,
        restart_means,
    })
}

/// One cell of an evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: AdversaryKind,
    pub budget: PerturbationBudget,
    /// Offsets the attacker training streams so that otherwise identical
    /// cells are independent replicates.
    #[serde(default)]
    pub replicate: u64,
}

impl CellSpec {
    pub fn label(&self) -> String {
        let b = &self.budget;
        let mut s = match b.domain {
            AttackDomain::ModelUncertainty { alpha } => format!("{}-alpha{alpha}", self.kind.label()),
            _ => format!("{}-eps{}-epsbar{}", self.kind.label(), b.epsilon, b.epsilon_bar),
        };
        if self.replicate > 0 {
            s.push_str(&format!("-rep{}", self.replicate));
        }
        s
    }
}

/// One (cell, seed) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub cell: String,
    pub kind: String,
    pub epsilon: f64,
    pub epsilon_bar: f64,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
    /// Set when the cell could not be computed.
    pub error: Option<String>,
}

/// Aggregate over the seeds of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: usize,
    pub failed: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// Root mean square of the per-seed standard errors over sqrt(seeds).
    pub pooled_stderr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const NATURAL_CELL: &str = "natural";

impl EvalReport {
    pub fn cell_rows(&self, cell: &str) -> impl Iterator<Item = &EvalRow> {
        let cell = cell.to_string();
        self.rows.iter().filter(move |r| r.cell == cell)
    }

    /// Cells in first-appearance order.
    pub fn cells(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell) {
                out.push(r.cell.clone());
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<CellSummary> {
        self.cells()
            .into_iter()
            .map(|cell| {
                let rows: Vec<&EvalRow> = self.cell_rows(&cell).collect();
                let ok: Vec<&EvalRow> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
                let means: Vec<f64> = ok.iter().map(|r| r.mean).collect();
                let mut w = Welford::default();
                means.iter().for_each(|&m| w.push(m));
                let n = ok.len().max(1) as f64;
                let pooled = (ok.iter().map(|r| r.stderr * r.stderr).sum::<f64>() / n).sqrt() / n.sqrt();
                CellSummary {
                    seeds: rows.len(),
                    failed: rows.len() - ok.len(),
                    median: median(&means),
                    mean: if ok.is_empty() { f64::NAN } else { w.mean() },
                    std: w.std(),
                    pooled_stderr: pooled,
                    cell,
                }
            })
            .collect()
    }

    /// Writes `<stem>.csv` (one row per cell and seed) and
    /// `<stem>-summary.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join(format!("{stem}-summary.json")), json + "\n")?;
        Ok(())
    }
}

fn eval_stream(seed: u64) -> u64 {
    derive_seed(seed, &[u64::MAX])
}

fn row(cell: &CellSpec, seed: u64, res: Result<Stats>) -> EvalRow {
    let alpha = cell.budget.alpha();
    let (mean, stderr, episodes, error) = match res {
        Ok(s) => (s.mean, s.stderr, s.count, None),
        Err(e) => (f64::NAN, f64::NAN, 0, Some(e.to_string())),
    };
    EvalRow {
        cell: cell.label(),
        kind: cell.kind.label(),
        epsilon: cell.budget.epsilon,
        epsilon_bar: cell.budget.epsilon_bar,
        alpha,
        seed,
        mean,
        stderr,
        episodes,
        error,
    }
}

fn natural_rows(agent: &AgentMix, env: &EnvConfig, cfg: &AttackConfig, seeds: &[u64]) -> Result<Vec<EvalRow>> {
    seeds
        .iter()
        .map(|&s| {
            let r = episode_returns(agent, None, env, cfg.eval_episodes, modes(cfg.eval_mode), eval_stream(s))?;
            let st = Stats::from_samples(&r)?;
            Ok(EvalRow {
                cell: NATURAL_CELL.into(),
                kind: "none".into(),
                epsilon: 0.0,
                epsilon_bar: 0.0,
                alpha: None,
                seed: s,
                mean: st.mean,
                stderr: st.stderr,
                episodes: st.count,
                error: None,
            })
        })
        .collect()
}

/// Runs every `(cell, seed)` attack plus a natural row per seed. All cells of
/// one seed share the evaluation episode stream. Failed cells are recorded
/// with their error rather than aborting the grid.
pub fn attack_grid(agent: &AgentMix, env: &EnvConfig, cells: &[CellSpec], cfg: &AttackConfig, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut rows = natural_rows(agent, env, cfg, seeds)?;
    let jobs: Vec<(CellSpec, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (*c, s))).collect();
    let attacked: Vec<EvalRow> = jobs
        .par_iter()
        .map(|(c, s)| {
            let train_seed = derive_seed(*s, &[c.replicate]);
            let res = attack_with_eval(agent, c, env, cfg, train_seed, eval_stream(*s)).map(|o| o.attacked);
            row(c, *s, res)
        })
        .collect();
    rows.extend(attacked);
    Ok(EvalReport { rows })
}

fn attack_with_eval(agent: &AgentMix, cell: &CellSpec, env: &EnvConfig, cfg: &AttackConfig, train_seed: u64, eval_seed: u64) -> Result<AttackOutcome> {
    attack_impl(agent, cell.kind, &cell.budget, env, cfg, train_seed, eval_seed)
}

/// Attacks at each `epsilon` in `grid`, with `epsilon_bar = ratio * epsilon`.
pub fn epsilon_sweep(
    agent: &AgentMix,
    env: &EnvConfig,
    kind: AdversaryKind,
    template: &PerturbationBudget,
    grid: &[f64],
    ratio: f64,
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    let cells = grid
        .iter()
        .map(|&e| {
            Ok(CellSpec {
                kind,
                budget: PerturbationBudget::new(e, ratio * e, template.norm, template.domain)?,
                replicate: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    attack_grid(agent, env, &cells, cfg, seeds)
}

/// Label of the uncoupled reference cell in [`epsilon_bar_ablation`].
pub fn uncoupled_label(kind: AdversaryKind, epsilon: f64, norm: Norm, domain: AttackDomain) -> Result<String> {
    Ok(CellSpec {
        kind,
        budget: PerturbationBudget::new(epsilon, 2.0 * epsilon, norm, domain)?,
        replicate: 1,
    }
    .label())
}

/// Attacks at fixed `epsilon` for each `epsilon_bar` in `grid`, plus an
/// independently trained uncoupled reference cell (`epsilon_bar = 2 eps`).
/// The grid must contain a value of at least `2 eps`.
pub fn epsilon_bar_ablation(
    agent: &AgentMix,
    env: &EnvConfig,
    kind: AdversaryKind,
    epsilon: f64,
    grid: &[f64],
    norm: Norm,
    domain: AttackDomain,
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    if grid.is_empty() || !grid.iter().any(|&b| b >= 2.0 * epsilon) {
        return Err(Error::InvalidArgument("epsilon_bar grid must include a value >= 2 epsilon".into()));
    }
    let mut cells = grid
        .iter()
        .map(|&b| {
            Ok(CellSpec {
                kind,
                budget: PerturbationBudget::new(epsilon, b, norm, domain)?,
                replicate: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cells.push(CellSpec {
        kind,
        budget: PerturbationBudget::new(epsilon, 2.0 * epsilon, norm, domain)?,
        replicate: 1,
    });
    attack_grid(agent, env, &cells, cfg, seeds)
}

/// Mean return under random action replacement at each `alpha`.
pub fn model_uncertainty_sweep(
    agent: &AgentMix,
    env: &EnvConfig,
    alphas: &[f64],
    n_episodes: usize,
    seeds: &[u64],
    mode: ActMode,
) -> Result<EvalReport> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
    }
    let cfg = AttackConfig {
        eval_episodes: n_episodes,
        eval_mode: mode,
        ..AttackConfig::default()
    };
    let cells = alphas
        .iter()
        .map(|&a| {
            Ok(CellSpec {
                kind: AdversaryKind::RandomBaseline,
                budget: uniform_budget(a)?,
                replicate: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    attack_grid(agent, env, &cells, &cfg, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn mix_support_drops_zero_weights() {
        let p = |c| Policy::pure_choice(1, 3, c).unwrap();
        let mix = AgentMix::new(vec![p(0), p(1), p(2)], MetaStrategy::new(vec![0.5, 0.0, 0.5]).unwrap()).unwrap();
        let s = mix.support();
        assert_eq!(s.policies.len(), 2);
        assert_eq!(s.weights.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn labels_encode_the_cell() {
        let c = CellSpec {
            kind: AdversaryKind::Paad,
            budget: PerturbationBudget::state(0.1, 0.02).unwrap(),
            replicate: 0,
        };
        assert_eq!(c.label(), "paad-eps0.1-epsbar0.02");
    }
}
