//! Adversary attachments: a director policy plus a fixed actor function that
//! turns the director's output into a feasible perturbation.
//!
//! The actor is `g(d) = project(eps * tanh(d))`. Directors observe the victim
//! state concatenated with their own previous applied perturbation (or, for
//! the memorized variant, the mean of the last `W` perturbations), which is
//! what the coupled feasible set depends on.

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mdp::{ActMode, ActionKind, Architecture, Decision, EnvSpec, Policy};
use crate::perturb::{
    norm, project_admissible, project_coupled, project_toward, AttackDomain, Bound, CouplingContext, Norm,
    PerturbationBudget,
};
use crate::rng::Rng;

const FALLBACK_AFTER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryKind {
    /// Director/actor state adversary.
    Paad,
    /// RL action adversary.
    Acad,
    /// One director driving both a state and an action actor.
    Mixed,
    /// Coupling measured against the mean of the last `window` perturbations.
    Memorized { window: usize },
    /// Uniform sampling from the coupled feasible set (or action replacement
    /// in the model-uncertainty domain).
    RandomBaseline,
    /// Column player of a two-player matrix game.
    Opponent,
}

impl AdversaryKind {
    pub fn label(&self) -> String {
        match self {
            AdversaryKind::Paad => "paad".into(),
            AdversaryKind::Acad => "acad".into(),
            AdversaryKind::Mixed => "mixed".into(),
            AdversaryKind::Memorized { window } => format!("memorized{window}"),
            AdversaryKind::RandomBaseline => "random".into(),
            AdversaryKind::Opponent => "opponent".into(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, AdversaryKind::RandomBaseline)
    }
}

/// Result of one actor application.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    /// Perturbed state or executed action.
    pub value: Vec<f64>,
    /// Applied perturbation `p` (`value - original` before action clipping).
    pub perturbation: Vec<f64>,
    pub decision: Option<Decision>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedOutcome {
    pub state: Perturbed,
    pub action: Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryAttachment {
    pub kind: AdversaryKind,
    pub director: Option<Policy>,
    pub budget: PerturbationBudget,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// `eps * tanh(d)` over the first `dim` entries of the director output.
pub fn squash(direction: &[f64], dim: usize, epsilon: f64) -> Vec<f64> {
    direction[..dim].iter().map(|d| epsilon * d.tanh()).collect()
}

impl AdversaryAttachment {
    /// Builds an attachment with a freshly initialized director.
    pub fn new(
        kind: AdversaryKind,
        spec: &EnvSpec,
        opponent_moves: Option<usize>,
        budget: PerturbationBudget,
        hidden: &[usize],
        normalize_obs: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        budget.validate()?;
        let continuous = spec.action_kind == ActionKind::Continuous;
        let sd = spec.state_dim;
        let ad = spec.action_dim;
        let need = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{}: {msg}", kind.label())))
            }
        };
        let director_arch = match kind {
            AdversaryKind::Paad => {
                need(budget.domain == AttackDomain::State, "requires the state domain")?;
                Some(Architecture::gaussian(2 * sd, hidden, sd, None))
            }
            AdversaryKind::Acad => {
                need(budget.domain == AttackDomain::Action, "requires the action domain")?;
                need(continuous, "requires continuous actions")?;
                Some(Architecture::gaussian(sd + ad, hidden, ad, None))
            }
            AdversaryKind::Mixed => {
                need(matches!(budget.domain, AttackDomain::Mixed { .. }), "requires the mixed domain")?;
                need(continuous, "requires continuous actions")?;
                Some(Architecture::gaussian(2 * sd + ad, hidden, sd.max(ad), None))
            }
            AdversaryKind::Memorized { window } => {
                need(window >= 1, "window must be positive")?;
                match budget.domain {
                    AttackDomain::State => Some(Architecture::gaussian(2 * sd, hidden, sd, None)),
                    AttackDomain::Action => {
                        need(continuous, "requires continuous actions")?;
                        Some(Architecture::gaussian(sd + ad, hidden, ad, None))
                    }
                    _ => return Err(Error::InvalidArgument("memorized: state or action domain".into())),
                }
            }
            AdversaryKind::RandomBaseline => {
                let perturbs_actions = matches!(budget.domain, AttackDomain::Action | AttackDomain::Mixed { .. });
                need(continuous || !perturbs_actions, "action perturbations need continuous actions")?;
                None
            }
            AdversaryKind::Opponent => {
                let moves = opponent_moves
                    .ok_or_else(|| Error::InvalidArgument("opponent: environment has no opponent moves".into()))?;
                Some(Architecture::categorical(sd, hidden, moves))
            }
        };
        let director = director_arch
            .map(|arch| Policy::new(arch, normalize_obs && kind != AdversaryKind::Opponent, rng))
            .transpose()?;
        Ok(Self {
            kind,
            director,
            budget,
            state_dim: sd,
            action_dim: ad,
        })
    }

    /// Attachment that plays a fixed column of a matrix game.
    pub fn pure_opponent(state_dim: usize, moves: usize, choice: usize) -> Result<Self> {
        Ok(Self {
            kind: AdversaryKind::Opponent,
            director: Some(Policy::pure_choice(state_dim, moves, choice)?),
            budget: PerturbationBudget::zero(),
            state_dim,
            action_dim: moves,
        })
    }

    pub fn director(&self) -> Result<&Policy> {
        self.director
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no director", self.kind.label())))
    }

    fn zero_ctx(ctx: Option<Vec<f64>>, dim: usize) -> Vec<f64> {
        ctx.unwrap_or_else(|| vec![0.0; dim])
    }

    /// Director observation: state followed by coupling context.
    pub fn director_obs(&self, s: &[f64], ctx_state: &CouplingContext, ctx_action: &CouplingContext) -> Vec<f64> {
        let context = |ctx: &CouplingContext, dim: usize| -> Vec<f64> {
            let v = match self.kind {
                AdversaryKind::Memorized { .. } => ctx.memory_mean(),
                _ => ctx.prev().map(|p| p.to_vec()),
            };
            Self::zero_ctx(v, dim)
        };
        let mut obs = s.to_vec();
        match (self.kind, self.budget.domain) {
            (AdversaryKind::Opponent | AdversaryKind::RandomBaseline, _) => {}
            (AdversaryKind::Mixed, _) => {
                obs.extend(context(ctx_state, self.state_dim));
                obs.extend(context(ctx_action, self.action_dim));
            }
            (_, AttackDomain::Action) => obs.extend(context(ctx_action, self.action_dim)),
            _ => obs.extend(context(ctx_state, self.state_dim)),
        }
        obs
    }

    fn direct(&self, obs: Vec<f64>, mode: ActMode, rng: &mut Rng) -> Result<(Vec<f64>, Decision)> {
        let (_, decision) = self.director()?.act(&obs, mode, rng)?;
        let d = decision
            .output
            .as_continuous()
            .ok_or_else(|| Error::InvalidArgument("director must have a Gaussian head".into()))?
            .to_vec();
        Ok((d, decision))
    }

    fn state_bound(&self, budget: &PerturbationBudget) -> Result<Bound> {
        budget
            .state_bound()
            .ok_or_else(|| Error::InvalidArgument("budget does not cover state perturbations".into()))
    }

    fn action_bound(&self, budget: &PerturbationBudget) -> Result<Bound> {
        budget
            .action_bound()
            .ok_or_else(|| Error::InvalidArgument("budget does not cover action perturbations".into()))
    }

    /// Director/actor state attack: `s~ = s + project_coupled(eps tanh(d), ctx)`.
    /// Records the applied perturbation in `ctx`.
    pub fn paad_perturb_state(
        &self,
        s: &[f64],
        ctx: &mut CouplingContext,
        budget: &PerturbationBudget,
        mode: ActMode,
        rng: &mut Rng,
    ) -> Result<Perturbed> {
        if !matches!(self.kind, AdversaryKind::Paad | AdversaryKind::Memorized { .. }) {
            return Err(Error::InvalidArgument(format!("{} is not a state director", self.kind.label())));
        }
        check_dim("state", self.state_dim, s.len())?;
        let bound = self.state_bound(budget)?;
        let obs = self.director_obs(s, ctx, &CouplingContext::new());
        let (d, decision) = self.direct(obs, mode, rng)?;
        let raw = squash(&d, self.state_dim, bound.epsilon);
        let p = self.project(&raw, ctx, &bound)?;
        ctx.record(p.clone());
        Ok(Perturbed {
            value: s.iter().zip(&p).map(|(x, d)| x + d).collect(),
            perturbation: p,
            decision: Some(decision),
        })
    }

    /// Action attack: `a~ = clip(a + project_coupled(eps tanh(a^), ctx))`.
    pub fn acad_perturb_action(
        &self,
        s: &[f64],
        a: &[f64],
        bounds: &[(f64, f64)],
        ctx: &mut CouplingContext,
        budget: &PerturbationBudget,
        mode: ActMode,
        rng: &mut Rng,
    ) -> Result<Perturbed> {
        if !matches!(self.kind, AdversaryKind::Acad | AdversaryKind::Memorized { .. }) {
            return Err(Error::InvalidArgument(format!("{} is not an action director", self.kind.label())));
        }
        check_dim("state", self.state_dim, s.len())?;
        check_dim("action", self.action_dim, a.len())?;
        let bound = self.action_bound(budget)?;
        let obs = self.director_obs(s, &CouplingContext::new(), ctx);
        let (d, decision) = self.direct(obs, mode, rng)?;
        let raw = squash(&d, self.action_dim, bound.epsilon);
        let p = self.project(&raw, ctx, &bound)?;
        ctx.record(p.clone());
        Ok(Perturbed {
            value: clip_sum(a, &p, bounds),
            perturbation: p,
            decision: Some(decision),
        })
    }

    /// Mixed attack: one direction `d` per step drives the state actor (first
    /// `state_dim` entries) and, after the victim acted on `s~`, the action
    /// actor (first `action_dim` entries).
    #[allow(clippy::too_many_arguments)]
    pub fn mixed_perturb(
        &self,
        s: &[f64],
        act: impl FnOnce(&[f64], &mut Rng) -> Result<Vec<f64>>,
        ctx_state: &mut CouplingContext,
        ctx_action: &mut CouplingContext,
        budget: &PerturbationBudget,
        bounds: &[(f64, f64)],
        mode: ActMode,
        rng: &mut Rng,
    ) -> Result<MixedOutcome> {
        if self.kind != AdversaryKind::Mixed {
            return Err(Error::InvalidArgument(format!("{} is not a mixed adversary", self.kind.label())));
        }
        check_dim("state", self.state_dim, s.len())?;
        let (Some(sb), Some(ab)) = (budget.state_bound(), budget.action_bound()) else {
            return Err(Error::InvalidArgument("mixed adversary needs state and action budgets".into()));
        };
        let obs = self.director_obs(s, ctx_state, ctx_action);
        let (d, decision) = self.direct(obs, mode, rng)?;
        let ps = project_coupled(&squash(&d, self.state_dim, sb.epsilon), ctx_state, &sb)?;
        ctx_state.record(ps.clone());
        let s_tilde: Vec<f64> = s.iter().zip(&ps).map(|(x, p)| x + p).collect();
        let a = act(&s_tilde, rng)?;
        check_dim("action", self.action_dim, a.len())?;
        let pa = project_coupled(&squash(&d, self.action_dim, ab.epsilon), ctx_action, &ab)?;
        ctx_action.record(pa.clone());
        Ok(MixedOutcome {
            state: Perturbed {
                value: s_tilde,
                perturbation: ps,
                decision: Some(decision),
            },
            action: Perturbed {
                value: clip_sum(&a, &pa, bounds),
                perturbation: pa,
                decision: None,
            },
        })
    }

    /// Column choice of a matrix-game opponent.
    pub fn opponent_move(&self, s: &[f64], mode: ActMode, rng: &mut Rng) -> Result<(usize, Decision)> {
        if self.kind != AdversaryKind::Opponent {
            return Err(Error::InvalidArgument(format!("{} is not an opponent", self.kind.label())));
        }
        let (action, decision) = self.director()?.act(s, mode, rng)?;
        let m = action
            .as_discrete()
            .ok_or_else(|| Error::InvalidArgument("opponent director must be categorical".into()))?;
        Ok((m, decision))
    }

    fn project(&self, raw: &[f64], ctx: &CouplingContext, bound: &Bound) -> Result<Vec<f64>> {
        match self.kind {
            AdversaryKind::Memorized { .. } => memorized_project(raw, ctx, bound),
            _ => project_coupled(raw, ctx, bound),
        }
    }
}

fn clip_sum(a: &[f64], p: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    a.iter()
        .zip(p)
        .enumerate()
        .map(|(k, (x, d))| match bounds.get(k) {
            Some((lo, hi)) => (x + d).clamp(*lo, *hi),
            None => x + d,
        })
        .collect()
}

/// Coupled projection against the mean of the remembered perturbations
/// (`|p| <= eps`, `|p - mean| <= eps_bar`). Plain ball projection while the
/// memory is empty.
pub fn memorized_project(p_raw: &[f64], memory: &CouplingContext, bound: &Bound) -> Result<Vec<f64>> {
    let mean = memory.memory_mean();
    project_toward(p_raw, mean.as_deref(), bound)
}

fn uniform_ball(dim: usize, bound: &Bound, rng: &mut Rng) -> Vec<f64> {
    let eps = bound.epsilon;
    match bound.norm {
        Norm::Linf => (0..dim).map(|_| rng.random_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = norm(&g, Norm::L2);
            let u: f64 = rng.random();
            let r = eps * u.powf(1.0 / dim as f64);
            if n > 0.0 {
                g.iter().map(|x| x * r / n).collect()
            } else {
                vec![0.0; dim]
            }
        }
    }
}

/// Uniform sample from the coupled feasible set around `ctx`'s previous
/// perturbation. Under L-inf the set is a box and is sampled directly; under
/// L2 samples from the eps-ball are rejected against the coupling constraint,
/// falling back to the coupled projection of one ball sample after 100
/// rejections. Records the sample in `ctx`.
pub fn random_adversary(bound: &Bound, ctx: &mut CouplingContext, dim: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let p = match (ctx.prev(), bound.norm) {
        (None, _) => uniform_ball(dim, bound, rng),
        (Some(prev), Norm::Linf) => {
            check_dim("coupling reference", dim, prev.len())?;
            prev.iter()
                .map(|pr| {
                    let lo = (-bound.epsilon).max(pr - bound.epsilon_bar);
                    let hi = bound.epsilon.min(pr + bound.epsilon_bar);
                    if lo < hi {
                        rng.random_range(lo..=hi)
                    } else {
                        lo.min(hi)
                    }
                })
                .collect()
        }
        (Some(prev), Norm::L2) => {
            check_dim("coupling reference", dim, prev.len())?;
            let mut accepted = None;
            for _ in 0..FALLBACK_AFTER {
                let cand = uniform_ball(dim, bound, rng);
                let d: Vec<f64> = cand.iter().zip(prev).map(|(a, b)| a - b).collect();
                if norm(&d, Norm::L2) <= bound.epsilon_bar {
                    accepted = Some(cand);
                    break;
                }
            }
            match accepted {
                Some(p) => p,
                None => project_coupled(&uniform_ball(dim, bound, rng), ctx, bound)?,
            }
        }
    };
    ctx.record(p.clone());
    Ok(p)
}

/// Plain-ball projection, re-exported for callers that only hold an
/// attachment's budget.
pub fn project_plain(p_raw: &[f64], bound: &Bound) -> Vec<f64> {
    project_admissible(p_raw, bound)
}
