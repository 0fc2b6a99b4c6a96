//! Episode collection with an optional adversary in the loop.
//!
//! Every perturbation the adversary emits is re-audited against the active
//! budget before the step is executed; a failed audit is an internal error.

use serde::{Deserialize, Serialize};

use crate::adversaries::{random_adversary, AdversaryAttachment, AdversaryKind};
use crate::error::{Error, Result};
use crate::mdp::{ActMode, Action, ActionKind, Decision, Environment, Policy};
use crate::perturb::{apply_model_uncertainty, norm, AttackDomain, Bound, CouplingContext, PerturbationBudget, SLACK};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutModes {
    pub agent: ActMode,
    pub adversary: ActMode,
}

impl RolloutModes {
    pub const SAMPLE: Self = Self {
        agent: ActMode::Sample,
        adversary: ActMode::Sample,
    };
    pub const MEAN: Self = Self {
        agent: ActMode::Mean,
        adversary: ActMode::Mean,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    /// What the agent observed.
    pub perturbed_state: Vec<f64>,
    /// Agent's action after clipping to the action bounds.
    pub action: Action,
    /// Action actually executed by the environment.
    pub executed_action: Action,
    /// Applied state perturbation (zeros when states are not attacked).
    pub state_perturbation: Vec<f64>,
    /// Applied action perturbation (zeros when actions are not attacked,
    /// empty for discrete actions).
    pub action_perturbation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub agent: Decision,
    pub adversary: Option<Decision>,
    pub opponent_move: Option<usize>,
    /// Whether the executed action was replaced by model-uncertainty noise.
    pub replaced: bool,
}

impl StepRecord {
    /// The adversary's reward for this step.
    pub fn adversary_reward(&self) -> f64 {
        -self.reward
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Undiscounted sum of agent rewards.
    pub episode_return: f64,
    /// Whether the environment ended the episode (always true at the horizon).
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn audit(what: &str, p: &[f64], reference: Option<&[f64]>, bound: &Bound) -> Result<()> {
    let n = norm(p, bound.norm);
    if n > bound.epsilon + SLACK {
        return Err(Error::Constraint(format!("{what} perturbation norm {n} exceeds epsilon {}", bound.epsilon)));
    }
    if let Some(r) = reference {
        let d: Vec<f64> = p.iter().zip(r).map(|(a, b)| a - b).collect();
        let dn = norm(&d, bound.norm);
        if dn > bound.epsilon_bar + SLACK {
            return Err(Error::Constraint(format!(
                "{what} perturbation moved {dn} > epsilon_bar {}",
                bound.epsilon_bar
            )));
        }
    }
    Ok(())
}

fn coupling_reference(kind: AdversaryKind, ctx: &CouplingContext) -> Option<Vec<f64>> {
    match kind {
        AdversaryKind::Memorized { .. } => ctx.memory_mean(),
        _ => ctx.prev().map(<[f64]>::to_vec),
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Runs one episode of `agent` in `env`, optionally under attack.
///
/// `attack` pairs the attachment with the budget active for this episode
/// (which may be a scheduled fraction of the attachment's target budget).
pub fn rollout(
    env: &mut dyn Environment,
    agent: &Policy,
    attack: Option<(&AdversaryAttachment, &PerturbationBudget)>,
    modes: RolloutModes,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let spec = env.spec().clone();
    if agent.architecture().obs_dim != spec.state_dim {
        return Err(Error::Dimension {
            what: "agent observation",
            expected: spec.state_dim,
            got: agent.architecture().obs_dim,
        });
    }
    if env.opponent_moves().is_some() && !matches!(attack, Some((a, _)) if a.kind == AdversaryKind::Opponent) {
        return Err(Error::InvalidArgument("two-player environment needs an opponent attachment".into()));
    }
    let action_len = match spec.action_kind {
        ActionKind::Continuous => spec.action_dim,
        ActionKind::Discrete => 0,
    };
    let mut ctx_state = CouplingContext::new();
    let mut ctx_action = CouplingContext::new();
    if let Some((att, _)) = attack {
        if let AdversaryKind::Memorized { window } = att.kind {
            ctx_state = CouplingContext::with_window(window);
            ctx_action = CouplingContext::with_window(window);
        }
    }

    let mut s = env.reset();
    let mut steps = Vec::with_capacity(spec.horizon);
    let mut total = 0.0;
    let mut terminal = false;
    for t in 0..spec.horizon {
        let mut ps = vec![0.0; spec.state_dim];
        let mut pa = vec![0.0; action_len];
        let mut adv_decision = None;
        let mut opponent_move = None;
        let mut replaced = false;

        let (s_tilde, action, agent_decision, executed) = match attack {
            None => {
                let (a, d) = agent.act(&s, modes.agent, rng)?;
                (s.clone(), a.clone(), d, a)
            }
            Some((att, budget)) => match (att.kind, budget.domain) {
                (AdversaryKind::Opponent, _) => {
                    let (a, d) = agent.act(&s, modes.agent, rng)?;
                    let (m, od) = att.opponent_move(&s, modes.adversary, rng)?;
                    opponent_move = Some(m);
                    adv_decision = Some(od);
                    (s.clone(), a.clone(), d, a)
                }
                (AdversaryKind::Paad, _) | (AdversaryKind::Memorized { .. }, AttackDomain::State) => {
                    let bound = budget.state_bound().ok_or_else(|| no_bound("state"))?;
                    let reference = coupling_reference(att.kind, &ctx_state);
                    let out = att.paad_perturb_state(&s, &mut ctx_state, budget, modes.adversary, rng)?;
                    audit("state", &out.perturbation, reference.as_deref(), &bound)?;
                    ps = out.perturbation;
                    adv_decision = out.decision;
                    let (a, d) = agent.act(&out.value, modes.agent, rng)?;
                    (out.value, a.clone(), d, a)
                }
                (AdversaryKind::Acad, _) | (AdversaryKind::Memorized { .. }, _) => {
                    let bound = budget.action_bound().ok_or_else(|| no_bound("action"))?;
                    let (a, d) = agent.act(&s, modes.agent, rng)?;
                    let av = continuous(&a)?;
                    let reference = coupling_reference(att.kind, &ctx_action);
                    let out = att.acad_perturb_action(&s, av, &spec.action_bounds, &mut ctx_action, budget, modes.adversary, rng)?;
                    audit("action", &out.perturbation, reference.as_deref(), &bound)?;
                    pa = out.perturbation;
                    adv_decision = out.decision;
                    (s.clone(), a, d, Action::Continuous(out.value))
                }
                (AdversaryKind::Mixed, _) => {
                    let sb = budget.state_bound().ok_or_else(|| no_bound("state"))?;
                    let ab = budget.action_bound().ok_or_else(|| no_bound("action"))?;
                    let ref_s = ctx_state.prev().map(<[f64]>::to_vec);
                    let ref_a = ctx_action.prev().map(<[f64]>::to_vec);
                    let mut taken = None;
                    let out = att.mixed_perturb(
                        &s,
                        |x, rng| {
                            let (a, d) = agent.act(x, modes.agent, rng)?;
                            let v = continuous(&a)?.to_vec();
                            taken = Some((a, d));
                            Ok(v)
                        },
                        &mut ctx_state,
                        &mut ctx_action,
                        budget,
                        &spec.action_bounds,
                        modes.adversary,
                        rng,
                    )?;
                    audit("state", &out.state.perturbation, ref_s.as_deref(), &sb)?;
                    audit("action", &out.action.perturbation, ref_a.as_deref(), &ab)?;
                    let (a, d) = taken.expect("mixed adversary invokes the agent");
                    ps = out.state.perturbation;
                    pa = out.action.perturbation;
                    adv_decision = out.state.decision;
                    (out.state.value, a, d, Action::Continuous(out.action.value))
                }
                (AdversaryKind::RandomBaseline, AttackDomain::ModelUncertainty { alpha }) => {
                    let (a, d) = agent.act(&s, modes.agent, rng)?;
                    let (executed, r) = apply_model_uncertainty(&a, alpha, &spec, rng);
                    replaced = r;
                    (s.clone(), a, d, executed)
                }
                (AdversaryKind::RandomBaseline, _) => {
                    let mut s_tilde = s.clone();
                    if let Some(bound) = budget.state_bound() {
                        let reference = ctx_state.prev().map(<[f64]>::to_vec);
                        ps = random_adversary(&bound, &mut ctx_state, spec.state_dim, rng)?;
                        audit("state", &ps, reference.as_deref(), &bound)?;
                        s_tilde = add(&s, &ps);
                    }
                    let (a, d) = agent.act(&s_tilde, modes.agent, rng)?;
                    let executed = match budget.action_bound() {
                        Some(bound) => {
                            let reference = ctx_action.prev().map(<[f64]>::to_vec);
                            pa = random_adversary(&bound, &mut ctx_action, spec.action_dim, rng)?;
                            audit("action", &pa, reference.as_deref(), &bound)?;
                            Action::Continuous(spec.clip_action(&add(continuous(&a)?, &pa)))
                        }
                        None => a.clone(),
                    };
                    (s_tilde, a, d, executed)
                }
            },
        };

        let tr = env.step(&executed, opponent_move)?;
        total += tr.reward;
        steps.push(StepRecord {
            t,
            state: std::mem::replace(&mut s, tr.state),
            perturbed_state: s_tilde,
            action,
            executed_action: executed,
            state_perturbation: ps,
            action_perturbation: pa,
            reward: tr.reward,
            done: tr.done,
            agent: agent_decision,
            adversary: adv_decision,
            opponent_move,
            replaced,
        });
        if tr.done {
            terminal = true;
            break;
        }
    }
    Ok(Trajectory {
        steps,
        episode_return: total,
        terminal,
    })
}

fn no_bound(which: &str) -> Error {
    Error::InvalidArgument(format!("budget has no {which} component"))
}

fn continuous(a: &Action) -> Result<&[f64]> {
    a.as_continuous()
        .ok_or_else(|| Error::InvalidArgument("action perturbations need continuous actions".into()))
}
