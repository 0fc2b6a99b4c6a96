//! Feasible sets for adversarial perturbations and their projections.
//!
//! A perturbation `p_t` (applied as `s~ = s + p` or `a~ = a + p`) is
//! admissible when `|p_t| <= eps`, and temporally coupled when additionally
//! `|p_t - p_{t-1}| <= eps_bar`. Once `eps_bar >= 2 eps` the coupling can no
//! longer bind, so the coupled set equals the plain ball.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::mdp::{Action, ActionKind, EnvSpec};
use crate::rng::Rng;

/// Tolerance used when auditing constraints.
pub const SLACK: f64 = 1e-9;
pub const DYKSTRA_MAX_ITERS: usize = 100;
pub const DYKSTRA_TOL: f64 = 1e-9;
const ROUNDING: f64 = 1e-12;
/// Memory length of the memorized attacker.
pub const MEMORY_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
    L2,
}

pub fn norm(v: &[f64], kind: Norm) -> f64 {
    match kind {
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

fn distance(a: &[f64], b: &[f64], kind: Norm) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d, kind)
}

/// Where perturbations act.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackDomain {
    State,
    Action,
    /// One director drives both a state and an action perturbation; the
    /// state side uses the budget's main `(eps, eps_bar)`.
    Mixed {
        action_epsilon: f64,
        action_epsilon_bar: f64,
    },
    /// With probability `alpha` the executed action is replaced by a uniform
    /// sample over the action space.
    ModelUncertainty { alpha: f64 },
}

/// One side's feasible-set parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bound {
    pub epsilon: f64,
    pub epsilon_bar: f64,
    pub norm: Norm,
}

impl Bound {
    pub fn new(epsilon: f64, epsilon_bar: f64, norm: Norm) -> Self {
        Self {
            epsilon,
            epsilon_bar,
            norm,
        }
    }

    /// True when the coupling constraint is implied by the magnitude bound.
    pub fn coupling_is_vacuous(&self) -> bool {
        self.epsilon_bar >= 2.0 * self.epsilon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub epsilon_bar: f64,
    pub norm: Norm,
    pub domain: AttackDomain,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, epsilon_bar: f64, norm: Norm, domain: AttackDomain) -> Result<Self> {
        let b = Self {
            epsilon,
            epsilon_bar,
            norm,
            domain,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn state(epsilon: f64, epsilon_bar: f64) -> Result<Self> {
        Self::new(epsilon, epsilon_bar, Norm::Linf, AttackDomain::State)
    }

    pub fn action(epsilon: f64, epsilon_bar: f64) -> Result<Self> {
        Self::new(epsilon, epsilon_bar, Norm::Linf, AttackDomain::Action)
    }

    /// Zero budget; used for adversaries that do not perturb (matrix-game
    /// opponents).
    pub fn zero() -> Self {
        Self {
            epsilon: 0.0,
            epsilon_bar: 0.0,
            norm: Norm::Linf,
            domain: AttackDomain::State,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("epsilon", self.epsilon)?;
        nonneg("epsilon_bar", self.epsilon_bar)?;
        match self.domain {
            AttackDomain::Mixed {
                action_epsilon,
                action_epsilon_bar,
            } => {
                nonneg("action_epsilon", action_epsilon)?;
                nonneg("action_epsilon_bar", action_epsilon_bar)?;
            }
            AttackDomain::ModelUncertainty { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
                }
            }
            AttackDomain::State | AttackDomain::Action => {}
        }
        Ok(())
    }

    /// Bound on state perturbations, if this budget perturbs states.
    pub fn state_bound(&self) -> Option<Bound> {
        match self.domain {
            AttackDomain::State | AttackDomain::Mixed { .. } => {
                Some(Bound::new(self.epsilon, self.epsilon_bar, self.norm))
            }
            _ => None,
        }
    }

    /// Bound on action perturbations, if this budget perturbs actions.
    pub fn action_bound(&self) -> Option<Bound> {
        match self.domain {
            AttackDomain::Action => Some(Bound::new(self.epsilon, self.epsilon_bar, self.norm)),
            AttackDomain::Mixed {
                action_epsilon,
                action_epsilon_bar,
            } => Some(Bound::new(action_epsilon, action_epsilon_bar, self.norm)),
            _ => None,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.domain {
            AttackDomain::ModelUncertainty { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// True when no perturbation of any kind is possible.
    pub fn is_null(&self) -> bool {
        let action = match self.domain {
            AttackDomain::Mixed { action_epsilon, .. } => action_epsilon,
            AttackDomain::ModelUncertainty { alpha } => alpha,
            _ => 0.0,
        };
        self.epsilon == 0.0 && action == 0.0
    }

    /// Budget with every magnitude and coupling bound multiplied by `factor`.
    /// The model-uncertainty probability is left unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let domain = match self.domain {
            AttackDomain::Mixed {
                action_epsilon,
                action_epsilon_bar,
            } => AttackDomain::Mixed {
                action_epsilon: action_epsilon * factor,
                action_epsilon_bar: action_epsilon_bar * factor,
            },
            d => d,
        };
        Self {
            epsilon: self.epsilon * factor,
            epsilon_bar: self.epsilon_bar * factor,
            norm: self.norm,
            domain,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DomainTag {
    State,
    Action,
    Mixed,
    ModelUncertainty,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetRepr {
    epsilon: f64,
    epsilon_bar: f64,
    #[serde(default)]
    norm: Norm,
    #[serde(default = "default_domain")]
    domain: DomainTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_epsilon_bar: Option<f64>,
}

fn default_domain() -> DomainTag {
    DomainTag::State
}

impl TryFrom<BudgetRepr> for PerturbationBudget {
    type Error = Error;

    fn try_from(r: BudgetRepr) -> Result<Self> {
        let domain = match r.domain {
            DomainTag::State => AttackDomain::State,
            DomainTag::Action => AttackDomain::Action,
            DomainTag::Mixed => AttackDomain::Mixed {
                action_epsilon: r.action_epsilon.unwrap_or(r.epsilon),
                action_epsilon_bar: r.action_epsilon_bar.unwrap_or(r.epsilon_bar),
            },
            DomainTag::ModelUncertainty => AttackDomain::ModelUncertainty {
                alpha: r
                    .alpha
                    .ok_or_else(|| Error::InvalidArgument("model_uncertainty domain needs alpha".into()))?,
            },
        };
        if r.alpha.is_some() && r.domain != DomainTag::ModelUncertainty {
            return Err(Error::InvalidArgument("alpha only applies to the model_uncertainty domain".into()));
        }
        Self::new(r.epsilon, r.epsilon_bar, r.norm, domain)
    }
}

impl From<PerturbationBudget> for BudgetRepr {
    fn from(b: PerturbationBudget) -> Self {
        let (domain, alpha, action_epsilon, action_epsilon_bar) = match b.domain {
            AttackDomain::State => (DomainTag::State, None, None, None),
            AttackDomain::Action => (DomainTag::Action, None, None, None),
            AttackDomain::Mixed {
                action_epsilon,
                action_epsilon_bar,
            } => (DomainTag::Mixed, None, Some(action_epsilon), Some(action_epsilon_bar)),
            AttackDomain::ModelUncertainty { alpha } => (DomainTag::ModelUncertainty, Some(alpha), None, None),
        };
        BudgetRepr {
            epsilon: b.epsilon,
            epsilon_bar: b.epsilon_bar,
            norm: b.norm,
            domain,
            alpha,
            action_epsilon,
            action_epsilon_bar,
        }
    }
}

/// Previous perturbation plus a short history for the memorized attacker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CouplingContext {
    prev: Option<Vec<f64>>,
    history: VecDeque<Vec<f64>>,
    window: usize,
}

impl CouplingContext {
    pub fn new() -> Self {
        Self::with_window(MEMORY_WINDOW)
    }

    pub fn with_window(window: usize) -> Self {
        Self {
            prev: None,
            history: VecDeque::with_capacity(window),
            window: window.max(1),
        }
    }

    pub fn from_prev(prev: Vec<f64>) -> Self {
        let mut ctx = Self::new();
        ctx.record(prev);
        ctx
    }

    pub fn prev(&self) -> Option<&[f64]> {
        self.prev.as_deref()
    }

    pub fn history(&self) -> impl Iterator<Item = &[f64]> {
        self.history.iter().map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Mean of the remembered perturbations, `None` before the first one.
    pub fn memory_mean(&self) -> Option<Vec<f64>> {
        let first = self.history.front()?;
        let n = self.history.len() as f64;
        let mut mean = vec![0.0; first.len()];
        for v in &self.history {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }

    pub fn record(&mut self, p: Vec<f64>) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(p.clone());
        self.prev = Some(p);
    }
}

/// Nearest point of `{|p| <= eps}` to `p_raw`.
pub fn project_admissible(p_raw: &[f64], bound: &Bound) -> Vec<f64> {
    let eps = bound.epsilon;
    match bound.norm {
        Norm::Linf => p_raw.iter().map(|x| x.clamp(-eps, eps)).collect(),
        Norm::L2 => project_l2_ball(p_raw, None, eps),
    }
}

fn project_l2_ball(p: &[f64], center: Option<&[f64]>, radius: f64) -> Vec<f64> {
    let offset: Vec<f64> = match center {
        Some(c) => p.iter().zip(c).map(|(x, c)| x - c).collect(),
        None => p.to_vec(),
    };
    let n = norm(&offset, Norm::L2);
    // Points already on the sphere up to rounding are left alone so the
    // projection is idempotent.
    if n <= radius + ROUNDING {
        return p.to_vec();
    }
    let s = if n > 0.0 { radius / n } else { 0.0 };
    match center {
        Some(c) => offset.iter().zip(c).map(|(d, c)| c + d * s).collect(),
        None => offset.iter().map(|d| d * s).collect(),
    }
}

/// Projects onto `{|p| <= eps} ∩ {|p - prev| <= eps_bar}`, where `prev` is
/// the context's previous perturbation. Without a previous perturbation this
/// is [`project_admissible`].
pub fn project_coupled(p_raw: &[f64], ctx: &CouplingContext, bound: &Bound) -> Result<Vec<f64>> {
    project_toward(p_raw, ctx.prev(), bound)
}

/// Coupled projection against an explicit reference point (the previous
/// perturbation, or the memory mean for the memorized attacker).
pub fn project_toward(p_raw: &[f64], reference: Option<&[f64]>, bound: &Bound) -> Result<Vec<f64>> {
    check_finite("raw perturbation", p_raw)?;
    let Some(r) = reference else {
        return Ok(project_admissible(p_raw, bound));
    };
    check_dim("coupling reference", p_raw.len(), r.len())?;
    let rn = norm(r, bound.norm);
    if rn > bound.epsilon + SLACK {
        return Err(Error::Constraint(format!(
            "previous perturbation has norm {rn} > epsilon {}",
            bound.epsilon
        )));
    }
    Ok(match bound.norm {
        Norm::Linf => p_raw
            .iter()
            .zip(r)
            .map(|(x, pr)| {
                let lo = (-bound.epsilon).max(pr - bound.epsilon_bar);
                let hi = bound.epsilon.min(pr + bound.epsilon_bar);
                x.clamp(lo, hi)
            })
            .collect(),
        Norm::L2 => dykstra_l2(p_raw, r, bound),
    })
}

/// Dykstra's alternating projection onto the intersection of the origin ball
/// and the ball around `r`, followed by a segment repair towards `r` (which is
/// feasible) so the result always satisfies both constraints.
fn dykstra_l2(p: &[f64], r: &[f64], bound: &Bound) -> Vec<f64> {
    let n = p.len();
    let mut x = p.to_vec();
    let mut inc_a = vec![0.0; n];
    let mut inc_b = vec![0.0; n];
    for _ in 0..DYKSTRA_MAX_ITERS {
        let za: Vec<f64> = (0..n).map(|i| x[i] + inc_a[i]).collect();
        let y = project_l2_ball(&za, None, bound.epsilon);
        (0..n).for_each(|i| inc_a[i] = za[i] - y[i]);
        let zb: Vec<f64> = (0..n).map(|i| y[i] + inc_b[i]).collect();
        let next = project_l2_ball(&zb, Some(r), bound.epsilon_bar);
        (0..n).for_each(|i| inc_b[i] = zb[i] - next[i]);
        let moved = distance(&next, &x, Norm::L2);
        let gap = distance(&next, &y, Norm::L2);
        x = next;
        if moved <= DYKSTRA_TOL && gap <= DYKSTRA_TOL {
            break;
        }
    }
    repair_l2(x, r, bound)
}

fn repair_l2(x: Vec<f64>, r: &[f64], bound: &Bound) -> Vec<f64> {
    let x = project_l2_ball(&x, Some(r), bound.epsilon_bar);
    if norm(&x, Norm::L2) <= bound.epsilon {
        return x;
    }
    // Largest t in [0, 1] with |r + t (x - r)| <= eps.
    let d: Vec<f64> = x.iter().zip(r).map(|(a, b)| a - b).collect();
    let a: f64 = d.iter().map(|v| v * v).sum();
    let b: f64 = d.iter().zip(r).map(|(u, v)| u * v).sum();
    let c: f64 = r.iter().map(|v| v * v).sum::<f64>() - bound.epsilon * bound.epsilon;
    let t = if a > 0.0 {
        ((-b + (b * b - a * c).max(0.0).sqrt()) / a).clamp(0.0, 1.0)
    } else {
        0.0
    };
    r.iter().zip(&d).map(|(rv, dv)| rv + t * dv).collect()
}

/// Per-step audit of a perturbation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    /// `|p_t| <= eps + SLACK`.
    pub admissible: Vec<bool>,
    /// `|p_t - p_{t-1}| <= eps_bar + SLACK`; always true at `t = 0`.
    pub coupled: Vec<bool>,
    pub pass: bool,
}

impl SequenceReport {
    pub fn first_violation(&self) -> Option<usize> {
        (0..self.admissible.len()).find(|&t| !self.admissible[t] || !self.coupled[t])
    }
}

pub fn check_sequence(perturbations: &[Vec<f64>], bound: &Bound) -> Result<SequenceReport> {
    let Some(first) = perturbations.first() else {
        return Err(Error::InvalidArgument("empty perturbation sequence".into()));
    };
    let dim = first.len();
    for p in perturbations {
        check_dim("perturbation sequence", dim, p.len())?;
    }
    let admissible: Vec<bool> = perturbations
        .iter()
        .map(|p| norm(p, bound.norm) <= bound.epsilon + SLACK)
        .collect();
    let coupled: Vec<bool> = std::iter::once(true)
        .chain(
            perturbations
                .windows(2)
                .map(|w| distance(&w[1], &w[0], bound.norm) <= bound.epsilon_bar + SLACK),
        )
        .collect();
    let pass = admissible.iter().chain(&coupled).all(|&ok| ok);
    Ok(SequenceReport {
        admissible,
        coupled,
        pass,
    })
}

/// With probability `alpha` replaces `a` by a uniform sample over the action
/// space. Returns the executed action and whether it was replaced. With
/// `alpha == 0` no randomness is consumed.
pub fn apply_model_uncertainty(a: &Action, alpha: f64, spec: &EnvSpec, rng: &mut Rng) -> (Action, bool) {
    if alpha <= 0.0 {
        return (a.clone(), false);
    }
    let u: f64 = rng.random();
    if u >= alpha {
        return (a.clone(), false);
    }
    let replaced = match spec.action_kind {
        ActionKind::Continuous => Action::Continuous(
            spec.action_bounds
                .iter()
                .map(|(lo, hi)| rng.random_range(*lo..*hi))
                .collect(),
        ),
        ActionKind::Discrete => Action::Discrete(rng.random_range(0..spec.action_dim)),
    };
    (replaced, true)
}
