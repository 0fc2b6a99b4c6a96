use grad_core::adversaries::AdversaryKind;
use grad_core::eval::{
    attack_from_scratch, attack_grid, episode_returns, epsilon_bar_ablation, model_uncertainty_sweep, natural_eval,
    natural_eval_mix, AgentMix, AttackConfig, CellSpec, NATURAL_CELL,
};
use grad_core::mdp::{ActMode, EnvConfig, Policy};
use grad_core::meta_game::{estimate_payoff_entry, MetaStrategy};
use grad_core::oracle::{GameSetup, OracleConfig};
use grad_core::perturb::{AttackDomain, Norm, PerturbationBudget};
use grad_core::rng::rng_from_seed;
use grad_core::rollout::RolloutModes;
use rand::Rng as _;

fn pointmass_fixed() -> EnvConfig {
    EnvConfig::Pointmass {
        goal: [0.5, -0.5],
        wind: false,
        start: Some([0.0, 0.0, 0.0, 0.0]),
    }
}

fn pointmass() -> EnvConfig {
    EnvConfig::Pointmass {
        goal: [0.5, -0.5],
        wind: false,
        start: None,
    }
}

fn agent(env: &EnvConfig, seed: u64) -> Policy {
    let setup = GameSetup {
        env: env.clone(),
        adversary: AdversaryKind::Paad,
        budget: PerturbationBudget::state(0.1, 0.02).unwrap(),
        agent_hidden: vec![8],
        adversary_hidden: vec![8],
        normalize_obs: false,
        eval_mode: ActMode::Mean,
    };
    let mut rng = rng_from_seed(seed);
    let mut p = setup.new_agent(&mut rng).unwrap();
    // Fresh policies have a zero mean head; give each a distinct controller.
    for w in p.params_mut() {
        *w += rng.random_range(-0.5..0.5);
    }
    p
}

fn tiny_attack() -> AttackConfig {
    AttackConfig {
        oracle: OracleConfig {
            iterations: 2,
            steps_per_iteration: 200,
            minibatch_size: 100,
            epochs: 2,
            ..OracleConfig::default()
        },
        adversary_hidden: vec![8],
        restarts: 2,
        eval_episodes: 5,
        ..AttackConfig::default()
    }
}

#[test]
fn deterministic_env_and_mean_policy_give_zero_spread() {
    let env = pointmass_fixed();
    let s = natural_eval(&agent(&env, 1), &env, 10, &[3, 4], ActMode::Mean).unwrap();
    assert_eq!(s.std, 0.0);
    assert_eq!(s.count, 20);
}

#[test]
fn first_episode_is_a_prefix() {
    let env = pointmass();
    let mix = AgentMix::single(agent(&env, 1));
    let modes = RolloutModes::SAMPLE;
    let one = episode_returns(&mix, None, &env, 1, modes, 9).unwrap();
    let many = episode_returns(&mix, None, &env, 100, modes, 9).unwrap();
    assert_eq!(one[0], many[0]);
}

#[test]
fn single_mix_matches_payoff_estimation() {
    let env = pointmass();
    let p = agent(&env, 2);
    let r = episode_returns(&AgentMix::single(p.clone()), None, &env, 7, RolloutModes::SAMPLE, 5).unwrap();
    let est = estimate_payoff_entry(&p, None, &PerturbationBudget::zero(), &env, 7, RolloutModes::SAMPLE, 5).unwrap();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    assert!((mean - est.mean).abs() < 1e-12);
}

#[test]
fn mixtures_draw_members_by_weight() {
    let env = pointmass_fixed();
    let (a, b) = (agent(&env, 1), agent(&env, 2));
    let ra = natural_eval(&a, &env, 1, &[0], ActMode::Mean).unwrap().mean;
    let rb = natural_eval(&b, &env, 1, &[0], ActMode::Mean).unwrap().mean;
    assert_ne!(ra, rb);
    let mix = AgentMix::new(vec![a, b], MetaStrategy::new(vec![0.25, 0.75]).unwrap()).unwrap();
    let r = episode_returns(&mix, None, &env, 2000, RolloutModes::MEAN, 1).unwrap();
    let frac_b = r.iter().filter(|&&x| x == rb).count() as f64 / r.len() as f64;
    assert!((frac_b - 0.75).abs() < 0.04, "{frac_b}");
    let pure = AgentMix::new(mix.policies.clone(), MetaStrategy::pure(2, 0)).unwrap();
    assert_eq!(natural_eval_mix(&pure, &env, 3, &[0], ActMode::Mean).unwrap().mean, ra);
}

#[test]
fn zero_budget_attack_equals_natural_return() {
    let env = pointmass();
    let mix = AgentMix::single(agent(&env, 3));
    let cfg = tiny_attack();
    let cells = [CellSpec {
        kind: AdversaryKind::Paad,
        budget: PerturbationBudget::state(0.0, 0.0).unwrap(),
        replicate: 0,
    }];
    let report = attack_grid(&mix, &env, &cells, &cfg, &[1, 2]).unwrap();
    for seed in [1, 2] {
        let nat = report.cell_rows(NATURAL_CELL).find(|r| r.seed == seed).unwrap();
        let att = report.cell_rows(&cells[0].label()).find(|r| r.seed == seed).unwrap();
        assert_eq!(nat.mean, att.mean);
    }
}

#[test]
fn attack_keeps_the_agent_frozen_and_reports_the_weakest_restart() {
    let env = pointmass();
    let p = agent(&env, 4);
    let hash = p.param_hash();
    let mix = AgentMix::single(p);
    let out = attack_from_scratch(&mix, AdversaryKind::Paad, &PerturbationBudget::state(0.1, 0.02).unwrap(), &env, &tiny_attack(), 6)
        .unwrap();
    assert_eq!(mix.policies[0].param_hash(), hash);
    assert_eq!(out.restart_means.len(), 2);
    let min = out.restart_means.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(out.attacked.mean, min);
    assert_eq!(out.attacked.count, 5);
}

#[test]
fn zero_alpha_equals_natural_even_when_sampling() {
    let env = EnvConfig::Balance { start: None };
    let p = agent(&env, 5);
    let mix = AgentMix::single(p);
    let rep = model_uncertainty_sweep(&mix, &env, &[0.0, 0.2], 6, &[1, 2, 3], ActMode::Sample).unwrap();
    let cells = rep.cells();
    assert_eq!(cells.len(), 3);
    for seed in [1, 2, 3] {
        let nat = rep.cell_rows(NATURAL_CELL).find(|r| r.seed == seed).unwrap();
        let zero = rep.cell_rows(&cells[1]).find(|r| r.seed == seed).unwrap();
        assert_eq!(nat.mean, zero.mean);
        assert_eq!(zero.alpha, Some(0.0));
    }
    assert!(model_uncertainty_sweep(&mix, &env, &[1.5], 6, &[1], ActMode::Mean).is_err());
}

#[test]
fn ablation_grid_needs_an_uncoupled_value() {
    let env = pointmass();
    let mix = AgentMix::single(agent(&env, 1));
    let r = epsilon_bar_ablation(&mix, &env, AdversaryKind::Paad, 0.1, &[0.01, 0.02], Norm::Linf, AttackDomain::State, &tiny_attack(), &[1]);
    assert!(r.is_err());
}

#[test]
fn failed_cells_are_recorded_not_dropped() {
    let env = pointmass();
    let mix = AgentMix::single(agent(&env, 1));
    let cells = [CellSpec {
        kind: AdversaryKind::Acad,
        // Acad needs the action domain; this cell cannot be built.
        budget: PerturbationBudget::state(0.1, 0.02).unwrap(),
        replicate: 0,
    }];
    let report = attack_grid(&mix, &env, &cells, &tiny_attack(), &[1, 2]).unwrap();
    let summary = report.summary();
    let cell = summary.iter().find(|c| c.cell == cells[0].label()).unwrap();
    assert_eq!((cell.seeds, cell.failed), (2, 2));
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path(), "grid").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid-summary.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}
