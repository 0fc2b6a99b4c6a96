use grad_core::adversaries::AdversaryAttachment;
use grad_core::engine::{
    checkpoint_path, grad_epoch, init_state, load_checkpoint, run_grad, save_checkpoint, BudgetSchedule, EngineConfig,
    GradState, Threshold,
};
use grad_core::mdp::{EnvConfig, Policy};
use grad_core::meta_game::{aggregate, double_oracle_matrix, exploitability, initial_pair, MetaStrategy};
use grad_core::oracle::{
    pure_index, BestResponse, BestResponseOracle, EnumerationOracle, GameSetup, OracleConfig, PpoOracle,
};
use grad_core::perturb::PerturbationBudget;
use grad_core::rng::{rng_from_seed, Rng};
use grad_core::{Error, Result};
use proptest::prelude::*;
use rand::Rng as _;

fn random_game(rng: &mut Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn exact_cfg() -> EngineConfig {
    EngineConfig {
        max_epochs: 40,
        threshold: Threshold::Absolute { value: 1e-9 },
        payoff_episodes: 1,
        ..EngineConfig::default()
    }
}

fn populations(state: &GradState) -> (Vec<usize>, Vec<usize>) {
    let rows = state.agents.iter().map(|p| pure_index(p).unwrap()).collect();
    let cols = state
        .adversaries
        .iter()
        .map(|a| pure_index(a.director().unwrap()).unwrap())
        .collect();
    (rows, cols)
}

#[test]
fn exact_grad_reproduces_double_oracle_traces() {
    let mut rng = rng_from_seed(11);
    for game in 0..20u64 {
        let m = rng.random_range(2..=6);
        let n = m;
        let u = random_game(&mut rng, m, n);
        let reference = double_oracle_matrix(&u, game).unwrap();
        let out = run_grad(&exact_cfg(), &GameSetup::matrix(u.clone()), &EnumerationOracle, game, None).unwrap();
        assert!(out.converged, "game {game} did not converge");
        let (rows, cols) = populations(&out.state);
        // The engine appends the certifying best responses before stopping.
        assert_eq!(rows.len(), reference.iterations + 1);
        assert_eq!(&rows[..reference.iterations], &reference.rows[..]);
        assert_eq!(&cols[..reference.iterations], &reference.cols[..]);
        let sr = aggregate(&rows, out.state.sigma_agent.probs(), m);
        let sc = aggregate(&cols, out.state.sigma_adversary.probs(), n);
        assert!(exploitability(&u, &sr, &sc) <= 1e-6);
    }
}

#[test]
fn one_epoch_matches_one_do_iteration() {
    let u = vec![vec![3.0, -1.0, 0.0], vec![-2.0, 1.0, 2.0], vec![0.5, 0.0, -1.0]];
    let reference = double_oracle_matrix(&u, 5).unwrap();
    let setup = GameSetup::matrix(u);
    let state = init_state(&exact_cfg(), &setup, &EnumerationOracle, 5).unwrap();
    let (next, report) = grad_epoch(&state, &exact_cfg(), &setup, &EnumerationOracle).unwrap();
    let (rows, cols) = populations(&next);
    assert_eq!(rows, reference.rows[..2]);
    assert_eq!(cols, reference.cols[..2]);
    assert_eq!(report.population, 2);
    assert!((report.exploitability - reference.exploitability[0]).abs() <= 1e-12);
}

#[test]
fn rps_from_rock_converges_within_four_epochs() {
    let u = vec![vec![0.0, -1.0, 1.0], vec![1.0, 0.0, -1.0], vec![-1.0, 1.0, 0.0]];
    let seed = (0..).find(|&s| initial_pair(3, 3, s) == (0, 0)).unwrap();
    let out = run_grad(&exact_cfg(), &GameSetup::matrix(u.clone()), &EnumerationOracle, seed, None).unwrap();
    assert!(out.converged);
    assert!(out.reports.len() <= 4, "{} epochs", out.reports.len());
    let (rows, cols) = populations(&out.state);
    let sr = aggregate(&rows, out.state.sigma_agent.probs(), 3);
    let sc = aggregate(&cols, out.state.sigma_adversary.probs(), 3);
    assert!(exploitability(&u, &sr, &sc) <= 1e-6);
}

#[test]
fn structural_postconditions_hold_each_epoch() {
    let mut rng = rng_from_seed(2);
    let u = random_game(&mut rng, 5, 5);
    let setup = GameSetup::matrix(u);
    let cfg = exact_cfg();
    let mut state = init_state(&cfg, &setup, &EnumerationOracle, 9).unwrap();
    for k in 1..=4 {
        let (next, _) = grad_epoch(&state, &cfg, &setup, &EnumerationOracle).unwrap();
        assert_eq!(next.agents.len(), state.agents.len() + 1);
        assert_eq!(next.adversaries.len(), state.adversaries.len() + 1);
        assert_eq!((next.payoff.rows(), next.payoff.cols()), (k + 1, k + 1));
        for s in [&next.sigma_agent, &next.sigma_adversary] {
            assert!((s.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert_eq!(next.exploitability.len(), k);
        state = next;
    }
}

struct Failing;

impl BestResponseOracle for Failing {
    fn initial_agent(&self, setup: &GameSetup, rng: &mut Rng) -> Result<Policy> {
        EnumerationOracle.initial_agent(setup, rng)
    }
    fn initial_adversary(&self, setup: &GameSetup, rng: &mut Rng) -> Result<AdversaryAttachment> {
        EnumerationOracle.initial_adversary(setup, rng)
    }
    fn agent_response(
        &self,
        setup: &GameSetup,
        o: &[AdversaryAttachment],
        m: &MetaStrategy,
        b: &PerturbationBudget,
        w: Option<&Policy>,
        rng: &mut Rng,
    ) -> Result<BestResponse<Policy>> {
        EnumerationOracle.agent_response(setup, o, m, b, w, rng)
    }
    fn adversary_response(
        &self,
        _: &GameSetup,
        _: &[Policy],
        _: &MetaStrategy,
        _: &PerturbationBudget,
        _: Option<&AdversaryAttachment>,
        _: &mut Rng,
    ) -> Result<BestResponse<AdversaryAttachment>> {
        Err(Error::Diverged("forced".into()))
    }
}

#[test]
fn oracle_failure_leaves_state_unchanged() {
    let setup = GameSetup::matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let state = init_state(&exact_cfg(), &setup, &Failing, 1).unwrap();
    let before = serde_json::to_string(&state).unwrap();
    let err = grad_epoch(&state, &exact_cfg(), &setup, &Failing).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)));
    assert_eq!(serde_json::to_string(&state).unwrap(), before);
}

fn ppo_matrix_setup() -> (GameSetup, PpoOracle, EngineConfig) {
    let setup = GameSetup::matrix(vec![vec![1.0, -1.0, 0.5], vec![-0.5, 1.0, -1.0], vec![0.0, 0.25, -0.25]]);
    let oracle = PpoOracle {
        config: OracleConfig {
            iterations: 3,
            steps_per_iteration: 64,
            minibatch_size: 32,
            ..OracleConfig::matrix_game()
        },
    };
    let cfg = EngineConfig {
        max_epochs: 5,
        threshold: Threshold::Absolute { value: -1.0 },
        payoff_episodes: 4,
        ..EngineConfig::default()
    };
    (setup, oracle, cfg)
}

#[test]
fn checkpoint_round_trip_preserves_the_next_epoch() {
    let (setup, oracle, cfg) = ppo_matrix_setup();
    let dir = tempfile::tempdir().unwrap();
    let mut state = init_state(&cfg, &setup, &oracle, 4).unwrap();
    for _ in 0..2 {
        state = grad_epoch(&state, &cfg, &setup, &oracle).unwrap().0;
    }
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    let direct = grad_epoch(&state, &cfg, &setup, &oracle).unwrap().0;
    let via = grad_epoch(&loaded, &cfg, &setup, &oracle).unwrap().0;
    assert_eq!(serde_json::to_string(&direct).unwrap(), serde_json::to_string(&via).unwrap());

    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(json["format_version"], 1);
    assert_eq!(json["state"]["agents"].as_array().unwrap().len(), 3);
    assert_eq!(json["state"]["adversaries"].as_array().unwrap().len(), 3);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (setup, oracle, cfg) = ppo_matrix_setup();
    let dir = tempfile::tempdir().unwrap();
    let state = init_state(&cfg, &setup, &oracle, 4).unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut json: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    json["format_version"] = 99.into();
    std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn run_directory_layout() {
    let (setup, oracle, cfg) = ppo_matrix_setup();
    let cfg = EngineConfig { max_epochs: 2, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = run_grad(&cfg, &setup, &oracle, 8, Some(dir.path())).unwrap();
    assert!(!out.converged);
    for k in 0..=2 {
        assert!(checkpoint_path(dir.path(), k).exists());
    }
    for f in ["payoff.csv", "payoff.json", "exploitability.csv", "events.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let events = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 3);
    let csv = std::fs::read_to_string(dir.path().join("exploitability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn relative_threshold_uses_the_payoff_range() {
    let setup = GameSetup::matrix(vec![vec![2.0, -2.0], vec![-1.0, 1.0]]);
    let state = init_state(&EngineConfig::default(), &setup, &EnumerationOracle, 0).unwrap();
    assert!((state.threshold.unwrap() - 0.2).abs() < 1e-15);
}

#[test]
fn convergence_waits_for_the_full_budget() {
    let setup = GameSetup {
        env: EnvConfig::Pointmass {
            goal: [0.5, -0.5],
            wind: false,
            start: None,
        },
        adversary: grad_core::adversaries::AdversaryKind::Paad,
        budget: PerturbationBudget::state(0.1, 0.02).unwrap(),
        agent_hidden: vec![4],
        adversary_hidden: vec![4],
        normalize_obs: false,
        eval_mode: grad_core::mdp::ActMode::Mean,
    };
    let oracle = PpoOracle::new(OracleConfig {
        iterations: 1,
        steps_per_iteration: 100,
        minibatch_size: 50,
        epochs: 1,
        ..OracleConfig::default()
    });
    let cfg = EngineConfig {
        max_epochs: 6,
        threshold: Threshold::Absolute { value: 1e9 },
        payoff_episodes: 2,
        ..EngineConfig::default()
    };
    let out = run_grad(&cfg, &setup, &oracle, 1, None).unwrap();
    assert!(out.converged);
    // Warmup ends at epoch 3 of 6.
    assert_eq!(out.reports.len(), 3);
    assert!(out.reports[..2].iter().all(|r| !r.converged && r.budget_scale < 1.0));
}

#[test]
fn quarter_progress_halves_the_target() {
    let s = BudgetSchedule {
        target: PerturbationBudget::state(0.1, 0.02).unwrap(),
        warmup_fraction: 0.5,
        total_epochs: 8,
    };
    let b = s.active(2);
    assert!((b.epsilon - 0.05).abs() < 1e-15);
    assert!((b.epsilon_bar - 0.01).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_matches_closed_form(eps in 0.0..1.0f64, ratio in 0.0..3.0f64, warm in 0.05..1.0f64, total in 1usize..50, k in 0usize..60) {
        let target = PerturbationBudget::state(eps, ratio * eps).unwrap();
        let s = BudgetSchedule { target, warmup_fraction: warm, total_epochs: total };
        let f = ((k as f64 / total as f64) / warm).min(1.0);
        let b = s.active(k);
        prop_assert_eq!(b.epsilon, eps * f);
        prop_assert_eq!(b.epsilon_bar, ratio * eps * f);
        if k >= 1 {
            prop_assert!(s.scale(k) >= s.scale(k - 1));
        }
    }

    #[test]
    fn payoff_cells_are_zero_sum(seed in 0u64..200) {
        let mut rng = rng_from_seed(seed);
        let u = random_game(&mut rng, 3, 3);
        let out = run_grad(&exact_cfg(), &GameSetup::matrix(u.clone()), &EnumerationOracle, seed, None).unwrap();
        let (rows, cols) = populations(&out.state);
        let vals = out.state.payoff.values().unwrap();
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                prop_assert_eq!(vals[a][b], u[i][j]);
                prop_assert_eq!(out.state.payoff.adversary_value(a, b), -u[i][j]);
            }
        }
    }
}

#[test]
fn matrix_env_config_round_trips() {
    let setup = GameSetup::matrix(vec![vec![1.0]]);
    let s = serde_json::to_string(&setup).unwrap();
    let back: GameSetup = serde_json::from_str(&s).unwrap();
    assert_eq!(back, setup);
    assert!(matches!(back.env, EnvConfig::MatrixGame { .. }));
}

