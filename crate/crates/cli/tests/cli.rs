use std::path::Path;
use std::process::Command as Proc;

use grad_cli::{parse_config, Command, Overrides};
use grad_core::mdp::ActMode;
use grad_core::oracle::GameSetup;
use grad_core::rng::rng_from_seed;

fn grad(args: &[&str]) -> (i32, String, String) {
    let out = Proc::new(env!("CARGO_BIN_EXE_grad")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const RPS: &str = "[[0,-1,1],[1,0,-1],[-1,1,0]]";

#[test]
fn minimal_solve_matrix_config_materializes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", &format!(r#"{{"command": "solve-matrix", "matrix": {RPS}}}"#));
    let (cfg, warnings) = parse_config(Some(Path::new(&path)), &Overrides::default()).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg.command, Command::SolveMatrix);
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(cfg.engine.max_epochs, 30);
    assert_eq!(cfg.oracle.clip, 0.2);
    assert_eq!(cfg.eval.epsilon_bar_grid.len(), 3);
    assert_eq!(cfg.eval_mode, ActMode::Mean);
    assert!(cfg.out.is_some());
}

#[test]
fn coupling_wider_than_the_ball_is_a_warning() {
    let ov = Overrides {
        command: Some(Command::SolveMatrix),
        set: vec![format!("matrix={RPS}"), r#"budget={"epsilon":0.1,"epsilon_bar":0.3}"#.into()],
        ..Overrides::default()
    };
    let (cfg, warnings) = parse_config(None, &ov).unwrap();
    assert_eq!(cfg.budget.epsilon_bar, 0.3);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("epsilon_bar"));
}

#[test]
fn negative_epsilon_and_unknown_keys_are_rejected_with_paths() {
    let base = |set: &str| Overrides {
        command: Some(Command::TrainGrad),
        set: vec![set.into()],
        ..Overrides::default()
    };
    let e = parse_config(None, &base(r#"budget={"epsilon":-0.1,"epsilon_bar":0.0}"#)).unwrap_err();
    assert!(e.0.starts_with("budget"), "{e}");
    let e = parse_config(None, &base("oracle.learning_rte=0.1")).unwrap_err();
    assert!(e.0.starts_with("oracle.learning_rte"), "{e}");
    let e = parse_config(None, &base("oracle.clip=\"wide\"")).unwrap_err();
    assert!(e.0.starts_with("oracle.clip"), "{e}");
}

#[test]
fn flags_take_precedence_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", r#"{"command": "train-grad", "seed": 3, "engine": {"max_epochs": 7}}"#);
    let ov = Overrides {
        seed: Some(9),
        set: vec!["engine.max_epochs=2".into()],
        ..Overrides::default()
    };
    let (cfg, _) = parse_config(Some(Path::new(&path)), &ov).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.engine.max_epochs, 2);
}

#[test]
fn echoed_config_round_trips() {
    let ov = Overrides {
        command: Some(Command::TrainGrad),
        set: vec!["engine.max_epochs=4".into(), "oracle.ent_coef=0.02".into()],
        ..Overrides::default()
    };
    let (cfg, _) = parse_config(None, &ov).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "config.json", &cfg.to_json());
    let (again, _) = parse_config(Some(Path::new(&path)), &Overrides::default()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn solve_matrix_on_rps_prints_the_uniform_equilibrium() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, stdout, _) = grad(&["solve-matrix", "--set", &format!("matrix={RPS}"), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("value: 0\n"), "{stdout}");
    assert!(stdout.contains("[0.333333333, 0.333333333, 0.333333333]"));
    assert!(out.join("solution.json").exists());
    assert!(out.join("config.json").exists());
}

#[test]
fn single_epoch_without_convergence_exits_non_converged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, stdout, _) = grad(&[
        "train-grad",
        "--set",
        &format!(r#"env={{"name":"matrix_game","payoff":{RPS}}}"#),
        "--set",
        "oracle_kind=enumeration",
        "--set",
        "engine.max_epochs=1",
        "--set",
        r#"engine.threshold={"kind":"absolute","value":1e-9}"#,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 4, "{stdout}");
    assert!(out.join("state-epoch-1.ckpt").exists());
}

#[test]
fn missing_agent_checkpoint_is_a_config_error() {
    let (code, _, stderr) = grad(&["eval", "--set", "agent=/nonexistent/agent.json"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("agent"), "{stderr}");
    let (code, _, _) = grad(&["attack"]);
    assert_eq!(code, 2);
}

#[test]
fn runtime_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let (code, _, _) = grad(&["solve-matrix", "--set", &format!("matrix={RPS}"), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code, 3);
}

fn train_args(out: &Path) -> Vec<String> {
    [
        "train-grad",
        "--seed",
        "5",
        "--set",
        r#"env={"name":"matrix_game","payoff":[[1,-1,0.5],[-0.5,1,-1],[0,0.25,-0.25]]}"#,
        "--set",
        "agent_hidden=[]",
        "--set",
        r#"oracle={"iterations":3,"steps_per_iteration":64,"minibatch_size":32,"epochs":2,"learning_rate":0.05}"#,
        "--set",
        "engine.max_epochs=2",
        "--set",
        "engine.payoff_episodes=8",
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn repeated_runs_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let args = train_args(o);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, _, stderr) = grad(&args);
        assert!(code == 0 || code == 4, "{stderr}");
    }
    for f in ["payoff.csv", "exploitability.csv", "events.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn attack_on_a_saved_policy_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let setup = GameSetup {
        env: grad_core::mdp::EnvConfig::Pointmass {
            goal: [0.5, -0.5],
            wind: false,
            start: None,
        },
        adversary: grad_core::adversaries::AdversaryKind::Paad,
        budget: grad_core::perturb::PerturbationBudget::state(0.1, 0.02).unwrap(),
        agent_hidden: vec![8],
        adversary_hidden: vec![8],
        normalize_obs: false,
        eval_mode: ActMode::Mean,
    };
    let policy = setup.new_agent(&mut rng_from_seed(1)).unwrap();
    let agent = dir.path().join("agent.json");
    policy.save(&agent).unwrap();
    let out = dir.path().join("o");
    let (code, stdout, stderr) = grad(&[
        "attack",
        "--set",
        &format!("agent={}", agent.display()),
        "--set",
        "seeds=[1,2]",
        "--set",
        "adversary_hidden=[8]",
        "--set",
        r#"oracle={"iterations":1,"steps_per_iteration":100,"minibatch_size":50,"epochs":1}"#,
        "--set",
        "eval.episodes=3",
        "--set",
        "eval.restarts=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("natural"));
    let csv = std::fs::read_to_string(out.join("attack.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("attack-summary.json").exists());
}
