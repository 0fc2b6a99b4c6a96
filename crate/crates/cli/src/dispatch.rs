//! Runs a validated configuration and writes its artifacts.

use std::path::Path;

use anyhow::{Context, Result};
use grad_core::adversaries::AdversaryAttachment;
use grad_core::engine::{load_checkpoint, run_grad};
use grad_core::eval::{attack_grid, epsilon_bar_ablation, epsilon_sweep, model_uncertainty_sweep, AgentMix, AttackConfig, CellSpec, EvalReport};
use grad_core::mdp::Policy;
use grad_core::meta_game::{solve_zero_sum, DEFAULT_SOLVER_TOL};
use grad_core::oracle::{BestResponseOracle, EnumerationOracle, PpoOracle};
use serde_json::json;

use crate::config::{Command, OracleKind, RunConfig};

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    ConfigError = 2,
    RuntimeError = 3,
    NotConverged = 4,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Loads the agent to evaluate: the meta-strategy mixture of a GRAD
/// checkpoint, or a single saved policy.
pub fn load_agent(path: &Path) -> Result<AgentMix> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let is_state = serde_json::from_slice::<serde_json::Value>(&bytes)
        .map(|v| v.get("state").is_some())
        .unwrap_or(false);
    if is_state {
        let state = load_checkpoint(path)?;
        Ok(AgentMix::new(state.agents, state.sigma_agent)?)
    } else {
        Ok(AgentMix::single(Policy::load(path)?))
    }
}

fn attack_config(cfg: &RunConfig) -> AttackConfig {
    AttackConfig {
        oracle: cfg.oracle.clone(),
        adversary_hidden: cfg.adversary_hidden.clone(),
        normalize_obs: cfg.normalize_obs,
        restarts: cfg.eval.restarts,
        eval_episodes: cfg.eval.episodes,
        eval_mode: cfg.eval_mode,
    }
}

fn print_summary(label: &str, report: &EvalReport) {
    for c in report.summary() {
        println!("{label} {}: median {:.4} mean {:.4} std {:.4} ({} seeds, {} failed)", c.cell, c.median, c.mean, c.std, c.seeds, c.failed);
    }
}

/// Executes `cfg`. The configuration echo is written first so that every run
/// directory records its inputs.
pub fn dispatch(cfg: &RunConfig) -> Result<Exit> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .context("building the worker pool")?;
    pool.install(|| run(cfg, out))
}

fn run(cfg: &RunConfig, out: &Path) -> Result<Exit> {
    match cfg.command {
        Command::SolveMatrix => {
            let u = cfg.matrix.as_ref().expect("finalized solve-matrix config has a matrix");
            let sol = solve_zero_sum(u, DEFAULT_SOLVER_TOL)?;
            println!("value: {}", fmt_num(sol.value));
            println!("row strategy: {}", fmt_vec(sol.sigma_row.probs()));
            println!("column strategy: {}", fmt_vec(sol.sigma_col.probs()));
            std::fs::write(out.join("solution.json"), serde_json::to_string_pretty(&sol)? + "\n")?;
            Ok(Exit::Success)
        }
        Command::TrainGrad => {
            let setup = cfg.game_setup();
            let oracle: Box<dyn BestResponseOracle> = match cfg.oracle_kind {
                OracleKind::Ppo => Box::new(PpoOracle {
                    config: cfg.oracle.clone(),
                }),
                OracleKind::Enumeration => Box::new(EnumerationOracle),
            };
            let res = run_grad(&cfg.engine, &setup, oracle.as_ref(), cfg.seed, Some(out))?;
            let st = &res.state;
            let summary = json!({
                "converged": res.converged,
                "epochs": st.epoch,
                "threshold": st.threshold,
                "exploitability": st.exploitability,
                "sigma_agent": st.sigma_agent,
                "sigma_adversary": st.sigma_adversary,
                "checkpoint": format!("state-epoch-{}.ckpt", st.epoch),
            });
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!(
                "{} after {} epochs; last exploitability estimate {}",
                if res.converged { "converged" } else { "not converged" },
                st.epoch,
                st.exploitability.last().map_or("n/a".into(), |e| fmt_num(*e))
            );
            Ok(if res.converged { Exit::Success } else { Exit::NotConverged })
        }
        Command::Attack => {
            let agent = load_agent(cfg.agent.as_deref().expect("validated"))?;
            let cell = CellSpec {
                kind: cfg.adversary,
                budget: cfg.budget,
                replicate: 0,
            };
            check_kind(cfg)?;
            let report = attack_grid(&agent, &cfg.env, &[cell], &attack_config(cfg), &cfg.seeds)?;
            report.write(out, "attack")?;
            print_summary("attack", &report);
            Ok(Exit::Success)
        }
        Command::Eval => {
            let agent = load_agent(cfg.agent.as_deref().expect("validated"))?;
            check_kind(cfg)?;
            let ratio = if cfg.budget.epsilon > 0.0 { cfg.budget.epsilon_bar / cfg.budget.epsilon } else { 0.0 };
            let attacks = epsilon_sweep(&agent, &cfg.env, cfg.adversary, &cfg.budget, &cfg.eval.epsilon_grid, ratio, &attack_config(cfg), &cfg.seeds)?;
            attacks.write(out, "eval-attacks")?;
            print_summary("eval", &attacks);
            if !cfg.eval.alpha_grid.is_empty() {
                let mu = model_uncertainty_sweep(&agent, &cfg.env, &cfg.eval.alpha_grid, cfg.eval.episodes, &cfg.seeds, cfg.eval_mode)?;
                mu.write(out, "eval-model-uncertainty")?;
                print_summary("model-uncertainty", &mu);
            }
            Ok(Exit::Success)
        }
        Command::Ablate => {
            let agent = load_agent(cfg.agent.as_deref().expect("validated"))?;
            check_kind(cfg)?;
            let report = epsilon_bar_ablation(
                &agent,
                &cfg.env,
                cfg.adversary,
                cfg.budget.epsilon,
                &cfg.eval.epsilon_bar_grid,
                cfg.budget.norm,
                cfg.budget.domain,
                &attack_config(cfg),
                &cfg.seeds,
            )?;
            report.write(out, "ablate")?;
            print_summary("ablate", &report);
            Ok(Exit::Success)
        }
    }
}

/// Builds one attachment up front so that a kind/budget mismatch fails the
/// run instead of being recorded as failed cells.
fn check_kind(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.env.spec()?;
    AdversaryAttachment::new(
        cfg.adversary,
        &spec,
        cfg.env.opponent_moves()?,
        cfg.budget,
        &cfg.adversary_hidden,
        cfg.normalize_obs,
        &mut grad_core::rng::rng_from_seed(0),
    )?;
    Ok(())
}

fn fmt_num(x: f64) -> String {
    let r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn fmt_vec(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", "))
}
