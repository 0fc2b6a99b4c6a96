//! Run configuration: JSON file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use grad_core::adversaries::AdversaryKind;
use grad_core::engine::EngineConfig;
use grad_core::eval::{DEFAULT_EVAL_EPISODES, DEFAULT_RESTARTS};
use grad_core::mdp::{ActMode, EnvConfig};
use grad_core::oracle::{GameSetup, OracleConfig};
use grad_core::perturb::PerturbationBudget;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainGrad,
    Attack,
    Eval,
    SolveMatrix,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainGrad => "train-grad",
            Command::Attack => "attack",
            Command::Eval => "eval",
            Command::SolveMatrix => "solve-matrix",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Ppo,
    /// Exact best responses; matrix games only.
    Enumeration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub restarts: usize,
    pub epsilon_grid: Vec<f64>,
    /// Empty means `[eps/10, eps/5, 2 eps]` of the configured budget.
    pub epsilon_bar_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EVAL_EPISODES,
            restarts: DEFAULT_RESTARTS,
            epsilon_grid: vec![0.0, 0.05, 0.1],
            epsilon_bar_grid: Vec::new(),
            alpha_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    /// Evaluation seeds for attack, eval and ablate.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Worker threads; null uses every available core.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_env")]
    pub env: EnvConfig,
    #[serde(default = "default_adversary")]
    pub adversary: AdversaryKind,
    #[serde(default = "default_budget")]
    pub budget: PerturbationBudget,
    #[serde(default = "default_hidden")]
    pub agent_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub adversary_hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub normalize_obs: bool,
    #[serde(default = "default_eval_mode")]
    pub eval_mode: ActMode,
    #[serde(default = "default_oracle_kind")]
    pub oracle_kind: OracleKind,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Full game for solve-matrix.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Agent to evaluate: a GRAD checkpoint (its meta-strategy mixture) or a
    /// single saved policy.
    #[serde(default)]
    pub agent: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_env() -> EnvConfig {
    EnvConfig::Pointmass {
        goal: [0.5, -0.5],
        wind: false,
        start: None,
    }
}

fn default_adversary() -> AdversaryKind {
    AdversaryKind::Paad
}

fn default_budget() -> PerturbationBudget {
    PerturbationBudget::state(0.1, 0.02).expect("valid default budget")
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_true() -> bool {
    true
}

fn default_eval_mode() -> ActMode {
    ActMode::Mean
}

fn default_oracle_kind() -> OracleKind {
    OracleKind::Ppo
}

/// Rejected configuration, with the offending key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Sets `path` (dot-separated) in `root` to `value`, creating objects on the
/// way. The value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(format!("override `{assignment}` is not key=value")))?;
    if path.is_empty() {
        return Err(err(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| err(format!("{}: not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*key).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one key")
}

/// Inputs from the command line, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Parses and validates a configuration. Returns the config and any
/// warnings (accepted but suspicious settings).
pub fn parse_config(file: Option<&Path>, ov: &Overrides) -> Result<(RunConfig, Vec<String>), ConfigError> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| err(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(err("config must be a JSON object"));
    }
    for s in &ov.set {
        apply_override(&mut root, s)?;
    }
    if let Some(c) = ov.command {
        root["command"] = serde_json::to_value(c).expect("command serializes");
    }
    if let Some(s) = ov.seed {
        root["seed"] = s.into();
    }
    if let Some(o) = &ov.out {
        root["out"] = o.to_string_lossy().into_owned().into();
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(&root).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            err(e.into_inner().to_string())
        } else {
            err(format!("{path}: {}", e.into_inner()))
        }
    })?;
    let warnings = cfg.finalize()?;
    Ok((cfg, warnings))
}

impl RunConfig {
    /// Resolves derived defaults and checks cross-field constraints.
    fn finalize(&mut self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();
        if self.out.is_none() {
            self.out = Some(PathBuf::from("runs").join(self.command.name()));
        }
        if self.eval.epsilon_bar_grid.is_empty() {
            let e = self.budget.epsilon;
            self.eval.epsilon_bar_grid = vec![e / 10.0, e / 5.0, 2.0 * e];
        }
        if self.budget.epsilon_bar > self.budget.epsilon {
            warnings.push(format!(
                "budget.epsilon_bar ({}) exceeds budget.epsilon ({}); allowed, but the coupling only binds below 2 epsilon",
                self.budget.epsilon_bar, self.budget.epsilon
            ));
        }
        self.oracle.validate().map_err(|e| err(format!("oracle: {e}")))?;
        self.engine.validate().map_err(|e| err(format!("engine: {e}")))?;
        if self.seeds.is_empty() {
            return Err(err("seeds: at least one seed is required"));
        }
        if self.threads == Some(0) {
            return Err(err("threads: must be positive"));
        }
        if self.eval.episodes == 0 || self.eval.restarts == 0 {
            return Err(err("eval: episodes and restarts must be positive"));
        }
        for (name, grid) in [("eval.epsilon_grid", &self.eval.epsilon_grid), ("eval.epsilon_bar_grid", &self.eval.epsilon_bar_grid)] {
            if grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(err(format!("{name}: values must be finite and non-negative")));
            }
        }
        if self.eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(err("eval.alpha_grid: values must lie in [0, 1]"));
        }
        match self.command {
            Command::SolveMatrix => {
                if self.matrix.is_none() {
                    if let EnvConfig::MatrixGame { payoff } = &self.env {
                        self.matrix = Some(payoff.clone());
                    } else {
                        return Err(err("matrix: solve-matrix needs a payoff matrix"));
                    }
                }
            }
            Command::Attack | Command::Eval | Command::Ablate => match &self.agent {
                None => return Err(err(format!("agent: {} needs an agent checkpoint", self.command.name()))),
                Some(p) if !p.is_file() => return Err(err(format!("agent: no such file {}", p.display()))),
                Some(_) => {}
            },
            Command::TrainGrad => {
                if self.oracle_kind == OracleKind::Enumeration && !matches!(self.env, EnvConfig::MatrixGame { .. }) {
                    return Err(err("oracle_kind: enumeration needs a matrix_game env"));
                }
            }
        }
        if let EnvConfig::MatrixGame { payoff } = &self.env {
            grad_core::mdp::make_matrix_game_env(payoff.clone()).map_err(|e| err(format!("env: {e}")))?;
            // The column player is the adversary; there is nothing to perturb.
            self.adversary = AdversaryKind::Opponent;
            self.budget = PerturbationBudget::zero();
        }
        Ok(warnings)
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("finalized config has an output directory")
    }

    pub fn game_setup(&self) -> GameSetup {
        GameSetup {
            env: self.env.clone(),
            adversary: self.adversary,
            budget: self.budget,
            agent_hidden: self.agent_hidden.clone(),
            adversary_hidden: self.adversary_hidden.clone(),
            normalize_obs: self.normalize_obs,
            eval_mode: self.eval_mode,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
