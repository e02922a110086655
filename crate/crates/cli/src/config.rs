use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use formbench_core::backend::BackendConfig;
use formbench_core::dialogue::{TerminationPolicy, DEFAULT_MAX_ROUNDS};
use formbench_core::{StrategyConfig, TaskKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub data: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    #[serde(default)]
    pub solver: Option<String>,
    #[serde(default)]
    pub selector: Option<String>,
    /// Backend names in speaking order; the first agent opens the dialogue.
    #[serde(default)]
    pub agents: Vec<String>,
    #[serde(default)]
    pub agent_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    #[default]
    Random,
    Supporting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: i64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub policy: TerminationPolicy,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub split: SplitRule,
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

fn default_runs() -> usize {
    3
}

fn default_max_rounds() -> usize {
    DEFAULT_MAX_ROUNDS
}

fn default_tokenizer() -> String {
    "whitespace".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

pub const DEFAULT_CONCURRENCY: usize = 4;

/// A configuration problem, with the file, the offending key and (when it
/// can be found) the line it sits on.
#[derive(Debug)]
pub struct ConfigInvalid {
    pub path: PathBuf,
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config {}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if !self.key.is_empty() {
            write!(f, " [{}]", self.key)?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigInvalid {}

/// Command-line overrides; flags win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<i64>,
    pub runs: Option<usize>,
    pub out: Option<PathBuf>,
    pub backend_urls: Vec<(String, String)>,
    pub tokenizer: Option<String>,
    pub baseline: Option<PathBuf>,
    pub max_rounds: Option<usize>,
    pub policy: Option<TerminationPolicy>,
}

/// Which command the config is loaded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Reason,
    Dialogue,
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(leaf) && l[leaf.len()..].trim_start().starts_with('=')
                || l.starts_with('[') && l.contains(leaf)
        })
        .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides, purpose: Purpose) -> Result<Self, ConfigInvalid> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigInvalid {
            path: path.to_path_buf(),
            key: String::new(),
            line: None,
            message: e.to_string(),
        })?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigInvalid {
            path: path.to_path_buf(),
            key: String::new(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.apply(overrides).and_then(|_| config.check(purpose)).map_err(|(key, message)| ConfigInvalid {
            path: path.to_path_buf(),
            line: line_of(&text, &key),
            key,
            message,
        })?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.task.data);
        for backend in self.backends.values_mut() {
            if let Some(source) = backend.source.as_mut() {
                join(source);
            }
        }
        if let Some(b) = self.baseline.as_mut() {
            join(b);
        }
        if let Some(p) = self.prompts_dir.as_mut() {
            join(p);
        }
        if let Some(id) = self.tokenizer.strip_prefix("bpe:") {
            let p = Path::new(id);
            if p.is_relative() {
                self.tokenizer = format!("bpe:{}", base.join(p).display());
            }
        }
    }

    fn apply(&mut self, o: &Overrides) -> Result<(), (String, String)> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(runs) = o.runs {
            self.runs = runs;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        for (name, url) in &o.backend_urls {
            let backend = self
                .backends
                .get_mut(name)
                .ok_or_else(|| (format!("backends.{name}"), format!("--backend names unknown backend `{name}`")))?;
            backend.endpoint_url = Some(url.clone());
        }
        if let Some(t) = &o.tokenizer {
            self.tokenizer = t.clone();
        }
        if let Some(b) = &o.baseline {
            self.baseline = Some(b.clone());
        }
        if let Some(m) = o.max_rounds {
            self.max_rounds = m;
        }
        if let Some(p) = o.policy {
            self.policy = p;
        }
        Ok(())
    }

    fn backend_ref(&self, key: &str, name: &str) -> Result<(), (String, String)> {
        if self.backends.contains_key(name) {
            Ok(())
        } else {
            Err((key.to_string(), format!("backend `{name}` is not defined under [backends]")))
        }
    }

    fn check(&self, purpose: Purpose) -> Result<(), (String, String)> {
        let err = |key: &str, msg: String| Err((key.to_string(), msg));
        if self.runs == 0 {
            return err("runs", "must be positive".into());
        }
        if self.max_rounds == 0 {
            return err("max_rounds", "must be positive".into());
        }
        if self.concurrency == Some(0) {
            return err("concurrency", "must be positive".into());
        }
        self.strategy.validate().map_err(|e| ("strategy".to_string(), e.to_string()))?;
        for (name, backend) in &self.backends {
            backend.validate().map_err(|e| (format!("backends.{name}"), e.to_string()))?;
        }
        let strategy = self.strategy.strategy;
        match purpose {
            Purpose::Reason => {
                if strategy.is_dialogue() {
                    return err("strategy.strategy", format!("{strategy} is a dialogue strategy; use run-dialogue"));
                }
                let solver = self.roles.solver.as_deref().ok_or(("roles.solver".to_string(), "a solver backend is required".to_string()))?;
                self.backend_ref("roles.solver", solver)?;
                if strategy.is_two_step() {
                    let selector = self
                        .roles
                        .selector
                        .as_deref()
                        .ok_or(("roles.selector".to_string(), format!("{strategy} requires a selector backend")))?;
                    self.backend_ref("roles.selector", selector)?;
                }
            }
            Purpose::Dialogue => {
                if !strategy.is_dialogue() {
                    return err("strategy.strategy", format!("{strategy} is not a dialogue strategy; use run-reason"));
                }
                if !self.task.kind.is_dialogue() {
                    return err("task.kind", format!("{} is not a dialogue task", self.task.kind));
                }
                if self.roles.agents.len() < 2 {
                    return err("roles.agents", format!("dialogue needs at least two agents, got {}", self.roles.agents.len()));
                }
                for name in &self.roles.agents {
                    self.backend_ref("roles.agents", name)?;
                }
                if !self.roles.agent_names.is_empty() && self.roles.agent_names.len() != self.roles.agents.len() {
                    return err("roles.agent_names", "must list one name per agent".into());
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = self.agent_names().into_iter().find(|n| !seen.insert(n.clone())) {
                    return err("roles.agent_names", format!("name `{dup}` used twice"));
                }
            }
        }
        Ok(())
    }

    pub fn agent_names(&self) -> Vec<String> {
        if self.roles.agent_names.is_empty() {
            (1..=self.roles.agents.len()).map(|k| format!("Agent{k}")).collect()
        } else {
            self.roles.agent_names.clone()
        }
    }

    /// Names of every backend the command will call.
    pub fn bound_backends(&self, purpose: Purpose) -> Vec<&str> {
        match purpose {
            Purpose::Reason => self.roles.solver.iter().chain(self.roles.selector.iter().filter(|_| self.strategy.strategy.is_two_step())).map(String::as_str).collect(),
            Purpose::Dialogue => self.roles.agents.iter().map(String::as_str).collect(),
        }
    }

    /// Worker count: configured (default 4), but 1 whenever a bound backend
    /// answers by call order.
    pub fn workers(&self, purpose: Purpose) -> usize {
        let ordinal = self.bound_backends(purpose).iter().any(|n| self.backends[*n].is_ordinal());
        if ordinal {
            1
        } else {
            self.concurrency.unwrap_or(DEFAULT_CONCURRENCY)
        }
    }
}
