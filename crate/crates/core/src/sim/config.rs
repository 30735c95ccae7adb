//! Simulation configuration: the JSON file format, defaults, and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::DEFAULT_HISTORY_BUDGET;
use crate::llm::{DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE};
use crate::mapek::{builtin_template, AgentConfig, DEFAULT_CONTEXT_BUDGET};
use crate::model::{AgentId, Role};

pub const DEFAULT_MODEL: &str = "gpt-4";
pub const DEFAULT_REPLY: &str = "NOOP";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<FieldError>),
}

impl ConfigError {
    pub fn field_errors(&self) -> &[FieldError] {
        match self {
            ConfigError::Validation(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run_id: Option<String>,
    rounds: i64,
    seed: Option<u64>,
    model: Option<String>,
    temperature: Option<f64>,
    max_output_tokens: Option<i64>,
    history_budget: Option<i64>,
    context_budget: Option<i64>,
    backend: RawBackend,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    templates: BTreeMap<String, String>,
    agents: Vec<RawAgent>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawBackend {
    Live,
    Scripted { script: String, default_reply: Option<String> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    id: String,
    role: String,
    model: Option<String>,
    temperature: Option<f64>,
    template: Option<String>,
    api_base: Option<String>,
    api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Live,
    Scripted {
        /// As written in the config file.
        script: String,
        default_reply: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub role: Role,
    pub model: String,
    pub temperature: f64,
    pub template: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_base: Option<String>,
    /// Name of the environment variable holding this agent's API key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

/// Fully resolved configuration. Every default is explicit, so the
/// serialized form is a complete description of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub run_id: String,
    pub rounds: u32,
    pub seed: u64,
    pub max_output_tokens: u32,
    pub history_budget: usize,
    pub context_budget: usize,
    pub backend: BackendConfig,
    pub templates: BTreeMap<String, String>,
    pub agents: Vec<AgentSpec>,
    /// Where run artifacts go. Not part of the transcript echo.
    #[serde(skip)]
    pub output_dir: PathBuf,
    /// Directory relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SimConfig {
    pub fn from_json(json: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(json)?;
        resolve(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn script_path(&self) -> Option<PathBuf> {
        match &self.backend {
            BackendConfig::Scripted { script, .. } => Some(self.base_dir.join(script)),
            BackendConfig::Live => None,
        }
    }

    pub fn template_text(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str).or_else(|| builtin_template(id))
    }

    pub fn agent_config(&self, spec: &AgentSpec) -> AgentConfig {
        AgentConfig {
            model: spec.model.clone(),
            temperature: spec.temperature,
            max_output_tokens: self.max_output_tokens,
            history_budget: self.history_budget,
            context_budget: self.context_budget,
        }
    }

    /// Agents in canonical (id) order.
    pub fn sorted_agents(&self) -> Vec<&AgentSpec> {
        let mut v: Vec<_> = self.agents.iter().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn resolve(raw: RawConfig, base_dir: &Path) -> Result<SimConfig, ConfigError> {
    let mut errors = Vec::new();
    let mut err = |field: &str, message: String| errors.push(FieldError { field: field.into(), message });

    let rounds = match u32::try_from(raw.rounds) {
        Ok(r) if r >= 1 => r,
        _ => {
            err("rounds", format!("must be an integer >= 1, got {}", raw.rounds));
            1
        }
    };
    let positive = |v: Option<i64>, default: usize, field: &str, err: &mut dyn FnMut(&str, String)| -> usize {
        match v {
            None => default,
            Some(x) if x >= 1 => x as usize,
            Some(x) => {
                err(field, format!("must be >= 1, got {x}"));
                default
            }
        }
    };
    let max_output_tokens = positive(raw.max_output_tokens, DEFAULT_MAX_OUTPUT_TOKENS as usize, "max_output_tokens", &mut err);
    let history_budget = positive(raw.history_budget, DEFAULT_HISTORY_BUDGET, "history_budget", &mut err);
    let context_budget = positive(raw.context_budget, DEFAULT_CONTEXT_BUDGET, "context_budget", &mut err);
    let max_output_tokens = u32::try_from(max_output_tokens).unwrap_or_else(|_| {
        err("max_output_tokens", "too large".into());
        DEFAULT_MAX_OUTPUT_TOKENS
    });

    let model = raw.model.unwrap_or_else(|| DEFAULT_MODEL.to_string());
    if model.trim().is_empty() {
        err("model", "must not be empty".into());
    }
    let temperature = raw.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    if !(0.0..=2.0).contains(&temperature) {
        err("temperature", format!("must be within [0, 2], got {temperature}"));
    }

    let backend = match raw.backend {
        RawBackend::Live => BackendConfig::Live,
        RawBackend::Scripted { script, default_reply } => {
            if script.trim().is_empty() {
                err("backend.script", "must name a script file".into());
            }
            BackendConfig::Scripted { script, default_reply: default_reply.unwrap_or_else(|| DEFAULT_REPLY.into()) }
        }
    };

    for (name, text) in &raw.templates {
        if text.trim().is_empty() {
            err(&format!("templates.{name}"), "template text is empty".into());
        }
    }

    let mut agents = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, a) in raw.agents.into_iter().enumerate() {
        let field = |f: &str| format!("agents[{i}].{f}");
        let id = match AgentId::new(a.id.clone()) {
            Ok(id) => id,
            Err(e) => {
                err(&field("id"), e.to_string());
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            err(&field("id"), format!("duplicate agent id {id}"));
        }
        let role: Role = match a.role.parse() {
            Ok(r) => r,
            Err(e) => {
                err(&field("role"), format!("{e}; expected \"seller\" or \"buyer\""));
                continue;
            }
        };
        let temperature = a.temperature.unwrap_or(temperature);
        if !(0.0..=2.0).contains(&temperature) {
            err(&field("temperature"), format!("must be within [0, 2], got {temperature}"));
        }
        let template = a.template.unwrap_or_else(|| role.as_str().to_string());
        if !raw.templates.contains_key(&template) && builtin_template(&template).is_none() {
            err(&field("template"), format!("unknown template {template:?}"));
        }
        if let Some(var) = &a.api_key_env {
            if var.trim().is_empty() {
                err(&field("api_key_env"), "must name an environment variable".into());
            }
        }
        agents.push(AgentSpec {
            id,
            role,
            model: a.model.unwrap_or_else(|| model.clone()),
            temperature,
            template,
            api_base: a.api_base,
            api_key_env: a.api_key_env,
        });
    }
    if !agents.iter().any(|a| a.role == Role::Seller) {
        err("agents", "at least one seller is required".into());
    }
    if !agents.iter().any(|a| a.role == Role::Buyer) {
        err("agents", "at least one buyer is required".into());
    }

    let seed = raw.seed.unwrap_or(0);
    let run_id = raw.run_id.unwrap_or_else(|| format!("run-{seed}"));
    if run_id.trim().is_empty() {
        err("run_id", "must not be empty".into());
    }

    if !errors.is_empty() {
        return Err(ConfigError::Validation(errors));
    }
    let output_dir = match raw.output_dir {
        Some(p) if p.is_absolute() => p,
        Some(p) => base_dir.join(p),
        None => base_dir.join("runs").join(&run_id),
    };
    Ok(SimConfig {
        run_id,
        rounds,
        seed,
        max_output_tokens,
        history_budget,
        context_budget,
        backend,
        templates: raw.templates,
        agents,
        output_dir,
        base_dir: base_dir.to_path_buf(),
    })
}
