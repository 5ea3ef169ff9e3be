//! TOML configuration: tool profiles, manifest, rules, per-category
//! generators and monitor settings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::classify::{Abstain, Classifier, FileManifest, ManifestEntry, ToolProfiles};
use crate::error::{Error, Result};
use crate::estimate::LEVELS;
use crate::monitor::{InterventionMode, DEFAULT_HORIZON};
use crate::rules::RuleCascade;
use crate::state::{DataExposure, ReversibilityPolicy, RiskLevel};
use crate::trace::{sha256_hex, Category, Labeler};

const DEFAULT_TOML: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    #[serde(default = "default_max_length")]
    pub max_length: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Additional seeds the shipped corpus statistics are checked against.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_max_length() -> usize {
    25
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSettings {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_fpr_budget")]
    pub fpr_budget: f64,
    #[serde(default)]
    pub mode: InterventionMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_fpr_budget() -> f64 {
    0.15
}

fn default_alpha() -> f64 {
    0.0
}

fn default_train_ratio() -> f64 {
    0.8
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            fpr_budget: default_fpr_budget(),
            mode: InterventionMode::default(),
            alpha: default_alpha(),
            train_ratio: default_train_ratio(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Sample risk levels from a generator matrix, then realize each
    /// transition with a concrete tool call.
    #[default]
    Level,
    /// Sample tool calls directly.
    Tool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedAction {
    pub tool: String,
    #[serde(default)]
    pub sensitivity: Option<DataExposure>,
    #[serde(default)]
    pub resource: Option<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryConfig {
    #[serde(default)]
    pub mode: SimMode,
    /// Per-step completion probability once a trace has two steps.
    pub completion: f64,
    #[serde(default)]
    pub generator: Option<Vec<[f64; LEVELS]>>,
    #[serde(default)]
    pub actions: Vec<WeightedAction>,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    policy: ReversibilityPolicy,
    #[serde(default = "default_model")]
    model: String,
    simulation: SimulationSettings,
    #[serde(default)]
    monitor: MonitorSettings,
    #[serde(default)]
    tools: Option<ToolProfiles>,
    #[serde(default)]
    manifest: Vec<ManifestEntry>,
    #[serde(default)]
    rules: Option<RuleCascade>,
    categories: BTreeMap<Category, CategoryConfig>,
}

fn default_model() -> String {
    "synthetic".into()
}

/// Everything the simulator needs for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub category: Category,
    pub mode: SimMode,
    pub generator: Option<Vec<[f64; LEVELS]>>,
    pub actions: Vec<WeightedAction>,
    pub completion: f64,
    pub max_length: usize,
    pub scenarios: Vec<Scenario>,
    pub model: String,
}

impl ScenarioConfig {
    /// Traces per scenario run of the default corpus.
    pub fn total_runs(&self) -> usize {
        self.scenarios.iter().map(|s| s.runs).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub policy: ReversibilityPolicy,
    pub model: String,
    pub simulation: SimulationSettings,
    pub monitor: MonitorSettings,
    pub tools: ToolProfiles,
    pub manifest: FileManifest,
    pub rules: RuleCascade,
    pub categories: BTreeMap<Category, CategoryConfig>,
    hash: String,
}

impl Config {
    /// The shipped default configuration.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_TOML).expect("built-in config is valid")
    }

    pub fn builtin_text() -> &'static str {
        DEFAULT_TOML
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let config = Config {
            policy: raw.policy,
            model: raw.model,
            simulation: raw.simulation,
            monitor: raw.monitor,
            tools: raw.tools.unwrap_or_default(),
            manifest: FileManifest::new(raw.manifest)?,
            rules: raw.rules.unwrap_or_default(),
            categories: raw.categories,
            hash: sha256_hex(text.as_bytes()),
        };
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the source text.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn validate(&self) -> Result<()> {
        self.tools.validate()?;
        self.rules.validate()?;
        if self.simulation.max_length < 2 {
            return Err(Error::InvalidConfig("simulation.max_length must be at least 2".into()));
        }
        let m = &self.monitor;
        if m.horizon == 0 {
            return Err(Error::InvalidConfig("monitor.horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&m.fpr_budget) {
            return Err(Error::InvalidConfig("monitor.fpr_budget must be in [0, 1]".into()));
        }
        if !(m.alpha >= 0.0 && m.alpha.is_finite()) {
            return Err(Error::InvalidConfig("monitor.alpha must be >= 0".into()));
        }
        if !(m.train_ratio > 0.0 && m.train_ratio < 1.0) {
            return Err(Error::InvalidConfig("monitor.train_ratio must be in (0, 1)".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::InvalidConfig("no categories configured".into()));
        }
        for (category, c) in &self.categories {
            self.validate_category(*category, c)?;
        }
        Ok(())
    }

    fn validate_category(&self, category: Category, c: &CategoryConfig) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidConfig(format!("categories.{category}: {msg}")));
        if !(c.completion > 0.0 && c.completion <= 1.0) {
            return err(format!("completion must be in (0, 1], got {}", c.completion));
        }
        match c.mode {
            SimMode::Level => {
                let Some(g) = &c.generator else {
                    return err("level mode needs a generator matrix".into());
                };
                validate_generator(g).or_else(err)?;
            }
            SimMode::Tool => {
                if c.actions.is_empty() {
                    return err("tool mode needs at least one action".into());
                }
                for a in &c.actions {
                    if !(a.weight >= 0.0 && a.weight.is_finite()) {
                        return err(format!("action `{}` has invalid weight {}", a.tool, a.weight));
                    }
                    if self.tools.get(&a.tool).is_none() {
                        return err(format!("action tool `{}` has no profile", a.tool));
                    }
                }
                if c.actions.iter().all(|a| a.weight == 0.0) {
                    return err("action weights sum to zero".into());
                }
            }
        }
        if c.scenarios.iter().any(|s| s.name.is_empty()) {
            return err("scenario with empty name".into());
        }
        Ok(())
    }

    pub fn classifier(&self) -> Classifier {
        Classifier::new(self.tools.clone(), self.manifest.clone(), Box::new(Abstain))
    }

    pub fn labeler(&self) -> Labeler {
        Labeler::new(self.classifier(), self.policy, &self.rules)
    }

    pub fn scenario(&self, category: Category) -> Result<ScenarioConfig> {
        let c = self
            .categories
            .get(&category)
            .ok_or_else(|| Error::InvalidConfig(format!("category `{category}` is not configured")))?;
        Ok(ScenarioConfig {
            category,
            mode: c.mode,
            generator: c.generator.clone(),
            actions: c.actions.clone(),
            completion: c.completion,
            max_length: self.simulation.max_length,
            scenarios: c.scenarios.clone(),
            model: format!(
                "{}-{}",
                self.model,
                match c.mode {
                    SimMode::Level => "level",
                    SimMode::Tool => "tool",
                }
            ),
        })
    }

    pub fn scenarios(&self) -> Result<Vec<ScenarioConfig>> {
        self.categories.keys().map(|c| self.scenario(*c)).collect()
    }
}

fn validate_generator(g: &[[f64; LEVELS]]) -> std::result::Result<(), String> {
    if g.len() != LEVELS {
        return Err(format!("generator needs {LEVELS} rows, got {}", g.len()));
    }
    for (i, row) in g.iter().enumerate() {
        let level = RiskLevel::ALL[i];
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("generator row {level} has an entry outside [0, 1]"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("generator row {level} sums to {sum}"));
        }
        // Levels can never drop under the merge, so backward mass is unrealizable.
        if row[..i].iter().any(|p| *p > 0.0) {
            return Err(format!("generator row {level} moves to a lower level"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_config_parses() {
        let c = Config::builtin();
        assert_eq!(c.categories.len(), 4);
        assert_eq!(c.simulation.max_length, 25);
        assert_eq!(c.monitor.horizon, 5);
        assert_eq!(c.monitor.fpr_budget, 0.15);
        assert_eq!(c.tools.len(), 6);
        assert_eq!(c.rules, RuleCascade::standard());
        for s in c.scenarios().unwrap() {
            assert_eq!(s.scenarios.len(), 10, "{}", s.category);
        }
        let total: usize = c.scenarios().unwrap().iter().map(|s| s.total_runs()).sum();
        assert_eq!(total, 357);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = Config::builtin_text().replace("[simulation]", "[simulation]\nbogus = 1");
        assert!(matches!(Config::from_toml_str(&text), Err(Error::InvalidConfig(_))));
    }

    fn minimal(category_body: &str) -> String {
        format!("[simulation]\n[categories.sysadmin]\n{category_body}\n")
    }

    #[test]
    fn rejects_bad_generators() {
        let downward = "completion = 0.1\ngenerator = [[1,0,0,0,0],[0.5,0.5,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]]";
        let err = Config::from_toml_str(&minimal(downward)).unwrap_err();
        assert!(err.to_string().contains("lower level"), "{err}");

        let unnormalized = "completion = 0.1\ngenerator = [[0.9,0,0,0,0],[0,1,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]]";
        assert!(Config::from_toml_str(&minimal(unnormalized)).is_err());

        let missing = "completion = 0.1";
        assert!(Config::from_toml_str(&minimal(missing)).is_err());

        let bad_q = "completion = 0.0\ngenerator = [[1,0,0,0,0],[0,1,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]]";
        assert!(Config::from_toml_str(&minimal(bad_q)).is_err());
    }

    #[test]
    fn tool_mode_requires_known_tools() {
        let body = "mode = \"tool\"\ncompletion = 0.1\nactions = [{ tool = \"teleport\", weight = 1.0 }]";
        let err = Config::from_toml_str(&minimal(body)).unwrap_err();
        assert!(err.to_string().contains("teleport"));
        let body = "mode = \"tool\"\ncompletion = 0.1\nactions = [{ tool = \"read_file\", weight = 1.0 }]";
        let c = Config::from_toml_str(&minimal(body)).unwrap();
        assert_eq!(c.scenario(Category::Sysadmin).unwrap().mode, SimMode::Tool);
        assert!(c.scenario(Category::DataHandling).is_err());
    }
}
