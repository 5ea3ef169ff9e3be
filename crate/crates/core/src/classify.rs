//! Maps observed tool calls to [`StateDelta`]s.
//!
//! Resolution order for an action:
//! 1. exact tool-name lookup in [`ToolProfiles`];
//! 2. otherwise the configured [`Judge`];
//! 3. otherwise [`Error::UnclassifiableAction`].
//!
//! Data sensitivity comes from the action's explicit tag, then the
//! [`FileManifest`] entry for its resource, then the profile default.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DataExposure, Reversibility, StateDelta, ToolEscalation};

/// One observed agent action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    #[serde(default)]
    pub step_index: u64,
    pub tool: String,
    #[serde(default)]
    pub sensitivity: Option<DataExposure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub args_digest: String,
}

impl ActionRecord {
    pub fn new(step_index: u64, tool: impl Into<String>) -> Self {
        Self {
            step_index,
            tool: tool.into(),
            sensitivity: None,
            resource: None,
            args_digest: String::new(),
        }
    }

    pub fn with_sensitivity(mut self, sensitivity: DataExposure) -> Self {
        self.sensitivity = Some(sensitivity);
        self
    }

    pub fn with_resource(mut self, resource: impl Into<String>) -> Self {
        self.resource = Some(resource.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRiskProfile {
    pub escalation: ToolEscalation,
    pub reversibility: Reversibility,
    #[serde(default = "default_data")]
    pub default_data: DataExposure,
}

fn default_data() -> DataExposure {
    DataExposure::None
}

impl ToolRiskProfile {
    pub const fn new(escalation: ToolEscalation, reversibility: Reversibility) -> Self {
        Self {
            escalation,
            reversibility,
            default_data: DataExposure::None,
        }
    }

    pub fn delta(&self, sensitivity: Option<DataExposure>) -> StateDelta {
        StateDelta::new(
            sensitivity.unwrap_or(self.default_data),
            self.escalation,
            self.reversibility,
        )
    }
}

/// Tool name → risk profile. Lookup is exact on the name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolProfiles(BTreeMap<String, ToolRiskProfile>);

impl Default for ToolProfiles {
    fn default() -> Self {
        Self::standard()
    }
}

impl ToolProfiles {
    pub fn standard() -> Self {
        use Reversibility::*;
        use ToolEscalation::*;
        let entries = [
            ("read_file", ReadOnly, FullyReversible),
            ("write_file", FileWrite, Partially),
            ("run_command", CodeExec, Partially),
            ("send_email", Network, Irreversible),
            ("http_request", Network, Partially),
            ("search_db", ReadOnly, FullyReversible),
        ];
        ToolProfiles(
            entries
                .into_iter()
                .map(|(name, t, r)| (name.to_string(), ToolRiskProfile::new(t, r)))
                .collect(),
        )
    }

    pub fn empty() -> Self {
        ToolProfiles(BTreeMap::new())
    }

    pub fn insert(&mut self, tool: impl Into<String>, profile: ToolRiskProfile) {
        self.0.insert(tool.into(), profile);
    }

    pub fn get(&self, tool: &str) -> Option<&ToolRiskProfile> {
        self.0.get(tool)
    }

    /// Profiles in tool-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ToolRiskProfile)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(name) = self.0.keys().find(|k| k.is_empty()) {
            return Err(Error::InvalidConfig(format!("empty tool name `{name}`")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pattern: String,
    pub sensitivity: DataExposure,
}

/// Resource path → sensitivity. Exact entries take precedence over glob
/// patterns; within each group the first listed entry wins.
#[derive(Debug, Clone, Default)]
pub struct FileManifest {
    entries: Vec<ManifestEntry>,
    patterns: Vec<Option<glob::Pattern>>,
}

impl FileManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let patterns = entries
            .iter()
            .map(|e| {
                if is_glob(&e.pattern) {
                    glob::Pattern::new(&e.pattern)
                        .map(Some)
                        .map_err(|err| Error::InvalidConfig(format!("manifest pattern `{}`: {err}", e.pattern)))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries, patterns })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn lookup(&self, path: &str) -> Option<DataExposure> {
        let exact = self
            .entries
            .iter()
            .zip(&self.patterns)
            .find(|(e, p)| p.is_none() && e.pattern == path);
        if let Some((e, _)) = exact {
            return Some(e.sensitivity);
        }
        self.entries
            .iter()
            .zip(&self.patterns)
            .find(|(_, p)| p.as_ref().is_some_and(|p| p.matches(path)))
            .map(|(e, _)| e.sensitivity)
    }

    /// First resource path listed with exactly `sensitivity`, if any.
    pub fn example_path(&self, sensitivity: DataExposure) -> Option<&str> {
        self.entries
            .iter()
            .zip(&self.patterns)
            .find(|(e, p)| p.is_none() && e.sensitivity == sensitivity)
            .map(|(e, _)| e.pattern.as_str())
    }
}

fn is_glob(pattern: &str) -> bool {
    pattern.contains(['*', '?', '['])
}

/// Fallback labeller for actions without a tool profile.
pub trait Judge: Send + Sync {
    /// `None` means abstain.
    fn judge(&self, action: &ActionRecord) -> Option<StateDelta>;
}

/// A judge that never answers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Abstain;

impl Judge for Abstain {
    fn judge(&self, _action: &ActionRecord) -> Option<StateDelta> {
        None
    }
}

/// Deterministic stand-in judge: a fixed tool → delta table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableJudge {
    pub entries: BTreeMap<String, StateDelta>,
}

impl Judge for TableJudge {
    fn judge(&self, action: &ActionRecord) -> Option<StateDelta> {
        self.entries.get(&action.tool).copied().map(|mut d| {
            if let Some(s) = action.sensitivity {
                d.data = s;
            }
            d
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaSource {
    Rule,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub delta: StateDelta,
    pub source: DeltaSource,
}

/// Running tally of how steps were resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Coverage {
    pub by_rule: u64,
    pub by_judge: u64,
}

impl Coverage {
    pub fn record(&mut self, source: DeltaSource) {
        match source {
            DeltaSource::Rule => self.by_rule += 1,
            DeltaSource::Judge => self.by_judge += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.by_rule + self.by_judge
    }

    pub fn judge_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.by_judge as f64 / self.total() as f64
        }
    }
}

pub struct Classifier {
    profiles: ToolProfiles,
    manifest: FileManifest,
    judge: Box<dyn Judge>,
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("profiles", &self.profiles)
            .field("manifest", &self.manifest)
            .finish_non_exhaustive()
    }
}

impl Default for Classifier {
    fn default() -> Self {
        Self::new(ToolProfiles::standard(), FileManifest::default(), Box::new(Abstain))
    }
}

impl Classifier {
    pub fn new(profiles: ToolProfiles, manifest: FileManifest, judge: Box<dyn Judge>) -> Self {
        Self {
            profiles,
            manifest,
            judge,
        }
    }

    pub fn profiles(&self) -> &ToolProfiles {
        &self.profiles
    }

    pub fn manifest(&self) -> &FileManifest {
        &self.manifest
    }

    pub fn with_manifest(mut self, manifest: FileManifest) -> Self {
        self.manifest = manifest;
        self
    }

    fn sensitivity(&self, action: &ActionRecord) -> Option<DataExposure> {
        action
            .sensitivity
            .or_else(|| action.resource.as_deref().and_then(|r| self.manifest.lookup(r)))
    }

    pub fn classify(&self, action: &ActionRecord) -> Result<Classification> {
        if let Some(profile) = self.profiles.get(&action.tool) {
            return Ok(Classification {
                delta: profile.delta(self.sensitivity(action)),
                source: DeltaSource::Rule,
            });
        }
        let mut resolved = action.clone();
        resolved.sensitivity = self.sensitivity(action);
        match self.judge.judge(&resolved) {
            Some(delta) => Ok(Classification {
                delta,
                source: DeltaSource::Judge,
            }),
            None => Err(Error::UnclassifiableAction {
                tool: action.tool.clone(),
                step_index: action.step_index,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DataExposure as D;
    use Reversibility as R;
    use ToolEscalation as T;

    #[test]
    fn profile_applies_sensitivity_tag() {
        let c = Classifier::default();
        let a = ActionRecord::new(0, "read_file").with_sensitivity(D::Credentials);
        let out = c.classify(&a).unwrap();
        assert_eq!(out.delta, StateDelta::new(D::Credentials, T::ReadOnly, R::FullyReversible));
        assert_eq!(out.source, DeltaSource::Rule);
    }

    #[test]
    fn untagged_action_uses_profile_default() {
        let c = Classifier::default();
        let out = c.classify(&ActionRecord::new(3, "send_email")).unwrap();
        assert_eq!(out.delta, StateDelta::new(D::None, T::Network, R::Irreversible));
    }

    #[test]
    fn unknown_tool_with_abstaining_judge_fails() {
        let c = Classifier::default();
        let err = c.classify(&ActionRecord::new(1, "unknown_tool_xyz")).unwrap_err();
        assert!(matches!(err, Error::UnclassifiableAction { ref tool, step_index: 1 } if tool == "unknown_tool_xyz"));
    }

    #[test]
    fn table_judge_covers_unknown_tools() {
        let mut judge = TableJudge::default();
        judge.entries.insert(
            "upload_s3".into(),
            StateDelta::new(D::None, T::Network, R::Irreversible),
        );
        let c = Classifier::new(ToolProfiles::standard(), FileManifest::default(), Box::new(judge));
        let a = ActionRecord::new(0, "upload_s3").with_sensitivity(D::Sensitive);
        let out = c.classify(&a).unwrap();
        assert_eq!(out.source, DeltaSource::Judge);
        assert_eq!(out.delta.data, D::Sensitive);

        let mut cov = Coverage::default();
        cov.record(out.source);
        cov.record(DeltaSource::Rule);
        assert_eq!(cov.judge_fraction(), 0.5);
    }

    #[test]
    fn manifest_prefers_exact_then_first_glob() {
        let m = FileManifest::new(vec![
            ManifestEntry {
                pattern: "/srv/*".into(),
                sensitivity: D::Internal,
            },
            ManifestEntry {
                pattern: "/srv/secrets/*".into(),
                sensitivity: D::Credentials,
            },
            ManifestEntry {
                pattern: "/srv/readme.md".into(),
                sensitivity: D::Public,
            },
        ])
        .unwrap();
        assert_eq!(m.lookup("/srv/readme.md"), Some(D::Public));
        // Both globs match; the first listed wins.
        assert_eq!(m.lookup("/srv/secrets/key.pem"), Some(D::Internal));
        assert_eq!(m.lookup("/home/x"), None);
        assert_eq!(m.example_path(D::Public), Some("/srv/readme.md"));

        let c = Classifier::default().with_manifest(m);
        let a = ActionRecord::new(0, "read_file").with_resource("/srv/readme.md");
        assert_eq!(c.classify(&a).unwrap().delta.data, D::Public);
        // An explicit tag beats the manifest.
        let a = a.with_sensitivity(D::Sensitive);
        assert_eq!(c.classify(&a).unwrap().delta.data, D::Sensitive);
    }

    #[test]
    fn bad_glob_is_a_config_error() {
        let err = FileManifest::new(vec![ManifestEntry {
            pattern: "[".into(),
            sensitivity: D::Public,
        }]);
        assert!(err.is_err());
    }

    #[test]
    fn classification_is_deterministic() {
        let c = Classifier::default();
        let a = ActionRecord::new(0, "run_command").with_sensitivity(D::Sensitive);
        assert_eq!(c.classify(&a).unwrap(), c.classify(&a).unwrap());
    }
}
