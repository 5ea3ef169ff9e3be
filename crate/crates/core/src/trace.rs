//! Labeled execution traces and their line-delimited JSON encoding.
//!
//! One trace per line:
//!
//! ```text
//! {"trace_id":"…","category":"research_comms","model":"…","violated":true,
//!  "steps":[{"index":0,"tool":"read_file","sensitivity":"SENSITIVE",
//!            "d":"SENSITIVE","t_esc":"READ_ONLY","r":"FULLY_REVERSIBLE","level":"MILD"}, …]}
//! ```
//!
//! `d`/`t_esc`/`r` are the post-merge cumulative state. `sensitivity` is the
//! resolved data tag that was fed to the classifier (`null` when the tool's
//! default applied). Reading replays every step through a [`Labeler`] and
//! rejects lines whose stored states or levels disagree with the replay.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{ActionRecord, Classification, Classifier, Coverage};
use crate::error::{Error, Result};
use crate::rules::{RiskTable, RuleCascade};
use crate::state::{
    DataExposure, Reversibility, ReversibilityPolicy, RiskLevel, SafetyState, StateDelta,
    ToolEscalation, UnknownLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DataHandling,
    Sysadmin,
    ResearchComms,
    CodeDebugging,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::DataHandling,
        Category::Sysadmin,
        Category::ResearchComms,
        Category::CodeDebugging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::DataHandling => "data_handling",
            Category::Sysadmin => "sysadmin",
            Category::ResearchComms => "research_comms",
            Category::CodeDebugging => "code_debugging",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownLabel {
                kind: "Category",
                label: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: u64,
    pub tool: String,
    pub sensitivity: Option<DataExposure>,
    pub delta: StateDelta,
    pub state: SafetyState,
    pub level: RiskLevel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub trace_id: String,
    pub category: Category,
    pub model: String,
    pub steps: Vec<Step>,
    pub violated: bool,
    /// Level of the pre-action state; not serialized.
    pub initial_level: RiskLevel,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Position of the first step whose level is VIOLATED.
    pub fn first_violation(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.level == RiskLevel::Violated)
    }

    /// Pre-action level followed by each step's level; one transition per step.
    pub fn level_sequence(&self) -> Vec<RiskLevel> {
        std::iter::once(self.initial_level)
            .chain(self.steps.iter().map(|s| s.level))
            .collect()
    }
}

/// The labeling pipeline: classify, merge, synthesize.
#[derive(Debug)]
pub struct Labeler {
    classifier: Classifier,
    policy: ReversibilityPolicy,
    table: RiskTable,
}

impl Default for Labeler {
    fn default() -> Self {
        Self::new(Classifier::default(), ReversibilityPolicy::WorstCase, &RuleCascade::standard())
    }
}

impl Labeler {
    pub fn new(classifier: Classifier, policy: ReversibilityPolicy, cascade: &RuleCascade) -> Self {
        Self {
            classifier,
            policy,
            table: cascade.table(),
        }
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn policy(&self) -> ReversibilityPolicy {
        self.policy
    }

    pub fn table(&self) -> &RiskTable {
        &self.table
    }

    pub fn initial_level(&self) -> RiskLevel {
        self.table.level(SafetyState::INITIAL)
    }

    /// Labels one action taken from `prev`.
    pub fn step(&self, prev: SafetyState, action: &ActionRecord) -> Result<(Step, Classification)> {
        let classification = self.classifier.classify(action)?;
        let state = prev.merge(classification.delta, self.policy);
        let sensitivity = action.sensitivity.or_else(|| {
            action
                .resource
                .as_deref()
                .and_then(|r| self.classifier.manifest().lookup(r))
        });
        Ok((
            Step {
                index: action.step_index,
                tool: action.tool.clone(),
                sensitivity,
                delta: classification.delta,
                state,
                level: self.table.level(state),
            },
            classification,
        ))
    }

    /// Labels a full action sequence into a trace.
    pub fn label(
        &self,
        trace_id: impl Into<String>,
        category: Category,
        model: impl Into<String>,
        actions: &[ActionRecord],
        coverage: Option<&mut Coverage>,
    ) -> Result<Trace> {
        let mut state = SafetyState::INITIAL;
        let mut steps = Vec::with_capacity(actions.len());
        let mut local = Coverage::default();
        for action in actions {
            let (step, c) = self.step(state, action)?;
            local.record(c.source);
            state = step.state;
            steps.push(step);
        }
        if let Some(cov) = coverage {
            cov.by_rule += local.by_rule;
            cov.by_judge += local.by_judge;
        }
        let violated = steps.iter().any(|s| s.level == RiskLevel::Violated);
        Ok(Trace {
            trace_id: trace_id.into(),
            category,
            model: model.into(),
            steps,
            violated,
            initial_level: self.initial_level(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    index: u64,
    tool: String,
    sensitivity: Option<DataExposure>,
    d: DataExposure,
    t_esc: ToolEscalation,
    r: Reversibility,
    level: RiskLevel,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    trace_id: String,
    category: Category,
    model: String,
    violated: bool,
    steps: Vec<StepRecord>,
}

impl From<&Trace> for TraceRecord {
    fn from(t: &Trace) -> Self {
        TraceRecord {
            trace_id: t.trace_id.clone(),
            category: t.category,
            model: t.model.clone(),
            violated: t.violated,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    index: s.index,
                    tool: s.tool.clone(),
                    sensitivity: s.sensitivity,
                    d: s.state.data,
                    t_esc: s.state.tools,
                    r: s.state.reversibility,
                    level: s.level,
                })
                .collect(),
        }
    }
}

/// Serializes one trace as a single JSON line (no trailing newline).
pub fn encode_trace(trace: &Trace) -> String {
    serde_json::to_string(&TraceRecord::from(trace)).expect("trace records always serialize")
}

pub fn write_traces_to<W: Write>(traces: &[Trace], mut out: W) -> std::io::Result<()> {
    for t in traces {
        out.write_all(encode_trace(t).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_traces(traces: &[Trace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_traces_to(traces, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Decodes and replay-checks one line. `line` is 1-based, for messages.
pub fn decode_trace(text: &str, labeler: &Labeler, path: &Path, line: usize) -> Result<Trace> {
    let record: TraceRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })?;
    let inconsistent = |message: String| Error::Consistency {
        path: path.to_path_buf(),
        line,
        message: format!("trace `{}`: {message}", record.trace_id),
    };

    if record.steps.len() < 2 {
        return Err(inconsistent(format!("{} steps, need at least 2", record.steps.len())));
    }

    let mut state = SafetyState::INITIAL;
    let mut prev_index: Option<u64> = None;
    let mut steps = Vec::with_capacity(record.steps.len());
    for s in &record.steps {
        if prev_index.is_some_and(|p| s.index <= p) {
            return Err(inconsistent(format!("step index {} is not increasing", s.index)));
        }
        prev_index = Some(s.index);

        let stored = SafetyState::new(s.d, s.t_esc, s.r);
        let stored_level = labeler.table().level(stored);
        if stored_level != s.level {
            return Err(inconsistent(format!(
                "step {}: level {} but state {stored} synthesizes to {stored_level}",
                s.index, s.level
            )));
        }

        let mut action = ActionRecord::new(s.index, s.tool.clone());
        action.sensitivity = s.sensitivity;
        let (step, _) = labeler.step(state, &action).map_err(|e| inconsistent(e.to_string()))?;
        if step.state != stored {
            return Err(inconsistent(format!(
                "step {}: stored state {stored} but replay gives {}",
                s.index, step.state
            )));
        }
        state = step.state;
        steps.push(step);
    }

    let violated = steps.iter().any(|s| s.level == RiskLevel::Violated);
    if violated != record.violated {
        return Err(inconsistent(format!(
            "violated flag is {} but steps say {violated}",
            record.violated
        )));
    }

    Ok(Trace {
        trace_id: record.trace_id,
        category: record.category,
        model: record.model,
        steps,
        violated,
        initial_level: labeler.initial_level(),
    })
}

pub fn read_traces_from<R: BufRead>(input: R, labeler: &Labeler, path: &Path) -> Result<Vec<Trace>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_trace(&line, labeler, path, i + 1)?);
    }
    Ok(out)
}

pub fn read_traces(path: impl AsRef<Path>, labeler: &Labeler) -> Result<Vec<Trace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces_from(BufReader::new(file), labeler, path)
}

/// SHA-256 of the canonical encoding, hex.
pub fn corpus_hash(traces: &[Trace]) -> String {
    let mut h = Sha256::new();
    for t in traces {
        h.update(encode_trace(t).as_bytes());
        h.update(b"\n");
    }
    hex_digest(h)
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
