//! Category-aware runtime monitor.
//!
//! A [`Monitor`] is built once from a [`MonitorConfig`]; construction
//! precomputes the 60-state risk table and the finite-horizon probability of
//! every level, so [`Monitor::observe`] is a merge, two array reads and a
//! comparison. Sessions carry all mutable state and are independent.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{finite_horizon, HorizonCurve};
use crate::error::{Error, Result};
use crate::estimate::{TransitionMatrix, LEVELS};
use crate::rules::{RiskTable, RuleCascade};
use crate::state::{ReversibilityPolicy, RiskLevel, SafetyState, StateDelta, UnknownLabel};
use crate::trace::{Category, Trace};

pub const DEFAULT_HORIZON: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterventionMode {
    Block,
    #[default]
    Warn,
    PauseForApproval,
    SuggestAlternative,
}

impl InterventionMode {
    pub fn name(self) -> &'static str {
        match self {
            InterventionMode::Block => "BLOCK",
            InterventionMode::Warn => "WARN",
            InterventionMode::PauseForApproval => "PAUSE_FOR_APPROVAL",
            InterventionMode::SuggestAlternative => "SUGGEST_ALTERNATIVE",
        }
    }
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterventionMode {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        [
            InterventionMode::Block,
            InterventionMode::Warn,
            InterventionMode::PauseForApproval,
            InterventionMode::SuggestAlternative,
        ]
        .into_iter()
        .find(|m| m.name() == norm)
        .ok_or_else(|| UnknownLabel {
            kind: "InterventionMode",
            label: s.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    /// `None` selects the pooled aggregate model.
    pub category: Option<Category>,
    pub horizon: usize,
    pub threshold: f64,
    pub matrix: TransitionMatrix,
    pub policy: ReversibilityPolicy,
    pub mode: InterventionMode,
    pub cascade: RuleCascade,
}

impl MonitorConfig {
    pub fn new(matrix: TransitionMatrix, threshold: f64) -> Self {
        Self {
            category: matrix.category,
            horizon: DEFAULT_HORIZON,
            threshold,
            matrix,
            policy: ReversibilityPolicy::WorstCase,
            mode: InterventionMode::default(),
            cascade: RuleCascade::standard(),
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_mode(mut self, mode: InterventionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_policy(mut self, policy: ReversibilityPolicy) -> Self {
        self.policy = policy;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub step: u64,
    pub probability: f64,
    pub flagged: bool,
    pub level: RiskLevel,
    pub already_violated: bool,
    pub mode: InterventionMode,
    pub state: SafetyState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    current: SafetyState,
    current_level: RiskLevel,
    step_count: u64,
    flagged_at: Option<u64>,
    violated: bool,
    closed: bool,
}

impl Session {
    pub fn current(&self) -> SafetyState {
        self.current
    }

    pub fn current_level(&self) -> RiskLevel {
        self.current_level
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn flagged_at(&self) -> Option<u64> {
        self.flagged_at
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }
}

#[derive(Debug, Clone)]
pub struct Monitor {
    category: Option<Category>,
    horizon: usize,
    threshold: f64,
    policy: ReversibilityPolicy,
    mode: InterventionMode,
    risk: RiskTable,
    curve: HorizonCurve,
    lookup: [f64; LEVELS],
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Result<Self> {
        if !(config.threshold > 0.0 && config.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must be in (0, 1), got {}",
                config.threshold
            )));
        }
        if config.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if config.matrix.order() != 1 {
            return Err(Error::InvalidConfig(format!(
                "monitor needs a first-order matrix, got order {}",
                config.matrix.order()
            )));
        }
        if !config.matrix.is_absorbing() {
            return Err(Error::InvalidConfig("monitor matrix must have an absorbing VIOLATED row".into()));
        }
        config.cascade.validate()?;
        let curve = finite_horizon(&config.matrix, config.horizon)?;
        let mut lookup = curve.column(config.horizon);
        lookup[RiskLevel::Violated.rank()] = 1.0;
        Ok(Self {
            category: config.category,
            horizon: config.horizon,
            threshold: config.threshold,
            policy: config.policy,
            mode: config.mode,
            risk: config.cascade.table(),
            curve,
            lookup,
        })
    }

    pub fn category(&self) -> Option<Category> {
        self.category
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn mode(&self) -> InterventionMode {
        self.mode
    }

    pub fn policy(&self) -> ReversibilityPolicy {
        self.policy
    }

    /// Precomputed curve for horizons `1..=horizon`.
    pub fn curve(&self) -> &HorizonCurve {
        &self.curve
    }

    /// Violation probability within the configured horizon.
    #[inline]
    pub fn probability(&self, level: RiskLevel) -> f64 {
        self.lookup[level.rank()]
    }

    /// A copy of this monitor with a different threshold; tables are reused.
    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must be in (0, 1), got {threshold}")));
        }
        let mut out = self.clone();
        out.threshold = threshold;
        Ok(out)
    }

    pub fn new_session(&self) -> Session {
        let current = SafetyState::INITIAL;
        let current_level = self.risk.level(current);
        Session {
            current,
            current_level,
            step_count: 0,
            flagged_at: None,
            violated: current_level == RiskLevel::Violated,
            closed: false,
        }
    }

    /// Probability for the session's current level, before any further action.
    pub fn session_probability(&self, session: &Session) -> f64 {
        if session.violated {
            1.0
        } else {
            self.probability(session.current_level)
        }
    }

    #[inline]
    pub fn observe(&self, session: &mut Session, delta: StateDelta) -> Result<Verdict> {
        if session.closed {
            return Err(Error::SessionClosed);
        }
        let state = session.current.merge(delta, self.policy);
        let level = self.risk.level(state);
        let step = session.step_count;
        session.current = state;
        session.current_level = level;
        session.step_count += 1;
        session.violated |= level == RiskLevel::Violated;

        let already_violated = session.violated;
        let probability = if already_violated { 1.0 } else { self.lookup[level.rank()] };
        let flagged = already_violated || probability > self.threshold;
        if flagged && session.flagged_at.is_none() {
            session.flagged_at = Some(step);
        }
        Ok(Verdict {
            step,
            probability,
            flagged,
            level,
            already_violated,
            mode: self.mode,
            state,
        })
    }

    /// Replays a stored trace's deltas through a fresh session.
    pub fn replay(&self, trace: &Trace) -> Vec<Verdict> {
        let mut session = self.new_session();
        trace
            .steps
            .iter()
            .map(|s| self.observe(&mut session, s.delta).expect("fresh session is open"))
            .collect()
    }
}

/// One monitor per category plus a pooled fallback.
#[derive(Debug, Clone)]
pub struct MonitorBank {
    aggregate: Monitor,
    per_category: BTreeMap<Category, Monitor>,
}

impl MonitorBank {
    pub fn new(aggregate: Monitor) -> Self {
        Self {
            aggregate,
            per_category: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, category: Category, monitor: Monitor) {
        self.per_category.insert(category, monitor);
    }

    pub fn aggregate(&self) -> &Monitor {
        &self.aggregate
    }

    /// The category's monitor, or the aggregate when none is registered.
    pub fn for_category(&self, category: Option<Category>) -> &Monitor {
        category
            .and_then(|c| self.per_category.get(&c))
            .unwrap_or(&self.aggregate)
    }

    pub fn categories(&self) -> impl Iterator<Item = (&Category, &Monitor)> {
        self.per_category.iter()
    }

    /// Same tables, every threshold replaced by `theta`.
    pub fn with_uniform_threshold(&self, theta: f64) -> Result<Self> {
        let mut out = Self::new(self.aggregate.with_threshold(theta)?);
        for (c, m) in &self.per_category {
            out.insert(*c, m.with_threshold(theta)?);
        }
        Ok(out)
    }
}
