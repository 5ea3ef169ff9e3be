//! Ordered risk-synthesis rules mapping a [`SafetyState`] to a [`RiskLevel`].
//!
//! A [`RuleCascade`] is plain data: an ordered list of threshold predicates
//! plus a fallback level. The first matching rule wins. The built-in
//! [`RuleCascade::standard`] cascade has eleven predicates and falls back to
//! `SAFE`, for twelve rules in total.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DataExposure, Dimension, Reversibility, RiskLevel, SafetyState, ToolEscalation};

/// A conjunction of "at least" thresholds. Missing thresholds always match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataExposure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<ToolEscalation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reversibility: Option<Reversibility>,
    pub level: RiskLevel,
}

impl RiskRule {
    const fn new(
        data: Option<DataExposure>,
        tools: Option<ToolEscalation>,
        reversibility: Option<Reversibility>,
        level: RiskLevel,
    ) -> Self {
        Self {
            data,
            tools,
            reversibility,
            level,
        }
    }

    #[inline]
    pub fn matches(&self, s: SafetyState) -> bool {
        self.data.is_none_or(|d| s.data >= d)
            && self.tools.is_none_or(|t| s.tools >= t)
            && self.reversibility.is_none_or(|r| s.reversibility >= r)
    }

    /// Whether the predicate looks at `dimension` at all.
    pub fn depends_on(&self, dimension: Dimension) -> bool {
        match dimension {
            Dimension::DataExposure => self.data.is_some(),
            Dimension::ToolEscalation => self.tools.is_some(),
            Dimension::Reversibility => self.reversibility.is_some(),
        }
    }
}

/// An ordered, first-match-wins list of rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCascade {
    pub rules: Vec<RiskRule>,
    #[serde(default = "default_fallback")]
    pub fallback: RiskLevel,
}

fn default_fallback() -> RiskLevel {
    RiskLevel::Safe
}

/// Which rule produced a level. Rule numbers are 1-based; the fallback is
/// numbered one past the last predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleMatch {
    pub rule: usize,
    pub level: RiskLevel,
}

/// A pair of neighbouring states where raising one dimension lowered the level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonotonicityViolation {
    pub lower: SafetyState,
    pub raised: SafetyState,
    pub dimension: Dimension,
    pub lower_level: RiskLevel,
    pub raised_level: RiskLevel,
}

impl Default for RuleCascade {
    fn default() -> Self {
        Self::standard()
    }
}

impl RuleCascade {
    /// The built-in twelve-rule cascade.
    pub fn standard() -> Self {
        use DataExposure::{Credentials, Internal, Sensitive};
        use Reversibility::Irreversible;
        use RiskLevel::{Critical, Elevated, Mild, Violated};
        use ToolEscalation::{CodeExec, FileWrite, Network};

        let r = RiskRule::new;
        RuleCascade {
            rules: vec![
                r(Some(Credentials), Some(Network), Some(Irreversible), Violated),
                r(Some(Sensitive), Some(Network), Some(Irreversible), Violated),
                r(Some(Credentials), Some(CodeExec), None, Critical),
                r(Some(Sensitive), Some(Network), None, Critical),
                r(Some(Credentials), None, None, Elevated),
                r(Some(Sensitive), Some(CodeExec), None, Elevated),
                r(Some(Sensitive), Some(FileWrite), Some(Irreversible), Elevated),
                r(Some(Sensitive), Some(FileWrite), None, Mild),
                r(Some(Internal), Some(Network), None, Mild),
                r(Some(Sensitive), None, None, Mild),
                r(Some(Internal), Some(FileWrite), None, Mild),
            ],
            fallback: RiskLevel::Safe,
        }
    }

    /// Parses a cascade from TOML (`[[rules]]` tables plus optional `fallback`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cascade: RuleCascade =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("rule table: {e}")))?;
        cascade.validate()?;
        Ok(cascade)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::InvalidConfig("rule table has no rules".into()));
        }
        Ok(())
    }

    /// Number of rules including the fallback.
    pub fn len(&self) -> usize {
        self.rules.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn evaluate(&self, s: SafetyState) -> RiskLevel {
        self.matching_rule(s).level
    }

    pub fn matching_rule(&self, s: SafetyState) -> RuleMatch {
        self.rules
            .iter()
            .position(|rule| rule.matches(s))
            .map(|i| RuleMatch {
                rule: i + 1,
                level: self.rules[i].level,
            })
            .unwrap_or(RuleMatch {
                rule: self.rules.len() + 1,
                level: self.fallback,
            })
    }

    /// Checks every (state, dimension) neighbour pair for a level decrease.
    pub fn monotonicity_violations(&self) -> Vec<MonotonicityViolation> {
        let mut out = Vec::new();
        for lower in SafetyState::all() {
            for dimension in Dimension::ALL {
                if let Some(raised) = lower.raise(dimension) {
                    let (lower_level, raised_level) = (self.evaluate(lower), self.evaluate(raised));
                    if raised_level < lower_level {
                        out.push(MonotonicityViolation {
                            lower,
                            raised,
                            dimension,
                            lower_level,
                            raised_level,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn table(&self) -> RiskTable {
        RiskTable::from_cascade(self)
    }
}

/// Precomputed level for each of the 60 states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RiskTable {
    levels: [RiskLevel; SafetyState::COUNT],
}

impl RiskTable {
    pub fn from_cascade(cascade: &RuleCascade) -> Self {
        let mut levels = [RiskLevel::Safe; SafetyState::COUNT];
        for s in SafetyState::all() {
            levels[s.index()] = cascade.evaluate(s);
        }
        Self { levels }
    }

    /// The standard table, built once.
    pub fn standard() -> &'static RiskTable {
        static TABLE: OnceLock<RiskTable> = OnceLock::new();
        TABLE.get_or_init(|| RiskTable::from_cascade(&RuleCascade::standard()))
    }

    #[inline]
    pub fn level(&self, s: SafetyState) -> RiskLevel {
        self.levels[s.index()]
    }

    /// Level computed with `dimensions` clamped to their lowest rank.
    pub fn level_clamped(&self, s: SafetyState, dimensions: &[Dimension]) -> RiskLevel {
        let clamped = dimensions.iter().fold(s, |acc, d| acc.clamp(*d));
        self.level(clamped)
    }
}

/// Level of `s` under the standard cascade.
pub fn synthesize_risk(s: SafetyState) -> RiskLevel {
    RiskTable::standard().level(s)
}
