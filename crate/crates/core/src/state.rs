//! Cumulative safety state of an agent session.
//!
//! A [`SafetyState`] is the triple (data exposure, tool escalation,
//! reversibility). Each dimension is a small ordinal; the state space has
//! exactly 5 × 4 × 3 = 60 members, enumerated by [`SafetyState::index`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! ordinal_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident = $rank:literal => $label:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum $name {
            $(
                #[serde(rename = $label)]
                $variant = $rank,
            )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            #[inline]
            pub const fn rank(self) -> usize {
                self as usize
            }

            pub fn from_rank(rank: usize) -> Option<Self> {
                Self::ALL.get(rank).copied()
            }

            pub const fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub const fn min_value() -> Self {
                Self::ALL[0]
            }

            pub const fn max_value() -> Self {
                Self::ALL[Self::ALL.len() - 1]
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = UnknownLabel;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($label => Ok($name::$variant),)+
                    _ => Err(UnknownLabel {
                        kind: stringify!($name),
                        label: s.to_string(),
                    }),
                }
            }
        }
    };
}

/// Returned when parsing an enumeration label that does not exist.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} label `{label}`")]
pub struct UnknownLabel {
    pub kind: &'static str,
    pub label: String,
}

ordinal_enum! {
    /// Highest sensitivity of data the agent has touched.
    DataExposure {
        None = 0 => "NONE",
        Public = 1 => "PUBLIC",
        Internal = 2 => "INTERNAL",
        Sensitive = 3 => "SENSITIVE",
        Credentials = 4 => "CREDENTIALS",
    }
}

ordinal_enum! {
    /// Most powerful capability the agent has exercised.
    ToolEscalation {
        ReadOnly = 0 => "READ_ONLY",
        FileWrite = 1 => "FILE_WRITE",
        CodeExec = 2 => "CODE_EXEC",
        Network = 3 => "NETWORK",
    }
}

ordinal_enum! {
    /// How hard the agent's effects are to undo. Higher rank is worse.
    Reversibility {
        FullyReversible = 0 => "FULLY_REVERSIBLE",
        Partially = 1 => "PARTIALLY",
        Irreversible = 2 => "IRREVERSIBLE",
    }
}

ordinal_enum! {
    /// Discrete risk level. `Violated` is absorbing.
    RiskLevel {
        Safe = 0 => "SAFE",
        Mild = 1 => "MILD",
        Elevated = 2 => "ELEVATED",
        Critical = 3 => "CRITICAL",
        Violated = 4 => "VIOLATED",
    }
}

impl RiskLevel {
    /// The four non-absorbing levels, in matrix order.
    pub const TRANSIENT: [RiskLevel; 4] = [
        RiskLevel::Safe,
        RiskLevel::Mild,
        RiskLevel::Elevated,
        RiskLevel::Critical,
    ];

    pub fn is_terminal(self) -> bool {
        self == RiskLevel::Violated
    }
}

/// How the reversibility dimension is updated on each action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReversibilityPolicy {
    /// Reversibility is the worst seen so far; the whole state is monotone.
    #[default]
    WorstCase,
    /// Reversibility is replaced by the latest action's value.
    Latest,
}

impl FromStr for ReversibilityPolicy {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "WORST_CASE" => Ok(Self::WorstCase),
            "LATEST" => Ok(Self::Latest),
            _ => Err(UnknownLabel {
                kind: "ReversibilityPolicy",
                label: s.to_string(),
            }),
        }
    }
}

/// One of the three state dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    DataExposure,
    ToolEscalation,
    Reversibility,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::DataExposure,
        Dimension::ToolEscalation,
        Dimension::Reversibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::DataExposure => "data_exposure",
            Dimension::ToolEscalation => "tool_escalation",
            Dimension::Reversibility => "reversibility",
        }
    }
}

impl FromStr for Dimension {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| UnknownLabel {
                kind: "Dimension",
                label: s.to_string(),
            })
    }
}

/// Safety implications of a single action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateDelta {
    pub data: DataExposure,
    pub tools: ToolEscalation,
    pub reversibility: Reversibility,
}

impl StateDelta {
    pub const fn new(data: DataExposure, tools: ToolEscalation, reversibility: Reversibility) -> Self {
        Self {
            data,
            tools,
            reversibility,
        }
    }
}

/// Cumulative safety state `(d, t, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SafetyState {
    pub data: DataExposure,
    pub tools: ToolEscalation,
    pub reversibility: Reversibility,
}

impl Default for SafetyState {
    fn default() -> Self {
        Self::INITIAL
    }
}

impl SafetyState {
    /// Number of distinct states.
    pub const COUNT: usize = DataExposure::COUNT * ToolEscalation::COUNT * Reversibility::COUNT;

    /// State of a session before any action.
    pub const INITIAL: SafetyState = SafetyState {
        data: DataExposure::None,
        tools: ToolEscalation::ReadOnly,
        reversibility: Reversibility::FullyReversible,
    };

    pub const fn new(data: DataExposure, tools: ToolEscalation, reversibility: Reversibility) -> Self {
        Self {
            data,
            tools,
            reversibility,
        }
    }

    /// Folds one action's delta into the state.
    pub fn merge(self, delta: StateDelta, policy: ReversibilityPolicy) -> SafetyState {
        SafetyState {
            data: self.data.max(delta.data),
            tools: self.tools.max(delta.tools),
            reversibility: match policy {
                ReversibilityPolicy::WorstCase => self.reversibility.max(delta.reversibility),
                ReversibilityPolicy::Latest => delta.reversibility,
            },
        }
    }

    /// Canonical index in `0..60`: `d·12 + t·3 + r`.
    #[inline]
    pub const fn index(self) -> usize {
        self.data.rank() * (ToolEscalation::COUNT * Reversibility::COUNT)
            + self.tools.rank() * Reversibility::COUNT
            + self.reversibility.rank()
    }

    pub fn from_index(index: usize) -> Option<SafetyState> {
        if index >= Self::COUNT {
            return None;
        }
        let per_data = ToolEscalation::COUNT * Reversibility::COUNT;
        Some(SafetyState {
            data: DataExposure::from_rank(index / per_data)?,
            tools: ToolEscalation::from_rank((index % per_data) / Reversibility::COUNT)?,
            reversibility: Reversibility::from_rank(index % Reversibility::COUNT)?,
        })
    }

    /// All 60 states in index order.
    pub fn all() -> impl Iterator<Item = SafetyState> {
        (0..Self::COUNT).filter_map(Self::from_index)
    }

    /// The same state viewed as a delta, e.g. to replay it onto a fresh session.
    pub fn as_delta(self) -> StateDelta {
        StateDelta::new(self.data, self.tools, self.reversibility)
    }

    /// Componentwise `self >= other`.
    pub fn dominates(self, other: SafetyState) -> bool {
        self.data >= other.data && self.tools >= other.tools && self.reversibility >= other.reversibility
    }

    /// Sets `dimension` to its lowest rank.
    pub fn clamp(self, dimension: Dimension) -> SafetyState {
        let mut out = self;
        match dimension {
            Dimension::DataExposure => out.data = DataExposure::min_value(),
            Dimension::ToolEscalation => out.tools = ToolEscalation::min_value(),
            Dimension::Reversibility => out.reversibility = Reversibility::min_value(),
        }
        out
    }

    /// Raises `dimension` by one rank, or `None` at the top of the scale.
    pub fn raise(self, dimension: Dimension) -> Option<SafetyState> {
        let mut out = self;
        match dimension {
            Dimension::DataExposure => out.data = DataExposure::from_rank(self.data.rank() + 1)?,
            Dimension::ToolEscalation => out.tools = ToolEscalation::from_rank(self.tools.rank() + 1)?,
            Dimension::Reversibility => {
                out.reversibility = Reversibility::from_rank(self.reversibility.rank() + 1)?
            }
        }
        Some(out)
    }
}

impl fmt::Display for SafetyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.data, self.tools, self.reversibility)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use DataExposure as D;
    use Reversibility as R;
    use ToolEscalation as T;

    #[test]
    fn worst_case_merge_takes_componentwise_max() {
        let s = SafetyState::new(D::Internal, T::ReadOnly, R::FullyReversible);
        let delta = StateDelta::new(D::Sensitive, T::FileWrite, R::Partially);
        assert_eq!(
            s.merge(delta, ReversibilityPolicy::WorstCase),
            SafetyState::new(D::Sensitive, T::FileWrite, R::Partially)
        );
    }

    #[test]
    fn worst_case_merge_never_goes_down() {
        let s = SafetyState::new(D::Credentials, T::Network, R::Irreversible);
        let delta = StateDelta::new(D::None, T::ReadOnly, R::FullyReversible);
        assert_eq!(s.merge(delta, ReversibilityPolicy::WorstCase), s);
    }

    #[test]
    fn latest_policy_replaces_reversibility() {
        let s = SafetyState::new(D::Sensitive, T::CodeExec, R::Irreversible);
        let delta = StateDelta::new(D::Public, T::ReadOnly, R::FullyReversible);
        assert_eq!(
            s.merge(delta, ReversibilityPolicy::Latest),
            SafetyState::new(D::Sensitive, T::CodeExec, R::FullyReversible)
        );
    }

    #[test]
    fn index_examples() {
        assert_eq!(SafetyState::INITIAL.index(), 0);
        assert_eq!(SafetyState::new(D::Credentials, T::Network, R::Irreversible).index(), 59);
        assert_eq!(SafetyState::new(D::Internal, T::FileWrite, R::Partially).index(), 28);
    }

    #[test]
    fn index_is_a_bijection() {
        let all: Vec<_> = SafetyState::all().collect();
        assert_eq!(all.len(), 60);
        for (i, s) in all.iter().enumerate() {
            assert_eq!(s.index(), i);
        }
        assert_eq!(SafetyState::from_index(60), None);
    }

    #[test]
    fn labels_round_trip_through_from_str() {
        for level in RiskLevel::ALL {
            assert_eq!(level.name().parse::<RiskLevel>().unwrap(), *level);
        }
        assert!("FULLY".parse::<Reversibility>().is_err());
        assert_eq!(
            serde_json::to_string(&Reversibility::FullyReversible).unwrap(),
            "\"FULLY_REVERSIBLE\""
        );
    }

    fn any_state() -> impl Strategy<Value = SafetyState> {
        (0..SafetyState::COUNT).prop_map(|i| SafetyState::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn worst_case_merge_dominates_input(s in any_state(), d in any_state()) {
            let merged = s.merge(d.as_delta(), ReversibilityPolicy::WorstCase);
            prop_assert!(merged.dominates(s));
            prop_assert!(merged.dominates(d));
        }

        #[test]
        fn merging_own_delta_is_idempotent(s in any_state()) {
            prop_assert_eq!(s.merge(s.as_delta(), ReversibilityPolicy::WorstCase), s);
        }
    }
}
