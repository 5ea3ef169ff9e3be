//! Seeded trace simulator.
//!
//! Level mode samples a risk-level chain from the category's generator and
//! then picks, step by step, a concrete tool call whose merged state lands on
//! the sampled level. A backward feasibility pass over (position, state)
//! guarantees the pick never paints itself into a corner. Tool mode samples
//! weighted tool calls directly. Both share one stopping rule: stop one step
//! after the first VIOLATED level, at the length cap, or (from the second
//! step on) with the completion probability.
//!
//! Trace `i` of a corpus uses ChaCha8 stream `i` of the corpus seed, so
//! traces are independent of each other and of the number simulated.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::ActionRecord;
use crate::config::{Config, ScenarioConfig, SimMode};
use crate::error::{Error, Result};
use crate::estimate::LEVELS;
use crate::state::{DataExposure, RiskLevel, SafetyState};
use crate::trace::{Labeler, Trace};

/// A candidate tool call and its effect from every state.
struct Candidate {
    tool: String,
    sensitivity: DataExposure,
    next: [u8; SafetyState::COUNT],
}

pub struct Simulator<'a> {
    scenario: &'a ScenarioConfig,
    labeler: &'a Labeler,
    candidates: Vec<Candidate>,
    generator: Vec<[f64; LEVELS]>,
    actions: Option<WeightedIndex<f64>>,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a ScenarioConfig, labeler: &'a Labeler) -> Result<Self> {
        if !(scenario.completion > 0.0 && scenario.completion <= 1.0) {
            return Err(Error::InvalidConfig("completion probability must be in (0, 1]".into()));
        }
        if scenario.max_length < 2 {
            return Err(Error::InvalidConfig("max_length must be at least 2".into()));
        }
        let mut candidates = Vec::new();
        let mut generator = Vec::new();
        let mut actions = None;
        match scenario.mode {
            SimMode::Level => {
                generator = scenario
                    .generator
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("level mode needs a generator".into()))?;
                if generator.len() != LEVELS {
                    return Err(Error::InvalidConfig("generator must have five rows".into()));
                }
                for (tool, _) in labeler.classifier().profiles().iter() {
                    for &sensitivity in DataExposure::ALL {
                        let probe = ActionRecord::new(0, tool).with_sensitivity(sensitivity);
                        let delta = labeler.classifier().classify(&probe)?.delta;
                        let mut next = [0u8; SafetyState::COUNT];
                        for s in SafetyState::all() {
                            next[s.index()] = s.merge(delta, labeler.policy()).index() as u8;
                        }
                        candidates.push(Candidate {
                            tool: tool.to_string(),
                            sensitivity,
                            next,
                        });
                    }
                }
            }
            SimMode::Tool => {
                let weights: Vec<f64> = scenario.actions.iter().map(|a| a.weight).collect();
                actions = Some(
                    WeightedIndex::new(weights).map_err(|e| Error::InvalidConfig(format!("action weights: {e}")))?,
                );
            }
        }
        Ok(Self {
            scenario,
            labeler,
            candidates,
            generator,
            actions,
        })
    }

    /// Simulates trace `ordinal` of a corpus seeded with `seed`.
    pub fn simulate(&self, trace_id: impl Into<String>, seed: u64, ordinal: u64) -> Result<Trace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ordinal);
        let actions = match self.scenario.mode {
            SimMode::Level => {
                let levels = self.sample_levels(&mut rng);
                self.realize(&levels, &mut rng)?
            }
            SimMode::Tool => self.sample_actions(&mut rng)?,
        };
        self.labeler
            .label(trace_id, self.scenario.category, self.scenario.model.clone(), &actions, None)
    }

    /// Post-action levels for one trace under the shared stopping rule.
    fn sample_levels(&self, rng: &mut ChaCha8Rng) -> Vec<RiskLevel> {
        let mut current = self.labeler.initial_level();
        let mut out = Vec::new();
        loop {
            current = sample_row(&self.generator[current.rank()], rng);
            out.push(current);
            if self.should_stop(&out, rng) {
                return out;
            }
        }
    }

    fn should_stop(&self, levels: &[RiskLevel], rng: &mut ChaCha8Rng) -> bool {
        let n = levels.len();
        let last = levels[n - 1];
        if last == RiskLevel::Violated {
            return (n >= 2 && levels[n - 2] == RiskLevel::Violated) || n >= self.scenario.max_length;
        }
        n >= self.scenario.max_length || (n >= 2 && rng.random::<f64>() < self.scenario.completion)
    }

    /// Picks a tool call per step so the merged states follow `levels`.
    fn realize(&self, levels: &[RiskLevel], rng: &mut ChaCha8Rng) -> Result<Vec<ActionRecord>> {
        let table = self.labeler.table();
        let n = levels.len();
        // feasible[i][s]: from state s after i steps, levels[i..] can still be produced.
        let mut feasible = vec![[false; SafetyState::COUNT]; n + 1];
        feasible[n] = [true; SafetyState::COUNT];
        for i in (0..n).rev() {
            for s in 0..SafetyState::COUNT {
                feasible[i][s] = self.candidates.iter().any(|c| {
                    let next = c.next[s] as usize;
                    feasible[i + 1][next] && table.level(state_at(next)) == levels[i]
                });
            }
        }
        let mut state = SafetyState::INITIAL.index();
        if !feasible[0][state] {
            return Err(Error::InvalidConfig(format!(
                "level sequence {levels:?} cannot be produced by the configured tools"
            )));
        }
        let manifest = self.labeler.classifier().manifest();
        let mut out = Vec::with_capacity(n);
        for (i, &level) in levels.iter().enumerate() {
            let options: Vec<&Candidate> = self
                .candidates
                .iter()
                .filter(|c| {
                    let next = c.next[state] as usize;
                    feasible[i + 1][next] && table.level(state_at(next)) == level
                })
                .collect();
            let pick = options[rng.random_range(0..options.len())];
            state = pick.next[state] as usize;
            let action = ActionRecord::new(i as u64, pick.tool.clone());
            out.push(match manifest.example_path(pick.sensitivity) {
                Some(path) => action.with_resource(path),
                None => action.with_sensitivity(pick.sensitivity),
            });
        }
        Ok(out)
    }

    fn sample_actions(&self, rng: &mut ChaCha8Rng) -> Result<Vec<ActionRecord>> {
        let dist = self.actions.as_ref().expect("tool mode has weights");
        let mut state = SafetyState::INITIAL;
        let mut levels = Vec::new();
        let mut out = Vec::new();
        loop {
            let spec = &self.scenario.actions[dist.sample(rng)];
            let mut action = ActionRecord::new(out.len() as u64, spec.tool.clone());
            action.sensitivity = spec.sensitivity;
            action.resource = spec.resource.clone();
            let (step, _) = self.labeler.step(state, &action)?;
            state = step.state;
            levels.push(step.level);
            out.push(action);
            if self.should_stop(&levels, rng) {
                return Ok(out);
            }
        }
    }
}

fn state_at(index: usize) -> SafetyState {
    SafetyState::from_index(index).expect("index in range")
}

fn sample_row(row: &[f64; LEVELS], rng: &mut ChaCha8Rng) -> RiskLevel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return RiskLevel::ALL[i];
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    let last = row.iter().rposition(|p| *p > 0.0).unwrap_or(LEVELS - 1);
    RiskLevel::ALL[last]
}

/// Simulates `n` traces of one scenario config with ids `{category}-{i:04}`.
pub fn simulate_traces(scenario: &ScenarioConfig, labeler: &Labeler, n: usize, seed: u64) -> Result<Vec<Trace>> {
    let sim = Simulator::new(scenario, labeler)?;
    (0..n)
        .map(|i| sim.simulate(format!("{}-{i:04}", scenario.category), seed, i as u64))
        .collect()
}

/// Splits `total` over `weights` proportionally (largest remainder, ties
/// to the earlier entry).
pub fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|w| w * total / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(weights[i] * total % sum));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// The full multi-category corpus: every configured scenario is run its
/// configured number of times, or `n` traces in total apportioned by those
/// run counts. Trace ids are `{category}-{scenario}-{run:02}`.
pub fn simulate_corpus(config: &Config, seed: u64, n: Option<usize>) -> Result<Vec<Trace>> {
    let labeler = config.labeler();
    let scenarios = config.scenarios()?;
    let slots: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(c, s)| s.scenarios.iter().enumerate().map(move |(k, _)| (c, k)))
        .collect();
    let weights: Vec<usize> = slots.iter().map(|&(c, k)| scenarios[c].scenarios[k].runs).collect();
    let runs = match n {
        Some(n) => apportion(&weights, n),
        None => weights,
    };
    let sims = scenarios
        .iter()
        .map(|s| Simulator::new(s, &labeler))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(runs.iter().sum());
    let mut ordinal = 0u64;
    for (&(c, k), &count) in slots.iter().zip(&runs) {
        let scenario = &scenarios[c];
        for run in 0..count {
            let id = format!("{}-{}-{run:02}", scenario.category, scenario.scenarios[k].name);
            out.push(sims[c].simulate(id, seed, ordinal)?);
            ordinal += 1;
        }
    }
    Ok(out)
}
