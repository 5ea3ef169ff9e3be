//! Python bindings for the `driftwatch` crate.
//!
//! Labels cross the boundary as their upper-case names (`"SENSITIVE"`,
//! `"NETWORK"`, `"MILD"`, ...) and states as `(d, t, r)` tuples.

use std::str::FromStr;
use std::sync::Arc;

use driftwatch::analysis::{absorption_report, decompose, finite_horizon, points_of_no_return};
use driftwatch::classify::{ActionRecord, Classifier};
use driftwatch::config::Config;
use driftwatch::estimate::{count_transitions, estimate_matrix, TransitionMatrix as CoreMatrix, LEVELS};
use driftwatch::eval::{evaluate_monitors, run_pipeline, KeywordMonitor, MarkovMonitor, NoMonitor, ReportMetadata};
use driftwatch::matrix_io::{decode_matrix, encode_matrix};
use driftwatch::monitor::{InterventionMode, Monitor as CoreMonitor, MonitorConfig, Session as CoreSession, Verdict};
use driftwatch::rules::synthesize_risk as core_synthesize;
use driftwatch::sim::simulate_corpus;
use driftwatch::state::{
    DataExposure, ReversibilityPolicy, Reversibility, RiskLevel, SafetyState, StateDelta, ToolEscalation,
};
use driftwatch::trace::{corpus_hash, encode_trace, Category};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type StateTuple = (String, String, String);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

fn parse_state((d, t, r): &StateTuple) -> PyResult<SafetyState> {
    Ok(SafetyState::new(parse(d)?, parse(t)?, parse(r)?))
}

fn state_tuple(s: SafetyState) -> StateTuple {
    (s.data.name().into(), s.tools.name().into(), s.reversibility.name().into())
}

fn parse_category(category: Option<&str>) -> PyResult<Option<Category>> {
    category.map(parse).transpose()
}

/// Risk level of a `(d, t, r)` state under the standard rule cascade.
#[pyfunction]
fn synthesize_risk(state: StateTuple) -> PyResult<String> {
    Ok(core_synthesize(parse_state(&state)?).name().into())
}

/// Folds an action delta into a state. `policy` is `WORST_CASE` or `LATEST`.
#[pyfunction]
#[pyo3(signature = (state, delta, policy = "WORST_CASE"))]
fn merge_state(state: StateTuple, delta: StateTuple, policy: &str) -> PyResult<StateTuple> {
    let policy: ReversibilityPolicy = parse(policy)?;
    let d = parse_state(&delta)?;
    let merged = parse_state(&state)?.merge(StateDelta::new(d.data, d.tools, d.reversibility), policy);
    Ok(state_tuple(merged))
}

/// Wilson score interval `(lo, hi)`.
#[pyfunction]
#[pyo3(signature = (successes, n, z = 1.96))]
fn wilson_ci(successes: u64, n: u64, z: f64) -> PyResult<(f64, f64)> {
    let ci = driftwatch::estimate::wilson_ci(successes, n, z).map_err(value_err)?;
    Ok((ci.lo, ci.hi))
}

#[pyclass(frozen, module = "pydriftwatch")]
struct TransitionMatrix {
    inner: CoreMatrix,
}

#[pymethods]
impl TransitionMatrix {
    /// Built-in reference aggregate matrix.
    #[staticmethod]
    fn reference() -> Self {
        Self {
            inner: CoreMatrix::reference_aggregate(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (rows, order = 1))]
    fn from_rows(rows: Vec<[f64; LEVELS]>, order: usize) -> PyResult<Self> {
        let inner = CoreMatrix::from_rows(order, rows).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Maximum-likelihood fit from level sequences.
    #[staticmethod]
    #[pyo3(signature = (sequences, order = 1, alpha = 0.0))]
    fn fit(sequences: Vec<Vec<String>>, order: usize, alpha: f64) -> PyResult<Self> {
        let seqs = sequences
            .iter()
            .map(|s| s.iter().map(|l| parse::<RiskLevel>(l)).collect::<PyResult<Vec<_>>>())
            .collect::<PyResult<Vec<_>>>()?;
        let counts = count_transitions(&seqs, order).map_err(value_err)?;
        let inner = estimate_matrix(&counts, alpha).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = decode_matrix(text, "<python>".as_ref()).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        encode_matrix(&self.inner).map_err(value_err)
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    fn rows(&self) -> Vec<[f64; LEVELS]> {
        self.inner.rows().to_vec()
    }

    /// `curve[h - 1][level]` for h = 1..=horizon.
    fn finite_horizon(&self, horizon: usize) -> PyResult<Vec<[f64; LEVELS]>> {
        let curve = finite_horizon(&self.inner, horizon).map_err(value_err)?;
        Ok((1..=horizon).map(|h| curve.column(h)).collect())
    }

    /// Dict with `fundamental`, `absorption` and `mean_steps`.
    fn absorption<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let dec = decompose(&self.inner).map_err(value_err)?;
        let report = absorption_report(&dec).map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("fundamental", report.fundamental.to_vec())?;
        out.set_item("absorption", report.absorption.to_vec())?;
        out.set_item("mean_steps", report.mean_steps.to_vec())?;
        Ok(out)
    }

    #[pyo3(signature = (horizon = 5, theta = 0.85))]
    fn points_of_no_return(&self, horizon: usize, theta: f64) -> PyResult<Vec<String>> {
        let levels = points_of_no_return(&self.inner, horizon, theta).map_err(value_err)?;
        Ok(levels.iter().map(|l| l.name().to_string()).collect())
    }

    fn __repr__(&self) -> String {
        format!("TransitionMatrix(order={}, category={:?})", self.inner.order(), self.inner.category)
    }
}

#[pyclass(frozen, module = "pydriftwatch")]
struct Monitor {
    inner: CoreMonitor,
    classifier: Arc<Classifier>,
}

#[pymethods]
impl Monitor {
    #[new]
    #[pyo3(signature = (matrix, threshold, horizon = 5, mode = "WARN"))]
    fn new(matrix: &TransitionMatrix, threshold: f64, horizon: usize, mode: &str) -> PyResult<Self> {
        let mode: InterventionMode = parse(mode)?;
        let config = MonitorConfig::new(matrix.inner.clone(), threshold)
            .with_horizon(horizon)
            .with_mode(mode);
        let inner = CoreMonitor::new(config).map_err(value_err)?;
        Ok(Self {
            inner,
            classifier: Arc::new(Config::builtin().classifier()),
        })
    }

    /// Violation probability within the horizon from `level`.
    fn probability(&self, level: &str) -> PyResult<f64> {
        Ok(self.inner.probability(parse(level)?))
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    fn session(&self) -> Session {
        Session {
            monitor: self.inner.clone(),
            classifier: self.classifier.clone(),
            state: self.inner.new_session(),
        }
    }
}

#[pyclass(module = "pydriftwatch")]
struct Session {
    monitor: CoreMonitor,
    classifier: Arc<Classifier>,
    state: CoreSession,
}

fn verdict_dict<'py>(py: Python<'py>, v: &Verdict) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("step", v.step)?;
    out.set_item("probability", v.probability)?;
    out.set_item("flagged", v.flagged)?;
    out.set_item("level", v.level.name())?;
    out.set_item("already_violated", v.already_violated)?;
    out.set_item("mode", v.mode.name())?;
    out.set_item("state", state_tuple(v.state))?;
    Ok(out)
}

#[pymethods]
impl Session {
    /// Classifies a tool call with the built-in profiles and manifest, then
    /// observes it.
    #[pyo3(signature = (tool, sensitivity = None, resource = None))]
    fn observe<'py>(
        &mut self,
        py: Python<'py>,
        tool: &str,
        sensitivity: Option<&str>,
        resource: Option<String>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut action = ActionRecord::new(self.state.step_count(), tool);
        if let Some(s) = sensitivity {
            action = action.with_sensitivity(parse::<DataExposure>(s)?);
        }
        if let Some(r) = resource {
            action = action.with_resource(r);
        }
        let delta = self.classifier.classify(&action).map_err(value_err)?.delta;
        let verdict = self.monitor.observe(&mut self.state, delta).map_err(value_err)?;
        verdict_dict(py, &verdict)
    }

    /// Observes an explicit `(d, t, r)` delta.
    fn observe_delta<'py>(&mut self, py: Python<'py>, delta: StateTuple) -> PyResult<Bound<'py, PyDict>> {
        let d = StateDelta::new(
            parse::<DataExposure>(&delta.0)?,
            parse::<ToolEscalation>(&delta.1)?,
            parse::<Reversibility>(&delta.2)?,
        );
        let verdict = self.monitor.observe(&mut self.state, d).map_err(value_err)?;
        verdict_dict(py, &verdict)
    }

    #[getter]
    fn state(&self) -> StateTuple {
        state_tuple(self.state.current())
    }

    #[getter]
    fn level(&self) -> String {
        self.state.current_level().name().into()
    }

    #[getter]
    fn flagged_at(&self) -> Option<u64> {
        self.state.flagged_at()
    }

    fn close(&mut self) {
        self.state.close();
    }
}

/// Simulated corpus from the built-in configuration, one JSON trace per item.
#[pyfunction]
#[pyo3(signature = (seed = 7, n = None, category = None))]
fn simulate(seed: u64, n: Option<usize>, category: Option<&str>) -> PyResult<Vec<String>> {
    let category = parse_category(category)?;
    let corpus = simulate_corpus(&Config::builtin(), seed, n).map_err(value_err)?;
    Ok(corpus
        .iter()
        .filter(|t| category.is_none_or(|c| t.category == c))
        .map(encode_trace)
        .collect())
}

/// Simulates, fits, calibrates and scores the monitors on the held-out split.
/// Returns the report CSV.
#[pyfunction]
#[pyo3(signature = (seed = 7))]
fn evaluate(seed: u64) -> PyResult<String> {
    let config = Config::builtin();
    let corpus = simulate_corpus(&config, seed, None).map_err(value_err)?;
    let pipeline = run_pipeline(&corpus, &config, seed).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let markov = MarkovMonitor {
        bank: pipeline.bank.clone(),
    };
    let metadata = ReportMetadata {
        seed,
        corpus_hash: corpus_hash(&corpus),
        config_hash: config.hash().into(),
    };
    let report = evaluate_monitors(&pipeline.test, &[&NoMonitor, &KeywordMonitor, &markov], metadata, false)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(report.to_csv())
}

#[pymodule]
fn pydriftwatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthesize_risk, m)?)?;
    m.add_function(wrap_pyfunction!(merge_state, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_ci, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<TransitionMatrix>()?;
    m.add_class::<Monitor>()?;
    m.add_class::<Session>()?;
    Ok(())
}
