//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use driftwatch::analysis::{absorption_report, decompose, finite_horizon};
use driftwatch::config::{Config, ScenarioConfig, SimMode};
use driftwatch::estimate::{count_transitions, estimate_matrix, wilson_ci, TransitionMatrix, LEVELS};
use driftwatch::eval::{
    evaluate_monitors, markov_order_table, run_pipeline, threshold_grid, threshold_sweep, KeywordMonitor,
    MarkovMonitor, MonitorRow, NoMonitor, ReportMetadata,
};
use driftwatch::monitor::{Monitor, MonitorConfig};
use driftwatch::rules::{synthesize_risk, RuleCascade};
use driftwatch::sim::{simulate_corpus, simulate_traces};
use driftwatch::state::{DataExposure as D, Reversibility as R, RiskLevel, SafetyState, StateDelta, ToolEscalation as T};
use driftwatch::trace::{corpus_hash, read_traces, write_traces, Category};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// The cascade written out as nested conditions on ranks.
fn oracle_level(s: SafetyState) -> RiskLevel {
    let (d, t, r) = (s.data.rank(), s.tools.rank(), s.reversibility.rank());
    let level = if d >= 3 && t == 3 && r == 2 {
        4
    } else if (d == 4 && t >= 2) || (d >= 3 && t == 3) {
        3
    } else if d == 4 || (d == 3 && t >= 2) || (d == 3 && t >= 1 && r == 2) {
        2
    } else if d == 3 || (d >= 2 && t >= 1) {
        1
    } else {
        0
    };
    RiskLevel::from_rank(level).unwrap()
}

fn rules_fidelity() -> Outcome {
    let examples = [
        ((D::Credentials, T::Network, R::Irreversible), RiskLevel::Violated),
        ((D::None, T::ReadOnly, R::FullyReversible), RiskLevel::Safe),
        ((D::Credentials, T::CodeExec, R::Partially), RiskLevel::Critical),
        ((D::Internal, T::Network, R::FullyReversible), RiskLevel::Mild),
        ((D::Sensitive, T::FileWrite, R::Irreversible), RiskLevel::Elevated),
    ];
    for ((d, t, r), want) in examples {
        let s = SafetyState::new(d, t, r);
        check(synthesize_risk(s) == want, format!("{s} -> {}, expected {want}", synthesize_risk(s)))?;
    }
    let states: Vec<SafetyState> = SafetyState::all().collect();
    check(states.len() == 60, format!("{} states", states.len()))?;
    for &s in &states {
        check(synthesize_risk(s) == oracle_level(s), format!("{s} disagrees with oracle"))?;
    }
    let mut pairs = 0;
    for &a in &states {
        for &b in &states {
            if b.dominates(a) {
                pairs += 1;
                check(synthesize_risk(b) >= synthesize_risk(a), format!("{b} ranks below {a}"))?;
            }
        }
    }
    let neighbour = RuleCascade::standard().monotonicity_violations().len();
    check(neighbour == 0, format!("{neighbour} neighbour monotonicity violations"))?;
    let violated: Vec<_> = states.iter().filter(|&&s| synthesize_risk(s) == RiskLevel::Violated).collect();
    check(violated.len() == 2, format!("{} VIOLATED states", violated.len()))?;
    Ok(format!("60 states match, {pairs} dominance pairs monotone"))
}

fn absorption() -> Outcome {
    let dec = decompose(&TransitionMatrix::reference_aggregate()).map_err(|e| e.to_string())?;
    let report = absorption_report(&dec).map_err(|e| e.to_string())?;
    let b_err = report.absorption.iter().map(|b| (b - 1.0).abs()).fold(0.0, f64::max);
    let residual = report.residual(&dec);
    check(b_err < 1e-9, format!("max |B - 1| = {b_err:e}"))?;
    check(residual < 1e-9, format!("(I-Q)N - I residual {residual:e}"))?;
    Ok(format!("max |B - 1| = {b_err:.1e}, residual {residual:.1e}"))
}

/// Repeated row-vector recursion, kept separate from the library's.
fn hand_recursion(rows: &[[f64; LEVELS]], h: usize) -> [f64; LEVELS] {
    let mut v = [0.0, 0.0, 0.0, 0.0, 1.0];
    for _ in 0..h {
        let mut next = [0.0; LEVELS];
        for (i, row) in rows.iter().enumerate() {
            next[i] = row.iter().zip(&v).map(|(p, x)| p * x).sum();
        }
        v = next;
    }
    v
}

fn rollout_rate(rows: &[[f64; LEVELS]], start: usize, h: usize, n: usize, rng: &mut ChaCha20Rng) -> f64 {
    let mut hits = 0usize;
    for _ in 0..n {
        let mut s = start;
        for _ in 0..h {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = LEVELS - 1;
            for (j, p) in rows[s].iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            s = next;
            if s == 4 {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / n as f64
}

fn finite_horizon_check() -> Outcome {
    let m = TransitionMatrix::reference_aggregate();
    let curve = finite_horizon(&m, 5).map_err(|e| e.to_string())?;
    let hand = hand_recursion(m.rows(), 5);
    let mild = curve.at(RiskLevel::Mild, 5);
    let crit = curve.at(RiskLevel::Critical, 5);
    check((mild - hand[1]).abs() < 1e-12 && (crit - hand[3]).abs() < 1e-12, "closed form differs from recursion")?;
    check((mild - 0.454).abs() <= 0.001, format!("MILD h=5 {mild}"))?;
    check((mild - 0.463).abs() <= 0.02, format!("MILD {mild} vs target 0.463"))?;
    check((crit - 0.304).abs() <= 0.001, format!("CRITICAL h=5 {crit}"))?;
    check((crit - 0.295).abs() <= 0.02, format!("CRITICAL {crit} vs target 0.295"))?;
    let mut rng = ChaCha20Rng::seed_from_u64(20_240_601);
    let mc_mild = rollout_rate(m.rows(), 1, 5, 1_000_000, &mut rng);
    let mc_crit = rollout_rate(m.rows(), 3, 5, 1_000_000, &mut rng);
    check((mc_mild - mild).abs() < 0.003, format!("Monte Carlo MILD {mc_mild} vs {mild}"))?;
    check((mc_crit - crit).abs() < 0.003, format!("Monte Carlo CRITICAL {mc_crit} vs {crit}"))?;
    Ok(format!(
        "MILD {mild:.6} (MC {mc_mild:.4}), CRITICAL {crit:.6} (MC {mc_crit:.4})"
    ))
}

fn wilson() -> Outcome {
    let cases = [((36, 38), (0.83, 0.99), (0.82714, 0.98545)), ((4, 34), (0.05, 0.27), (0.046714, 0.266212))];
    let mut out = Vec::new();
    for ((k, n), rounded, exact) in cases {
        let ci = wilson_ci(k, n, 1.96).map_err(|e| e.to_string())?;
        check(
            (ci.lo - exact.0).abs() <= 0.002 && (ci.hi - exact.1).abs() <= 0.002,
            format!("({k},{n}) -> [{}, {}]", ci.lo, ci.hi),
        )?;
        check(
            (ci.lo * 100.0).round() / 100.0 == rounded.0 && (ci.hi * 100.0).round() / 100.0 == rounded.1,
            format!("({k},{n}) does not round to {rounded:?}"),
        )?;
        out.push(format!("({k},{n}) [{:.4}, {:.4}]", ci.lo, ci.hi));
    }
    Ok(out.join(", "))
}

fn refit_generator() -> Vec<[f64; LEVELS]> {
    vec![
        [0.45, 0.30, 0.15, 0.10, 0.00],
        [0.00, 0.50, 0.25, 0.15, 0.10],
        [0.00, 0.00, 0.55, 0.30, 0.15],
        [0.00, 0.00, 0.00, 0.75, 0.25],
        [0.00, 0.00, 0.00, 0.00, 1.00],
    ]
}

fn estimation_round_trip() -> Outcome {
    let config = Config::builtin();
    let labeler = config.labeler();
    let generator = refit_generator();
    let scenario = ScenarioConfig {
        category: Category::Sysadmin,
        mode: SimMode::Level,
        generator: Some(generator.clone()),
        actions: Vec::new(),
        completion: 0.02,
        max_length: 25,
        scenarios: Vec::new(),
        model: "refit".into(),
    };
    let mut traces = Vec::new();
    let mut transitions = 0;
    let mut batch = 0u64;
    while transitions < 100_000 {
        let more = simulate_traces(&scenario, &labeler, 2_000, 1_000 + batch).map_err(|e| e.to_string())?;
        transitions += more.iter().map(|t| t.len()).sum::<usize>();
        traces.extend(more);
        batch += 1;
    }
    let seqs: Vec<_> = traces.iter().map(|t| t.level_sequence()).collect();
    let counts = count_transitions(&seqs, 1).map_err(|e| e.to_string())?;
    let fitted = estimate_matrix(&counts, 0.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (row, want) in fitted.rows().iter().zip(&generator) {
        for (a, b) in row.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 0.01, format!("max entry error {worst:.4} over {} transitions", counts.total))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = simulate_corpus(&config, config.simulation.seed, None).map_err(|e| e.to_string())?;
    let path = dir.path().join("corpus.jsonl");
    write_traces(&corpus, &path).map_err(|e| e.to_string())?;
    let back = read_traces(&path, &labeler).map_err(|e| e.to_string())?;
    check(back == corpus, "stored corpus does not read back identically")?;
    Ok(format!(
        "max entry error {worst:.4} over {} transitions; {} / {} traces replay",
        counts.total,
        back.len(),
        corpus.len()
    ))
}

fn monitor_cost() -> Outcome {
    let monitor = Monitor::new(MonitorConfig::new(TransitionMatrix::reference_aggregate(), 0.5))
        .map_err(|e| e.to_string())?;
    let deltas = [
        StateDelta::new(D::Public, T::ReadOnly, R::FullyReversible),
        StateDelta::new(D::Internal, T::FileWrite, R::Partially),
        StateDelta::new(D::Sensitive, T::ReadOnly, R::FullyReversible),
        StateDelta::new(D::None, T::CodeExec, R::Partially),
    ];
    let calls = 1_000_000;
    let mut samples = Vec::with_capacity(calls);
    let mut session = monitor.new_session();
    let mut flagged = 0u64;
    for i in 0..calls {
        if i % 16 == 0 {
            session = monitor.new_session();
        }
        let delta = deltas[i % deltas.len()];
        let started = Instant::now();
        let v = monitor.observe(&mut session, delta);
        let elapsed = started.elapsed();
        flagged += u64::from(std::hint::black_box(v).map_err(|e| e.to_string())?.flagged);
        samples.push(elapsed);
    }
    samples.sort_unstable();
    let median = samples[calls / 2];
    check(median < Duration::from_micros(10), format!("median {median:?}"))?;
    Ok(format!("median {median:?} over {calls} calls ({flagged} flagged)"))
}

fn row<'a>(rows: &'a [MonitorRow], name: &str) -> &'a MonitorRow {
    rows.iter().find(|r| r.name == name).expect("monitor row")
}

fn end_to_end() -> Outcome {
    let config = Config::builtin();
    let seed = config.simulation.seed;
    let corpus = simulate_corpus(&config, seed, None).map_err(|e| e.to_string())?;
    let pipeline = run_pipeline(&corpus, &config, seed).map_err(|e| e.to_string())?;
    let markov = MarkovMonitor {
        bank: pipeline.bank.clone(),
    };
    let metadata = ReportMetadata {
        seed,
        corpus_hash: corpus_hash(&corpus),
        config_hash: config.hash().into(),
    };
    let report = evaluate_monitors(&pipeline.test, &[&NoMonitor, &KeywordMonitor, &markov], metadata, false)
        .map_err(|e| e.to_string())?;
    let (m, k, none) = (row(&report.rows, "markov"), row(&report.rows, "keyword"), row(&report.rows, "no_monitor"));
    check(none.detected == 0 && none.false_positives == 0, "no-monitor row is not empty")?;
    check(m.detection_rate > k.detection_rate, format!("detection {} vs keyword {}", m.detection_rate, k.detection_rate))?;
    check(m.fpr < k.fpr, format!("FPR {} vs keyword {}", m.fpr, k.fpr))?;
    let ew = m.mean_early_warning.unwrap_or(0.0);
    check(ew >= 2.0, format!("mean early warning {ew}"))?;

    let thetas: Vec<(Option<Category>, f64)> = pipeline.calibrations.iter().map(|c| (c.category, c.theta)).collect();
    let want_thetas = [
        (Some(Category::DataHandling), 0.60),
        (Some(Category::Sysadmin), 0.95),
        (Some(Category::ResearchComms), 0.85),
        (Some(Category::CodeDebugging), 0.95),
        (None, 0.95),
    ];
    for ((c, got), (wc, want)) in thetas.iter().zip(want_thetas) {
        check(*c == wc && (got - want).abs() < 1e-9, format!("calibrated {c:?} = {got}, golden {want}"))?;
    }
    let goldens = [
        (m.detected, 35),
        (m.violating, 37),
        (m.false_positives, 5),
        (m.safe, 35),
        (k.detected, 20),
        (k.false_positives, 30),
    ];
    for (got, want) in goldens {
        check(got == want, format!("golden mismatch: got {got}, expected {want}"))?;
    }
    check((ew - 36.0 / 7.0).abs() < 1e-9, format!("mean early warning {ew} differs from golden"))?;
    Ok(format!(
        "markov {}/{} FPR {}/{} EW {ew:.2}; keyword {}/{} FPR {}/{}",
        m.detected, m.violating, m.false_positives, m.safe, k.detected, k.violating, k.false_positives, k.safe
    ))
}

fn order_nesting() -> Outcome {
    let config = Config::builtin();
    let mut out = Vec::new();
    for &seed in &config.simulation.seeds {
        let corpus = simulate_corpus(&config, seed, None).map_err(|e| e.to_string())?;
        let pipeline = run_pipeline(&corpus, &config, seed).map_err(|e| e.to_string())?;
        for train in [&pipeline.train[..], &corpus[..]] {
            let rows = markov_order_table(train, &pipeline.test, &[1, 2, 3]).map_err(|e| e.to_string())?;
            let ll: Vec<f64> = rows.iter().map(|r| r.train_log_likelihood).collect();
            check(
                ll.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                format!("seed {seed}: training log-likelihood {ll:?}"),
            )?;
            if train.len() == pipeline.train.len() {
                out.push(format!("{seed}: {:.4}/{:.4}/{:.4}", ll[0], ll[1], ll[2]));
            }
        }
    }
    Ok(out.join(", "))
}

fn sweep_monotone() -> Outcome {
    let config = Config::builtin();
    let seed = config.simulation.seed;
    let corpus = simulate_corpus(&config, seed, None).map_err(|e| e.to_string())?;
    let pipeline = run_pipeline(&corpus, &config, seed).map_err(|e| e.to_string())?;
    let grid = threshold_grid();
    check(grid.len() == 19 && grid[0] == 0.05 && grid[18] == 0.95, "grid is not 0.05..0.95")?;
    for (name, traces) in [("test", &pipeline.test[..]), ("full", &corpus[..])] {
        let curve = threshold_sweep(traces, &pipeline.bank, &grid).map_err(|e| e.to_string())?;
        check(curve.is_monotone(), format!("{name} sweep not monotone:\n{}", curve.to_csv()))?;
    }
    Ok("test split and full corpus, 19 thresholds".into())
}

fn run_cli(args: &[&str], stdin: Option<&str>) -> Result<Vec<u8>, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_driftwatch"))
        .args(args)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    if let Some(text) = stdin {
        use std::io::Write;
        child.stdin.take().unwrap().write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    }
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.map_err(|e| e.to_string())?;
            let bytes = std::fs::read(e.path()).map_err(|e| e.to_string())?;
            Ok((e.file_name().to_string_lossy().into_owned(), bytes))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let corpus = p("corpus.jsonl");
    run_cli(&["simulate", "--seed", "11", "--out", &corpus], None)?;
    let actions = "{\"tool\":\"read_file\",\"resource\":\"/data/customers.csv\"}\n\
                   {\"tool\":\"run_command\"}\n{\"tool\":\"http_request\"}\n{\"tool\":\"send_email\"}\n";

    let stdout_runs: Vec<(&str, Vec<&str>, Option<&str>)> = vec![
        ("simulate", vec!["simulate", "--seed", "11"], None),
        ("simulate --n", vec!["simulate", "--seed", "3", "--n", "50", "--category", "sysadmin"], None),
        ("analyze", vec!["analyze", "--horizon", "10"], None),
        ("calibrate", vec!["calibrate", "--corpus", &corpus, "--seed", "11"], None),
        ("monitor", vec!["monitor", "--theta", "0.4"], Some(actions)),
        ("validate-rules", vec!["validate-rules"], None),
    ];
    let mut checked = Vec::new();
    for (name, args, stdin) in &stdout_runs {
        let a = run_cli(args, *stdin)?;
        let b = run_cli(args, *stdin)?;
        check(!a.is_empty() && a == b, format!("{name} output differs between runs"))?;
        checked.push(*name);
    }
    let dir_runs: Vec<(&str, Vec<&str>)> = vec![
        ("fit", vec!["fit", "--corpus", &corpus, "--seed", "11", "--train-only"]),
        ("analyze --out", vec!["analyze"]),
        ("evaluate", vec!["evaluate", "--corpus", &corpus, "--seed", "11", "--repeats", "5"]),
    ];
    for (i, (name, args)) in dir_runs.iter().enumerate() {
        let mut outputs = Vec::new();
        let out = p(&format!("out-{i}"));
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            let mut full = args.clone();
            full.extend(["--out", &out]);
            let stdout = run_cli(&full, None)?;
            outputs.push((stdout, dir_bytes(Path::new(&out))?));
        }
        check(!outputs[0].1.is_empty() && outputs[0] == outputs[1], format!("{name} outputs differ between runs"))?;
        checked.push(*name);
    }
    Ok(format!("{} invocations byte-identical", checked.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 rule cascade fidelity", rules_fidelity, Duration::from_secs(1)),
        ("2 absorption", absorption, Duration::from_secs(1)),
        ("3 finite horizon", finite_horizon_check, Duration::from_secs(30)),
        ("4 Wilson intervals", wilson, Duration::MAX),
        ("5 estimation round trip", estimation_round_trip, Duration::MAX),
        ("6 monitor cost", monitor_cost, Duration::MAX),
        ("7 end-to-end regime", end_to_end, Duration::from_secs(60)),
        ("8 order nesting", order_nesting, Duration::MAX),
        ("9 sweep monotonicity", sweep_monotone, Duration::MAX),
        ("10 CLI determinism", cli_determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let started = Instant::now();
        let mut outcome = f();
        let elapsed = started.elapsed();
        if outcome.is_ok() && elapsed > budget {
            outcome = Err(format!("took {elapsed:.2?}, budget {budget:?}"));
        }
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    println!("{} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
