use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use driftwatch::analysis::{absorption_report, decompose, finite_horizon, points_of_no_return};
use driftwatch::classify::ActionRecord;
use driftwatch::config::Config;
use driftwatch::estimate::{count_transitions, estimate_matrix, split_train_test, TransitionMatrix};
use driftwatch::eval::{self, KeywordMonitor, MarkovMonitor, NoMonitor, ReportMetadata, TraceMonitor};
use driftwatch::matrix_io::{read_matrix, write_matrix};
use driftwatch::monitor::{InterventionMode, Monitor, MonitorConfig};
use driftwatch::sim::simulate_corpus;
use driftwatch::state::{DataExposure, Reversibility, RiskLevel, SafetyState, ToolEscalation};
use driftwatch::trace::{corpus_hash, read_traces, write_traces_to, Category, Trace};
use driftwatch::Error;

#[derive(Parser)]
#[command(name = "driftwatch", version, about = "Drift analysis and runtime monitoring for agent traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled trace corpus.
    Simulate(SimulateArgs),
    /// Fit aggregate and per-category transition matrices.
    Fit(FitArgs),
    /// Absorption analysis, horizon curves and points of no return.
    Analyze(AnalyzeArgs),
    /// Calibrate per-category thresholds on the training split.
    Calibrate(CalibrateArgs),
    /// Stream verdicts for actions read from stdin, one JSON object per line.
    Monitor(MonitorArgs),
    /// Compare monitors and write evaluation tables.
    Evaluate(EvaluateArgs),
    /// Dump the rule cascade over all 60 states and check monotonicity.
    ValidateRules(ValidateArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML config; the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> driftwatch::Result<Config> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::builtin()),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Total traces, apportioned over scenarios by their run counts.
    #[arg(long)]
    n: Option<usize>,
    /// Only simulate this category.
    #[arg(long)]
    category: Option<Category>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Trace corpus (JSON lines); simulated from the config when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl CorpusArgs {
    fn load(&self) -> driftwatch::Result<(Config, Vec<Trace>, u64)> {
        let config = self.config.load()?;
        let seed = self.seed.unwrap_or(config.simulation.seed);
        let corpus = match &self.corpus {
            Some(p) => read_traces(p, &config.labeler())?,
            None => simulate_corpus(&config, seed, None)?,
        };
        Ok((config, corpus, seed))
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Add-alpha smoothing; the config value when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fit on the training split only.
    #[arg(long)]
    train_only: bool,
    /// Output directory for `aggregate.json` and `<category>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Matrix file, or `appendixB` for the built-in reference matrix.
    #[arg(long, default_value = "appendixB")]
    matrix: PathBuf,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    /// Point-of-no-return threshold.
    #[arg(long, default_value_t = eval::PONR_THETA)]
    theta: f64,
    /// Output directory; everything goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    fpr_budget: Option<f64>,
    /// Calibrate this category alone against its own FPR budget.
    #[arg(long)]
    category: Option<Category>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Matrix file, or `appendixB`.
    #[arg(long, default_value = "appendixB")]
    matrix: PathBuf,
    /// Category label echoed into the session; defaults to the matrix's own.
    #[arg(long)]
    category: Option<Category>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long)]
    mode: Option<InterventionMode>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    fpr_budget: Option<f64>,
    /// Repeats per learning-curve size.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Measure wall-clock time per step (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Rule table TOML (`[[rules]]` entries); the config's rules when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Analyze(a) => analyze(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Monitor(a) => monitor(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ValidateRules(a) => validate_rules(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CmdResult = driftwatch::Result<ExitCode>;

fn emit(out: Option<&Path>, text: &str) -> driftwatch::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn io_error(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> driftwatch::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let mut config = a.config.load()?;
    if let Some(c) = a.category {
        if !config.categories.contains_key(&c) {
            return Err(Error::InvalidConfig(format!("category `{c}` is not configured")));
        }
        config.categories.retain(|k, _| *k == c);
    }
    let seed = a.seed.unwrap_or(config.simulation.seed);
    let corpus = simulate_corpus(&config, seed, a.n)?;
    let mut buf = Vec::new();
    write_traces_to(&corpus, &mut buf).expect("write to Vec");
    emit(a.out.as_deref(), std::str::from_utf8(&buf).expect("UTF-8"))?;
    Ok(ExitCode::SUCCESS)
}

fn fit(a: FitArgs) -> CmdResult {
    let (config, corpus, seed) = a.corpus.load()?;
    let alpha = a.alpha.unwrap_or(config.monitor.alpha);
    let corpus = if a.train_only {
        split_train_test(&corpus, config.monitor.train_ratio, seed)?.0
    } else {
        corpus
    };
    let fit_one = |category: Option<Category>| -> driftwatch::Result<TransitionMatrix> {
        let seqs: Vec<Vec<RiskLevel>> = corpus
            .iter()
            .filter(|t| category.is_none_or(|c| t.category == c))
            .map(|t| t.level_sequence())
            .collect();
        Ok(estimate_matrix(&count_transitions(&seqs, a.order)?, alpha)?.with_category(category))
    };
    ensure_dir(&a.out)?;
    let mut summary = String::from("matrix,order,transitions,file\n");
    let aggregate = fit_one(None)?;
    let mut outputs = vec![("aggregate".to_string(), aggregate)];
    for c in Category::ALL {
        match fit_one(Some(c)) {
            Ok(m) => outputs.push((c.name().to_string(), m)),
            Err(Error::EmptyCorpus) => {}
            Err(e) => return Err(e),
        }
    }
    for (name, m) in &outputs {
        let path = a.out.join(format!("{name}.json"));
        write_matrix(m, &path)?;
        let total = m.counts().map_or(0, |c| c.total);
        let _ = writeln!(summary, "{name},{},{total},{}", m.order(), path.display());
    }
    emit(None, &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
}

fn analyze(a: AnalyzeArgs) -> CmdResult {
    let m = read_matrix(&a.matrix)?;
    let curve = finite_horizon(&m, a.horizon)?;
    let ponr = points_of_no_return(&m, a.horizon, a.theta)?;

    let mut absorption = String::from("level,absorption,mean_steps,n_safe,n_mild,n_elevated,n_critical\n");
    match decompose(&m).and_then(|d| absorption_report(&d)) {
        Ok(r) => {
            for (i, level) in RiskLevel::TRANSIENT.iter().enumerate() {
                let _ = writeln!(
                    absorption,
                    "{level},{:.6},{:.6},{}",
                    r.absorption[i],
                    r.mean_steps[i],
                    fmt_row(&r.fundamental[i])
                );
            }
        }
        Err(e @ Error::SingularChain(_)) => {
            let _ = writeln!(absorption, "# not computed: {e}");
        }
        Err(e) => return Err(e),
    }
    let mut ponr_text = format!("horizon,theta,points_of_no_return\n{},{},", a.horizon, a.theta);
    ponr_text.push_str(&ponr.iter().map(|l| l.name()).collect::<Vec<_>>().join(";"));
    ponr_text.push('\n');

    match &a.out {
        Some(dir) => {
            ensure_dir(dir)?;
            emit(Some(&dir.join("absorption.csv")), &absorption)?;
            emit(Some(&dir.join("horizon.csv")), &curve.to_csv())?;
            emit(Some(&dir.join("ponr.csv")), &ponr_text)?;
        }
        None => emit(None, &format!("{absorption}\n{}\n{ponr_text}", curve.to_csv()))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn with_overrides(mut config: Config, horizon: Option<usize>, budget: Option<f64>) -> driftwatch::Result<Config> {
    if let Some(h) = horizon {
        if h == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        config.monitor.horizon = h;
    }
    if let Some(b) = budget {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidConfig(format!("fpr budget must be in [0, 1], got {b}")));
        }
        config.monitor.fpr_budget = b;
    }
    Ok(config)
}

fn calibrate(a: CalibrateArgs) -> CmdResult {
    let (config, corpus, seed) = a.corpus.load()?;
    let config = with_overrides(config, a.horizon, a.fpr_budget)?;
    let (train, _) = split_train_test(&corpus, config.monitor.train_ratio, seed)?;
    let calibrations = match a.category {
        Some(c) => {
            let m = eval::fit_category(&train, Some(c), config.monitor.alpha)?;
            let monitor = eval::monitor_for(&config, m, 0.5)?;
            vec![eval::calibrate_threshold(&train, Some(c), &monitor, config.monitor.fpr_budget)?]
        }
        None => eval::fit_and_calibrate(&train, &config)?.calibrations,
    };
    emit(a.out.as_deref(), &eval::calibrations_csv(&calibrations))?;
    Ok(ExitCode::SUCCESS)
}

fn monitor(a: MonitorArgs) -> CmdResult {
    let config = a.config.load()?;
    let matrix = read_matrix(&a.matrix)?;
    let category = a.category.or(matrix.category);
    let mut mc = MonitorConfig::new(matrix, a.theta)
        .with_horizon(a.horizon.unwrap_or(config.monitor.horizon))
        .with_mode(a.mode.unwrap_or(config.monitor.mode))
        .with_policy(config.policy);
    mc.category = category;
    mc.cascade = config.rules.clone();
    let monitor = Monitor::new(mc)?;
    let classifier = config.classifier();
    let mut session = monitor.new_session();

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let source = Path::new("<stdin>");
    for (i, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(|e| io_error(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let data_error = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message,
        };
        let action: ActionRecord = serde_json::from_str(&line).map_err(|e| data_error(e.to_string()))?;
        let c = classifier.classify(&action).map_err(|e| data_error(e.to_string()))?;
        let v = monitor.observe(&mut session, c.delta)?;
        let verdict = VerdictLine {
            step: v.step,
            tool: &action.tool,
            category,
            probability: v.probability,
            flagged: v.flagged,
            level: v.level,
            already_violated: v.already_violated,
            mode: v.mode,
            state: StateLine {
                d: v.state.data,
                t_esc: v.state.tools,
                r: v.state.reversibility,
            },
        };
        let verdict = serde_json::to_string(&verdict).expect("verdict serializes");
        writeln!(stdout, "{verdict}")
            .and_then(|_| stdout.flush())
            .map_err(|e| io_error(Path::new("<stdout>"), e))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StateLine {
    d: DataExposure,
    t_esc: ToolEscalation,
    r: Reversibility,
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    step: u64,
    tool: &'a str,
    category: Option<Category>,
    probability: f64,
    flagged: bool,
    level: RiskLevel,
    already_violated: bool,
    mode: InterventionMode,
    state: StateLine,
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let (config, corpus, seed) = a.corpus.load()?;
    let config = with_overrides(config, a.horizon, a.fpr_budget)?;
    let pipeline = eval::run_pipeline(&corpus, &config, seed)?;
    let metadata = ReportMetadata {
        seed,
        corpus_hash: corpus_hash(&corpus),
        config_hash: config.hash().to_string(),
    };
    let markov = MarkovMonitor {
        bank: pipeline.bank.clone(),
    };
    let monitors: [&dyn TraceMonitor; 3] = [&NoMonitor, &KeywordMonitor, &markov];
    let report = eval::evaluate_monitors(&pipeline.test, &monitors, metadata.clone(), a.timing)?;
    let sweep = eval::threshold_sweep(&pipeline.test, &pipeline.bank, &eval::threshold_grid())?;
    let orders = eval::markov_order_table(&pipeline.train, &pipeline.test, &[1, 2, 3])?;
    let table = config.rules.table();
    let ablation = eval::ablation_table(&pipeline.train, &pipeline.test, &table)?;
    let n_train = pipeline.train.len();
    let sizes: Vec<usize> = [5, 10, 20, 50, 100, 200]
        .into_iter()
        .filter(|n| *n < n_train)
        .chain(std::iter::once(n_train))
        .collect();
    let curve = eval::learning_curve(&pipeline.train, &pipeline.test, &sizes, a.repeats, seed)?;
    let categories = eval::category_table(&corpus, config.monitor.horizon, eval::PONR_THETA)?;

    ensure_dir(&a.out)?;
    let files = [
        ("report.csv", report.to_csv()),
        ("report.txt", report.to_text()),
        ("early_warning.csv", report.early_warning_csv()),
        ("calibration.csv", eval::calibrations_csv(&pipeline.calibrations)),
        ("sweep.csv", sweep.to_csv()),
        ("orders.csv", eval::order_table_csv(&orders)),
        ("ablation.csv", eval::ablation_csv(&ablation)),
        ("learning_curve.csv", eval::learning_curve_csv(&curve)),
        ("categories.csv", eval::category_table_csv(&categories)),
        (
            "metadata.json",
            serde_json::to_string_pretty(&metadata).expect("metadata serializes") + "\n",
        ),
    ];
    for (name, text) in &files {
        emit(Some(&a.out.join(name)), text)?;
    }
    emit(None, &report.to_text())?;
    Ok(ExitCode::SUCCESS)
}

fn validate_rules(a: ValidateArgs) -> CmdResult {
    let config = a.config.load()?;
    let cascade = match &a.rules {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            driftwatch::rules::RuleCascade::from_toml_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => config.rules.clone(),
    };
    let mut out = String::from("index,d,t_esc,r,level,rule\n");
    for s in SafetyState::all() {
        let m = cascade.matching_rule(s);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.index(),
            s.data,
            s.tools,
            s.reversibility,
            m.level,
            m.rule
        );
    }
    let violations = cascade.monotonicity_violations();
    let _ = writeln!(out, "# monotonicity_violations={}", violations.len());
    for v in &violations {
        let _ = writeln!(
            out,
            "# raising {} from {} ({}) to {} ({})",
            v.dimension.name(),
            v.lower,
            v.lower_level,
            v.raised,
            v.raised_level
        );
    }
    emit(a.out.as_deref(), &out)?;
    if violations.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: rule table is not monotone ({} violations)", violations.len());
        Ok(ExitCode::from(2))
    }
}
