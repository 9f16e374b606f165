//! `bar`: train toy source models, reprogram them through a metered
//! prediction oracle, check gradients, and serve a stub oracle.
//!
//! Every command writes machine-readable JSON. Exit codes: 0 success,
//! 1 failed check, 2 usage or configuration error, 3 query budget
//! exhausted, 4 oracle transport failure, 5 numeric failure.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bar_core::dataio::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticTaskSpec};
use bar_core::experiment::{MappingKind, ToyTask, ToyTaskConfig};
use bar_core::gradcheck::{run_grad_check, GradCheckConfig, GradCheckReport, ReprogrammingProblem};
use bar_core::mapping::{frequency_mapping, random_mapping, LabelMapping};
use bar_core::oracle::server::{serve, ServerConfig};
use bar_core::oracle::{Budget, HttpBackend, HttpConfig, LocalBackend, Oracle, QueryLedger, ScoreAdapter};
use bar_core::program::CenteredLayout;
use bar_core::toymodel::{train_source, Mlp, SourceTraining, SourceTrainingReport};
use bar_core::trainer::{frequency_table_pass, train_ar_whitebox, train_bar, EmbeddedSet, Mode, TrainConfig, TrainReport};
use bar_core::Error;

const SCHEMA_VERSION: u32 = 1;
const MODEL_FILE: &str = "model.bin";
const REPORT_FILE: &str = "report.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "bar", version, about = "Black-box adversarial reprogramming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a source classifier and write its model file.
    TrainSource(TrainSourceArgs),
    /// Learn an adversarial program and label mapping for a target task.
    Reprogram(ReprogramArgs),
    /// Run the gradient checks and report per-check numerics.
    GradCheck(GradCheckArgs),
    /// Serve a model file over the oracle HTTP protocol.
    ServeStub(ServeArgs),
    /// Summarize a reprogramming report.
    Report(ReportArgs),
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::BudgetExceeded { .. } => 3,
        Error::Transport(_) | Error::Remote { .. } => 4,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 5,
        Error::Config(_) | Error::Input(_) | Error::Capacity { .. } | Error::Embedding(_) => 2,
        Error::Contract(_) | Error::Io(_) | Error::Json(_) => 1,
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Self { code: exit_code(&err), message: err.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Error::from(err).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(err: serde_json::Error) -> Self {
        Error::from(err).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid JSON in {}: {e}", path.display())))
}

fn load_data(path: &Path) -> std::result::Result<Dataset, Failure> {
    if !path.join(bar_core::dataio::MANIFEST_FILE).is_file() {
        return Err(Failure::usage(format!("no dataset at {}", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn load_model(path: &Path) -> std::result::Result<Mlp, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("no model file at {}", path.display())));
    }
    Ok(Mlp::load(path)?)
}

fn square_side(dims: usize, what: &str) -> std::result::Result<usize, Failure> {
    let side = (dims as f64).sqrt().round() as usize;
    if side * side != dims {
        return Err(Failure::usage(format!("{what} has {dims} values, not a square image")));
    }
    Ok(side)
}

// gen-data

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskKind {
    /// Ten blob positions on a square canvas.
    Source,
    /// Horizontal against vertical bars on an 8 × 8 patch.
    Target,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: TaskKind,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Canvas side of the source task.
    #[arg(long, default_value_t = 16)]
    side: usize,
    /// Target task difficulty in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    difficulty: f64,
    /// Also write a stratified split: this fraction to `train/`, the rest to `test/`.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let spec = match args.task {
        TaskKind::Source => SyntheticTaskSpec::source_task_on(args.side, args.per_class, args.seed),
        TaskKind::Target => SyntheticTaskSpec::target_task(args.per_class, args.difficulty, args.seed),
    };
    let data = generate_synthetic(&spec)?;
    match args.split {
        None => save_dataset(&data, &args.out)?,
        Some(fraction) => {
            let (train, test) = data.split(fraction, args.seed)?;
            save_dataset(&train, args.out.join("train"))?;
            save_dataset(&test, args.out.join("test"))?;
        }
    }
    log::info!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

// train-source

#[derive(Args)]
struct TrainSourceArgs {
    /// Dataset directory; without it the synthetic source task is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "256,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.95)]
    target_accuracy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct SourceMetrics {
    schema_version: u32,
    layers: Vec<usize>,
    samples: usize,
    training: SourceTraining,
    report: SourceTrainingReport,
}

fn cmd_train_source(args: TrainSourceArgs) -> CmdResult {
    let data = match &args.data {
        Some(path) => load_data(path)?,
        None => generate_synthetic(&SyntheticTaskSpec::source_task_on(args.side, args.per_class, args.seed))?,
    };
    let mut sizes = vec![data.dims()];
    sizes.extend(&args.hidden);
    sizes.push(data.classes());
    let training = SourceTraining {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch: args.batch,
        target_accuracy: args.target_accuracy,
        seed: args.seed,
    };
    let mut model = Mlp::random(&sizes, args.seed)?;
    let report = train_source(&mut model, data.samples(), data.labels(), &training)?;
    fs::create_dir_all(&args.out)?;
    model.save(args.out.join(MODEL_FILE))?;
    let metrics = SourceMetrics { schema_version: SCHEMA_VERSION, layers: sizes, samples: data.len(), training, report };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics)?);
    if !metrics.report.reached_target {
        log::warn!(
            "training accuracy {:.4} below target {}",
            metrics.report.train_accuracy,
            args.target_accuracy
        );
    }
    Ok(())
}

// reprogram

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum OracleKind {
    Local,
    Http,
}

/// Everything a reprogramming run depends on. The config file is this
/// document as flat JSON; flags override it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    mode: Mode,
    oracle: OracleKind,
    endpoint: Option<String>,
    mapping: MappingKind,
    /// Source labels per target label.
    m: usize,
    budget_queries: Option<u64>,
    budget_dollars: Option<f64>,
    unit_cost: f64,
    #[serde(flatten)]
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Blackbox,
            oracle: OracleKind::Local,
            endpoint: None,
            mapping: MappingKind::Frequency,
            m: 3,
            budget_queries: None,
            budget_dollars: None,
            unit_cost: 0.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Blackbox,
    Whitebox,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MappingArg {
    Random,
    Frequency,
}

#[derive(Args)]
struct ReprogramArgs {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source model file; required unless the oracle is remote and the mode black-box.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Target training dataset directory.
    #[arg(long)]
    train: PathBuf,
    /// Target test dataset directory; the training set is scored without it.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    oracle: Option<OracleKind>,
    /// Oracle base URL; defaults to $BAR_ORACLE_URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    mapping: Option<MappingArg>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    budget_queries: Option<u64>,
    #[arg(long)]
    budget_dollars: Option<f64>,
    /// Dollars per query.
    #[arg(long)]
    unit_cost: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report and effective config.
    #[arg(long)]
    out: PathBuf,
}

impl ReprogramArgs {
    fn effective_config(&self) -> std::result::Result<RunConfig, Failure> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = match mode {
                ModeArg::Blackbox => Mode::Blackbox,
                ModeArg::Whitebox => Mode::Whitebox,
            };
        }
        if let Some(mapping) = self.mapping {
            cfg.mapping = match mapping {
                MappingArg::Random => MappingKind::Random,
                MappingArg::Frequency => MappingKind::Frequency,
            };
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            oracle => cfg.oracle,
            q => cfg.train.directions,
            m => cfg.m,
            eta => cfg.train.eta,
            iters => cfg.train.iterations,
            batch => cfg.train.batch,
            beta => cfg.train.beta,
            gamma => cfg.train.gamma,
            unit_cost => cfg.unit_cost,
            seed => cfg.train.seed,
        }
        if self.endpoint.is_some() {
            cfg.endpoint = self.endpoint.clone();
        }
        if self.budget_queries.is_some() {
            cfg.budget_queries = self.budget_queries;
        }
        if self.budget_dollars.is_some() {
            cfg.budget_dollars = self.budget_dollars;
        }
        cfg.train.validate()?;
        if cfg.train.directions == 0 {
            return Err(Failure::usage("--q must be positive"));
        }
        Ok(cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct RunReport {
    schema_version: u32,
    status: RunStatus,
    error: Option<String>,
    report: TrainReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RunStatus {
    Completed,
    Aborted,
}

fn build_oracle(cfg: &RunConfig, model: Option<&Arc<Mlp>>) -> std::result::Result<Oracle, Failure> {
    let budget = Budget { max_queries: cfg.budget_queries, max_dollars: cfg.budget_dollars };
    let ledger = QueryLedger::new(cfg.unit_cost, budget)?;
    match cfg.oracle {
        OracleKind::Local => {
            let model = model.ok_or_else(|| Failure::usage("--model is required with a local oracle"))?;
            Ok(Oracle::new(LocalBackend::new(Arc::clone(model)), ScoreAdapter::Identity, ledger))
        }
        OracleKind::Http => {
            let http = match &cfg.endpoint {
                Some(url) => HttpConfig::new(url.clone()),
                None => HttpConfig::from_env().map_err(|e| Failure::usage(e.to_string()))?,
            };
            Ok(Oracle::new(HttpBackend::connect(http)?, ScoreAdapter::Identity, ledger))
        }
    }
}

fn cmd_reprogram(args: ReprogramArgs) -> CmdResult {
    let cfg = args.effective_config()?;
    let model = match &args.model {
        Some(path) => Some(Arc::new(load_model(path)?)),
        None if cfg.mode == Mode::Whitebox => {
            return Err(Failure::usage("--model is required in white-box mode"));
        }
        None => None,
    };
    let train_data = load_data(&args.train)?;
    let test_data = args.test.as_deref().map(load_data).transpose()?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join(CONFIG_FILE), &cfg)?;

    let oracle = build_oracle(&cfg, model.as_ref())?;
    let canvas = square_side(oracle.input_dims(), "the oracle input")?;
    let patch = square_side(train_data.dims(), "a target sample")?;
    let layout = CenteredLayout::square(canvas, patch, 1);
    let train = EmbeddedSet::new(&train_data, &layout)?;
    let eval = match &test_data {
        Some(data) => EmbeddedSet::new(data, &layout)?,
        None => train.clone(),
    };

    let mapping: LabelMapping = match cfg.mapping {
        MappingKind::Random => random_mapping(oracle.classes(), train.classes(), cfg.m, cfg.train.seed)?,
        MappingKind::Frequency => frequency_mapping(&frequency_table_pass(&train, &oracle)?, cfg.m)?,
    };
    let outcome = match cfg.mode {
        Mode::Blackbox => train_bar(&cfg.train, &train, Some(&eval), &oracle, &mapping),
        Mode::Whitebox => {
            let model = model.expect("checked above");
            train_ar_whitebox(&cfg.train, &train, Some(&eval), model, &mapping)
        }
    };
    let (run, failure) = match outcome {
        Ok(mut report) => {
            if cfg.mode == Mode::Whitebox {
                // the frequency pass, if any, went through the metered oracle
                report.ledger = merge_ledgers(&oracle, report.ledger);
            }
            (RunReport { schema_version: SCHEMA_VERSION, status: RunStatus::Completed, error: None, report }, None)
        }
        Err(abort) => {
            let message = abort.error.to_string();
            let run = RunReport {
                schema_version: SCHEMA_VERSION,
                status: RunStatus::Aborted,
                error: Some(message),
                report: abort.partial,
            };
            (run, Some(Failure::from(abort.error)))
        }
    };
    write_json(&args.out.join(REPORT_FILE), &run)?;
    println!("{}", summary(&run));
    failure.map_or(Ok(()), Err)
}

fn merge_ledgers(oracle: &Oracle, local: bar_core::oracle::LedgerSnapshot) -> bar_core::oracle::LedgerSnapshot {
    let mut merged = oracle.ledger().snapshot();
    for item in local.itemized {
        merged.count += item.count;
        match merged.itemized.iter_mut().find(|i| i.tag == item.tag) {
            Some(existing) => existing.count += item.count,
            None => merged.itemized.push(item),
        }
    }
    merged.dollars = merged.count as f64 * merged.unit_cost;
    merged
}

fn summary(run: &RunReport) -> String {
    let r = &run.report;
    let mut lines = vec![format!(
        "{:?} run {:?}: {} of {} iterations",
        r.mode, run.status, r.iterations_completed, r.config.iterations
    )];
    if let Some(err) = &run.error {
        lines.push(format!("error: {err}"));
    }
    if let (Some(first), Some(last)) = (r.loss_history.first(), r.loss_history.last()) {
        lines.push(format!("loss: {first:.6} -> {last:.6}"));
    }
    if let Some(m) = &r.metrics {
        lines.push(format!("accuracy: {:.4}", m.accuracy));
        if let (Some(se), Some(sp)) = (m.sensitivity, m.specificity) {
            lines.push(format!("sensitivity: {se:.4}  specificity: {sp:.4}"));
        }
    }
    lines.push(format!("queries: {}  cost: ${:.4}", r.ledger.count, r.ledger.dollars));
    for item in &r.ledger.itemized {
        lines.push(format!("  {}: {}", item.tag, item.count));
    }
    lines.join("\n")
}

// grad-check

#[derive(Args)]
struct GradCheckArgs {
    /// JSON check configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source model for the cosine check; without it a toy task is built.
    #[arg(long, requires = "train")]
    model: Option<PathBuf>,
    /// Target dataset for the cosine check.
    #[arg(long, requires = "model")]
    train: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the cosine-trend check.
    #[arg(long)]
    no_cosine: bool,
    /// Negate every zeroth-order estimate (negative control).
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_grad_check(args: GradCheckArgs) -> CmdResult {
    let mut cfg: GradCheckConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => GradCheckConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.sign_flip |= args.inject_sign_flip;

    let report: GradCheckReport = if args.no_cosine {
        run_grad_check(&cfg, None)?
    } else {
        let (model, set, classes) = match (&args.model, &args.train) {
            (Some(model), Some(train)) => {
                let model = Arc::new(load_model(model)?);
                let data = load_data(train)?;
                let layout = CenteredLayout::square(
                    square_side(model.input_dims(), "the model input")?,
                    square_side(data.dims(), "a target sample")?,
                    1,
                );
                (model, EmbeddedSet::new(&data, &layout)?, data.classes())
            }
            _ => {
                let task = ToyTask::build(&ToyTaskConfig { seed: cfg.seed, ..Default::default() })?;
                let classes = task.train.classes();
                (task.model, task.train, classes)
            }
        };
        let oracle = Oracle::local(Arc::clone(&model));
        let mapping = random_mapping(model.classes(), classes, 1, cfg.seed)?;
        let loss = TrainConfig::default().loss_config(set.labels(), classes)?;
        let problem = ReprogrammingProblem { model: &model, oracle: &oracle, set: &set, mapping: &mapping, loss: &loss };
        run_grad_check(&cfg, Some(&problem))?
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, &json)?;
    }
    println!("{json}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "gradient checks failed".into() })
    }
}

// serve-stub

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = 64)]
    max_batch: usize,
}

fn cmd_serve_stub(args: ServeArgs) -> CmdResult {
    let model = Arc::new(load_model(&args.model)?);
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| Failure::usage(format!("bad listen address: {e}")))?;
    if args.max_batch == 0 {
        return Err(Failure::usage("--max-batch must be positive"));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let served = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        // the bound address goes to stdout so callers can use port 0
        println!("listening on http://{}", listener.local_addr()?);
        serve(listener, model, ServerConfig { max_batch: args.max_batch }, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
    })?;
    log::info!("served {served} queries");
    println!("served {served} queries");
    Ok(())
}

// report

#[derive(Args)]
struct ReportArgs {
    /// A report file or a run output directory.
    path: PathBuf,
    /// Print the full report as JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let path = if args.path.is_dir() { args.path.join(REPORT_FILE) } else { args.path };
    let run: RunReport = read_json(&path)?;
    if run.schema_version != SCHEMA_VERSION {
        return Err(Failure::usage(format!("unsupported report schema version {}", run.schema_version)));
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&run)?);
    } else {
        println!("{}", summary(&run));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::TrainSource(args) => cmd_train_source(args),
        Command::Reprogram(args) => cmd_reprogram(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::ServeStub(args) => cmd_serve_stub(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
