//! Command-line front end: data generation, training, hybrid solving,
//! speedup reports and the invariant suite.

// `!(x >= 0.0)` rejects NaN along with negatives; that is the intent everywhere.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certdispatch::cases;
use certdispatch::ed_model::EDInstance;
use certdispatch::grid::{Grid, GridError, Network};
use certdispatch::hybrid::{self, TimingModel, DEFAULT_WORKERS};
use certdispatch::training::{self, Checkpoint, SamplerConfig, TrainConfig, TrainError};

mod verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Invariant(String),
    Solver(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Invariant(m) | CliError::Solver(m) => m,
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::ZeroReference => CliError::Usage(e.to_string()),
            TrainError::Io(_) | TrainError::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Parser, Debug)]
#[command(name = "certdispatch", version, about = "Certified primal-dual proxies for DC economic dispatch")]
struct Cli {
    /// Summary output format.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample demand instances into a CSV file.
    Datagen(DatagenArgs),
    /// Train primal and dual proxies; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Run the hybrid solver over a batch; writes per-sample results.
    Solve(SolveArgs),
    /// Speedup curve (CSV and SVG) from per-sample results.
    Report(ReportArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    /// Built-in case name or path to a case file.
    #[arg(long, default_value = "toy14")]
    case: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "toy14")]
    case: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hinge target; 0 trains on the plain gap.
    #[arg(long)]
    eps_target: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with a .log.csv suffix.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    model: PathBuf,
    /// Instance CSV; when absent, --n instances are sampled with --seed.
    #[arg(long)]
    demands: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Must match the model's case when given.
    #[arg(long)]
    case: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Per-sample CSV written by `solve`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    workers: usize,
    /// Extra tolerance to include in the grid and summarise.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Curve CSV path.
    #[arg(long)]
    out: PathBuf,
    /// SVG plot path; defaults to the curve path with an .svg extension.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value = "toy14")]
    case: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instances per check.
    #[arg(long, default_value_t = 200)]
    n: usize,
}

/// Parse `argv` (program name first) and run one subcommand.
pub fn run<I, S>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return CommandResult {
                exit_code: code,
                artifacts: vec![],
                summary: e.to_string(),
            };
        }
    };
    let name = match &cli.command {
        Command::Datagen(_) => "datagen",
        Command::Train(_) => "train",
        Command::Solve(_) => "solve",
        Command::Report(_) => "report",
        Command::Verify(_) => "verify",
    };
    let outcome = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Solve(a) => solve(a),
        Command::Report(a) => report(a),
        Command::Verify(a) => verify::run(&a.case, a.seed, a.n).map_err(CliError::Invariant).and_then(|(ok, text)| {
            if ok {
                Ok((vec![], text))
            } else {
                Err(CliError::Invariant(text))
            }
        }),
    };
    let (exit_code, artifacts, text) = match outcome {
        Ok((artifacts, text)) => (EXIT_OK, artifacts, text),
        Err(e) => (e.code(), vec![], e.message().to_string()),
    };
    let summary = match cli.format {
        Format::Text => text,
        Format::Json => serde_json::json!({
            "command": name,
            "exit_code": exit_code,
            "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "summary": text,
        })
        .to_string(),
    };
    CommandResult {
        exit_code,
        artifacts,
        summary,
    }
}

type Outcome = Result<(Vec<PathBuf>, String), CliError>;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_case(case: &str) -> Result<Grid, CliError> {
    cases::load(case).map_err(|e| CliError::Io(format!("case {case}: {e}")))
}

fn network(grid: Grid) -> Result<Arc<Network>, CliError> {
    Ok(Arc::new(Network::new(grid)?))
}

fn instance_header(grid: &Grid) -> Vec<String> {
    grid.loads.iter().enumerate().map(|(k, l)| format!("d{k}_bus{}", l.bus)).collect()
}

/// Instance file: header row, then one demand vector per row.
fn write_instances(path: &Path, grid: &Grid, instances: &[EDInstance]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(instance_header(grid)).map_err(io)?;
    for inst in instances {
        w.write_record(inst.pd.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

fn read_instances(path: &Path, net: &Arc<Network>) -> Result<Vec<EDInstance>, CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header = r.headers().map_err(io)?.len();
    if header != net.n_loads() {
        return Err(CliError::Io(format!(
            "{}: {header} demand columns, case has {} loads",
            path.display(),
            net.n_loads()
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(io)?;
        let pd = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Io(format!("{} row {}: {e}", path.display(), k + 2)))?;
        let inst = EDInstance::new(net.clone(), pd)
            .map_err(|e| CliError::Io(format!("{} row {}: {e}", path.display(), k + 2)))?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("{}: no instances", path.display())));
    }
    Ok(out)
}

fn datagen(a: DatagenArgs) -> Outcome {
    let grid = load_case(&a.case)?;
    let net = network(grid.clone())?;
    let instances = training::sample_demands(&net, &SamplerConfig::default(), a.n, a.seed)?;
    write_instances(&a.out, &grid, &instances)?;
    let totals: Vec<f64> = instances.iter().map(|i| i.total_demand()).collect();
    let lo = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = totals.iter().cloned().fold(0.0, f64::max);
    Ok((
        vec![a.out.clone()],
        format!("wrote {} instances to {} (total demand {lo:.1} to {hi:.1})", a.n, a.out.display()),
    ))
}

fn train(a: TrainArgs) -> Outcome {
    let grid = load_case(&a.case)?;
    let net = network(grid)?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<TrainConfig>(&read(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.eps_target {
        cfg.eps_target = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.samples_per_epoch {
        cfg.train_samples_per_epoch = v;
    }
    if let Some(v) = a.val_samples {
        cfg.val_samples = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_init = v;
        cfg.lr_floor = cfg.lr_floor.min(v);
    }
    if let Some(v) = a.patience {
        cfg.patience_epochs = v;
    }
    cfg.validate()?;
    let log_path = a.log.unwrap_or_else(|| suffixed(&a.out, ".log.csv"));
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let outcome = match training::train_joint(net, &cfg, Some(&mut log)) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, last_good }) => {
            if let Some(ck) = last_good {
                ck.save(&a.out)?;
            }
            return Err(CliError::Invariant(format!(
                "training diverged at epoch {epoch}; last good checkpoint written to {}",
                a.out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(&a.out)?;
    let first = outcome.history.first().map_or(f64::NAN, |r| r.val_gap);
    let best = outcome.checkpoint.best_val_gap.unwrap_or(f64::INFINITY);
    Ok((
        vec![a.out.clone(), log_path],
        format!(
            "trained {} epochs: validation gap {:.4}% at epoch 1, best {:.4}% at epoch {}",
            cfg.epochs,
            100.0 * first,
            100.0 * best,
            outcome.checkpoint.best_epoch
        ),
    ))
}

fn in_file(path: &Path, e: CliError) -> CliError {
    let msg = format!("{}: {}", path.display(), e.message());
    match e {
        CliError::Usage(_) => CliError::Usage(msg),
        CliError::Io(_) => CliError::Io(msg),
        CliError::Invariant(_) => CliError::Invariant(msg),
        CliError::Solver(_) => CliError::Solver(msg),
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn solve(a: SolveArgs) -> Outcome {
    let ck = Checkpoint::load(&a.model).map_err(|e| in_file(&a.model, e.into()))?;
    if let Some(case) = &a.case {
        if load_case(case)? != ck.grid {
            return Err(CliError::Usage(format!("model was trained on a different case than {case}")));
        }
    }
    let net = network(ck.grid.clone())?;
    let instances = match &a.demands {
        Some(p) => read_instances(p, &net)?,
        None => training::sample_demands(&net, &ck.config.sampler, a.n, a.seed)?,
    };
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    if !(a.epsilon >= 0.0) {
        return Err(CliError::Usage("--epsilon must be nonnegative".into()));
    }
    let proxies = ck.inference_proxies();
    let ev = hybrid::evaluate_batch(&instances, &proxies, &TimingModel::Measured)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let report = ev.report(a.epsilon, a.workers).map_err(|e| CliError::Usage(e.to_string()))?;
    if report.instances.len() != instances.len() {
        return Err(CliError::Invariant("result rows do not match batch size".into()));
    }
    // every returned pair must carry its guarantee
    for i in 0..instances.len() {
        let s = ev.solution(&instances, i, a.epsilon);
        let ok = match s.source {
            hybrid::Source::Proxy => s.norm_gap.is_some_and(|g| g <= a.epsilon),
            hybrid::Source::Fallback => s.gap.abs() <= 1e-7 * s.gap.abs().max(ev.solutions[i].objective.abs()).max(1.0),
        };
        if !ok {
            return Err(CliError::Invariant(format!("instance {i}: returned pair violates its certificate")));
        }
    }
    write(&a.out, &hybrid::samples_csv(&report))?;
    Ok((
        vec![a.out.clone()],
        format!(
            "eps {}: {} of {} certified, {} fallbacks, speedup N = {:.3}x ({} workers)",
            a.epsilon,
            instances.len() - report.fallback_count,
            instances.len(),
            report.fallback_count,
            report.speedup,
            a.workers
        ),
    ))
}

fn report(a: ReportArgs) -> Outcome {
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let text = read(&a.results)?;
    let base = hybrid::report_from_samples_csv(&text, 0.0, a.workers)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.results.display())))?;
    let mut grid = hybrid::default_eps_grid();
    if let Some(e) = a.epsilon {
        if !(e >= 0.0) {
            return Err(CliError::Usage("--epsilon must be nonnegative".into()));
        }
        grid.push(e);
        grid.sort_by(|x, y| x.total_cmp(y));
        grid.dedup();
    }
    let curve = hybrid::speedup_curve(&base, &grid).map_err(|e| CliError::Usage(e.to_string()))?;
    if curve.rows.windows(2).any(|w| w[1].speedup < w[0].speedup) {
        return Err(CliError::Invariant("speedup curve is not monotone".into()));
    }
    let plot = a.plot.unwrap_or_else(|| a.out.with_extension("svg"));
    write(&a.out, &hybrid::curve_csv(&curve))?;
    write(&plot, &hybrid::curve_svg(&curve))?;
    let mut summary = format!("{} tolerances written to {}", curve.rows.len(), a.out.display());
    if let Some(e) = a.epsilon {
        let row = curve.rows.iter().find(|r| r.eps == e).unwrap();
        summary.push_str(&format!(
            "; at eps {e}: N = {:.3}x, fallback fraction {:.4}",
            row.speedup, row.fallback_fraction
        ));
    }
    for (target, eps) in &curve.inverse {
        match eps {
            Some(e) => summary.push_str(&format!("; N >= {target} from eps {e:.6}")),
            None => summary.push_str(&format!("; N >= {target} not reached")),
        }
    }
    Ok((vec![a.out, plot], summary))
}
