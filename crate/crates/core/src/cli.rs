//! The `dmlwb` command-line front end.
//!
//! Every subcommand accepts `--config FILE` (flat `key=value` lines named
//! after the long flags; explicit flags win) and `--dump-config FILE`, which
//! writes the fully resolved flag set in the same format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::crossfit::{crossfit_nuisance, CrossFitError, FoldPartition, NuisanceConfig};
use crate::data::{conventional_roles, read_csv, validate_for_model, Dataset, Role, RoleMap};
use crate::estimate::{
    dml1_weighted, dml2, oracle_estimates, DmlEstimate, EstimateError, EstimateRecord, FoldWeighting, Method,
};
use crate::kernel::KernelOrder;
use crate::moment::{lookup_model, ModelId, ModelMetadata};
use crate::sim::{run_monte_carlo, DesignName, McDesign, McError, OracleVariance};
use crate::theory::{self, advise_k, PhiInput, TheoryParams};

/// Failure of a CLI run, mapped onto the documented exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable input or data that does not fit the model (exit 2).
    Validation(String),
    /// Non-identified fold or empty kernel neighborhood (exit 3).
    Degenerate(String),
    /// A replication failed under `--strict` (exit 4).
    Strict(String),
    /// Could not write output (exit 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Strict(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Degenerate(m) => write!(f, "estimation failed: {m}"),
            CliError::Strict(m) => write!(f, "replication failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn validation<E: fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

/// Comma-separated integers; `a..b` expands to the inclusive range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntList(pub Vec<usize>);

impl FromStr for IntList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let a: usize = a.trim().parse().map_err(|_| format!("bad range start in `{part}`"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad range end in `{part}`"))?;
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse().map_err(|_| format!("not an integer: `{part}`"))?);
            }
        }
        if out.is_empty() {
            return Err("empty list".into());
        }
        Ok(IntList(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatList(pub Vec<f64>);

impl FromStr for FloatList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
        match v {
            Ok(v) if !v.is_empty() => Ok(FloatList(v)),
            _ => Err(format!("not a list of numbers: `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodList(pub Vec<Method>);

impl FromStr for MethodList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Result<Vec<Method>, _> = s.split(',').map(|p| p.trim().parse::<Method>()).collect();
        let mut v = v?;
        v.sort();
        v.dedup();
        Ok(MethodList(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodChoice {
    Dml1,
    Dml2,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Curve {
    HoBias,
    HoVar,
    SoMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleVarianceChoice {
    DesignTrue,
    Estimated,
}

#[derive(Debug, Parser)]
#[command(name = "dmlwb", version, about = "Debiased machine learning with K-fold cross-fitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Read flag values from a key=value file (explicit flags win)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the resolved flag values to FILE in the config format
    #[arg(long, value_name = "FILE")]
    pub dump_config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Estimate a target parameter from a CSV file
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment on a built-in design
    Simulate(SimulateArgs),
    /// Tabulate higher-order bias, variance or MSE curves in K
    Curves(CurvesArgs),
    /// Relative losses of candidate fold counts against K = n
    AdviseK(AdviseArgs),
    /// Write one simulated dataset with truth columns
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EstimateArgs {
    /// Input CSV file
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Model: ate, att-did, late, wate, att, plm, plm-iv
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodChoice,
    /// Also report ORACLE1/ORACLE2 from the truth_eta columns
    #[arg(long)]
    pub oracle: bool,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2)]
    pub kernel_order: u32,
    /// Bandwidth constant c in h = c * n0^(-phi0)
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0.2)]
    pub phi0: f64,
    /// Floor inverse-propensity denominators at eps * sum(K) and count it
    #[arg(long)]
    pub propensity_floor: Option<f64>,
    /// Seed of the fold partition
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Weight DML1 fold solutions by fold size
    #[arg(long)]
    pub size_weighted: bool,
    /// Outcome column (roles default to the column naming convention when no role flag is given)
    #[arg(long)]
    pub outcome: Option<String>,
    /// Pre-period outcome column
    #[arg(long)]
    pub outcome_pre: Option<String>,
    /// Treatment column
    #[arg(long)]
    pub treatment: Option<String>,
    /// Instrument column
    #[arg(long)]
    pub instrument: Option<String>,
    /// Comma-separated covariate columns
    #[arg(long)]
    pub covariates: Option<String>,
    /// Comma-separated truth nuisance columns, in component order
    #[arg(long)]
    pub truth_eta: Option<String>,
    /// Column holding the true parameter
    #[arg(long)]
    pub truth_theta: Option<String>,
    /// Write the JSON result here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the cross-fitted nuisance matrix as CSV
    #[arg(long)]
    pub eta_out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    /// att-did or late
    #[arg(long)]
    pub design: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Fold counts, e.g. 2,5,10,20 or 2..30
    #[arg(long, default_value = "2,5,10,20")]
    pub k_grid: IntList,
    /// Bandwidth constants [default: 0.62 for att-did, 0.53 for late]
    #[arg(long)]
    pub c_grid: Option<FloatList>,
    /// Kernel order [default: 6 for att-did, 2 for late]
    #[arg(long)]
    pub kernel_order: Option<u32>,
    /// Bandwidth rate [default: 0.0625 for att-did, 0.2 for late]
    #[arg(long)]
    pub phi0: Option<f64>,
    #[arg(long, default_value = "dml1,dml2,oracle1,oracle2")]
    pub methods: MethodList,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Seed of the fold partitions [default: --seed]
    #[arg(long)]
    pub fold_seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Variance used for oracle intervals
    #[arg(long, value_enum, default_value = "design-true")]
    pub oracle_variance: OracleVarianceChoice,
    #[arg(long)]
    pub propensity_floor: Option<f64>,
    /// Worker threads [default: available cores]
    #[arg(long, env = "DMLWB_THREADS")]
    pub threads: Option<usize>,
    /// Abort on the first failed replication
    #[arg(long)]
    pub strict: bool,
    /// Long-format CSV output (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON summary
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CurvesArgs {
    #[arg(long, value_enum)]
    pub what: Curve,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value = "2..30")]
    pub k_grid: IntList,
    #[arg(long, default_value_t = 1.0)]
    pub f_delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub f_b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub g_delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub g_b: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.4)]
    pub phi1: f64,
    /// [default: --phi1]
    #[arg(long)]
    pub phi2: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AdviseArgs {
    #[arg(long)]
    pub n: usize,
    /// Common rate phi; omit to sweep (1/4, 1/2] or give --dx/--s/--phi0
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long, requires_all = ["s", "phi0"])]
    pub dx: Option<usize>,
    #[arg(long, requires_all = ["dx", "phi0"])]
    pub s: Option<u32>,
    #[arg(long, requires_all = ["dx", "s"])]
    pub phi0: Option<f64>,
    #[arg(long, default_value = "5,10,20")]
    pub k_candidates: IntList,
    /// G_b / sigma2, enables the exact MSE loss column
    #[arg(long)]
    pub upsilon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long)]
    pub design: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

// Not echoed: they do not change results, and output paths or thread counts
// would make otherwise identical runs differ.
const NOT_ECHOED: [&str; 7] = ["config", "dump-config", "threads", "out", "json-out", "eta-out", "help"];

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| validation(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Inserts the `--config` file's entries as flags right after the subcommand
/// name, so flags given on the command line (parsed later) override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut config = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| validation("--config needs a file"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let Some(sub_pos) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Err(validation("--config needs a subcommand"));
    };
    let root = Cli::command();
    let sub = root
        .find_subcommand(&rest[sub_pos])
        .ok_or_else(|| validation(format!("unknown subcommand `{}`", rest[sub_pos])))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config_file(Path::new(&path))? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| validation(format!("unknown config key `{key}` for {}", rest[sub_pos])))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => return Err(validation(format!("config key `{key}` must be true or false"))),
            }
        } else {
            injected.push(format!("--{key}"));
            injected.push(value);
        }
    }
    rest.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(rest)
}

/// Resolved `(flag, value)` pairs of a subcommand, in definition order.
fn resolved_pairs(sub: &Command, matches: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if matches!(arg.get_action(), ArgAction::Help | ArgAction::Version) {
            continue;
        }
        if let Ok(Some(raw)) = matches.try_get_raw(arg.get_id().as_str()) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push((long.to_string(), vals.join(",")));
        }
    }
    out
}

fn header_lines(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .filter(|(k, _)| !NOT_ECHOED.contains(&k.as_str()))
        .map(|(k, v)| format!("# {k}={v}\n"))
        .collect()
}

fn write_output(path: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => stdout.write_all(bytes).map_err(CliError::from),
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing primary output to `stdout` unless an output path is given.
pub fn run(args: Vec<String>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let args = expand_config(args)?;
    let mut command = Cli::command();
    let matches = match command.try_get_matches_from_mut(&args) {
        Ok(m) => m,
        Err(e) => {
            let is_info = matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            if is_info {
                write!(stdout, "{}", e.render())?;
                return Ok(());
            }
            return Err(CliError::Validation(e.render().to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| validation(e.render()))?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = command.find_subcommand(name).expect("parsed subcommand exists");
    let pairs = resolved_pairs(sub, sub_matches);

    let cfg = match &cli.command {
        Commands::Estimate(a) => &a.cfg,
        Commands::Simulate(a) => &a.cfg,
        Commands::Curves(a) => &a.cfg,
        Commands::AdviseK(a) => &a.cfg,
        Commands::GenData(a) => &a.cfg,
    };
    if let Some(path) = &cfg.dump_config {
        let text: String = pairs
            .iter()
            .filter(|(k, _)| k != "config" && k != "dump-config")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }

    match &cli.command {
        Commands::Estimate(a) => cmd_estimate(a, &pairs, stdout),
        Commands::Simulate(a) => cmd_simulate(a, &pairs, stdout),
        Commands::Curves(a) => cmd_curves(a, &pairs, stdout),
        Commands::AdviseK(a) => cmd_advise_k(a, &pairs, stdout),
        Commands::GenData(a) => cmd_gen_data(a, &pairs, stdout),
    }
}

fn explicit_roles(a: &EstimateArgs) -> Option<RoleMap> {
    let mut roles = RoleMap::new();
    let singles = [
        (Role::Outcome, &a.outcome),
        (Role::OutcomePre, &a.outcome_pre),
        (Role::Treatment, &a.treatment),
        (Role::Instrument, &a.instrument),
        (Role::TruthTheta, &a.truth_theta),
    ];
    for (role, col) in singles {
        if let Some(c) = col {
            roles.insert(role, c.clone());
        }
    }
    let lists = [(&a.covariates, Role::Covariate as fn(usize) -> Role), (&a.truth_eta, Role::TruthEta as fn(usize) -> Role)];
    for (list, make) in lists {
        if let Some(cols) = list {
            for (j, c) in cols.split(',').map(str::trim).filter(|c| !c.is_empty()).enumerate() {
                roles.insert(make(j + 1), c.to_string());
            }
        }
    }
    (!roles.is_empty()).then_some(roles)
}

fn load_dataset(a: &EstimateArgs) -> Result<Dataset, CliError> {
    let roles = match explicit_roles(a) {
        Some(r) => r,
        None => {
            let file = fs::File::open(&a.data).map_err(|e| validation(format!("{}: {e}", a.data.display())))?;
            let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(file);
            let headers: Vec<String> = rdr.headers().map_err(validation)?.iter().map(str::to_string).collect();
            conventional_roles(&headers)
        }
    };
    let file = fs::File::open(&a.data).map_err(|e| validation(format!("{}: {e}", a.data.display())))?;
    read_csv(file, &roles).map_err(validation)
}

#[derive(Serialize)]
struct EstimateOutput {
    config: BTreeMap<String, String>,
    model: ModelMetadata,
    n: usize,
    fold_sizes: Vec<usize>,
    estimates: Vec<EstimateRecord>,
}

fn estimate_failure(e: EstimateError) -> CliError {
    match e {
        EstimateError::FoldDegenerate { .. } | EstimateError::GlobalDegenerate { .. } => {
            CliError::Degenerate(e.to_string())
        }
        other => validation(other),
    }
}

fn cmd_estimate(a: &EstimateArgs, pairs: &[(String, String)], stdout: &mut dyn Write) -> Result<(), CliError> {
    let id: ModelId = a.model.parse().map_err(validation)?;
    let model = lookup_model(&id).map_err(validation)?;
    let ds = load_dataset(a)?;
    if let Err(issues) = validate_for_model(&ds, &model) {
        let list: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        return Err(CliError::Validation(list.join("\n")));
    }
    if a.oracle && ds.truth_eta(model.p()).is_none() {
        return Err(validation(format!("--oracle needs truth_eta_1..truth_eta_{} columns", model.p())));
    }
    let order = KernelOrder::from_order(a.kernel_order).map_err(validation)?;
    let partition = FoldPartition::new(ds.n_rows(), a.k, a.seed).map_err(validation)?;
    let cfg = NuisanceConfig::Kernel { order, c: a.c, phi0: a.phi0, propensity_floor: a.propensity_floor };

    let mut estimates: Vec<DmlEstimate> = Vec::new();
    let ev = crossfit_nuisance(&ds, &model, &partition, &cfg).map_err(|e| match e {
        CrossFitError::Kernel { .. } => CliError::Degenerate(e.to_string()),
        other => validation(other),
    })?;
    if let Some(path) = &a.eta_out {
        let file = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        ev.write_csv(file).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let weighting = if a.size_weighted { FoldWeighting::SizeWeighted } else { FoldWeighting::Unweighted };
    if matches!(a.method, MethodChoice::Dml1 | MethodChoice::Both) {
        estimates.push(dml1_weighted(&ds, &model, &ev, &partition, a.alpha, weighting).map_err(estimate_failure)?);
    }
    if matches!(a.method, MethodChoice::Dml2 | MethodChoice::Both) {
        estimates.push(dml2(&ds, &model, &ev, a.alpha).map_err(estimate_failure)?);
    }
    if a.oracle {
        let (o1, o2) = oracle_estimates(&ds, &model, &partition, a.alpha).map_err(estimate_failure)?;
        estimates.push(o1);
        estimates.push(o2);
    }
    let out = EstimateOutput {
        config: pairs
            .iter()
            .filter(|(k, _)| !NOT_ECHOED.contains(&k.as_str()))
            .cloned()
            .collect(),
        model: model.metadata(),
        n: ds.n_rows(),
        fold_sizes: partition.sizes().to_vec(),
        estimates: estimates.iter().map(DmlEstimate::record).collect(),
    };
    let mut text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_output(a.out.as_deref(), stdout, text.as_bytes())
}

fn resolve_design(a: &SimulateArgs) -> Result<McDesign, CliError> {
    let name: DesignName = a.design.parse().map_err(validation)?;
    let mut d = McDesign::standard(name);
    d.n = a.n;
    d.reps = a.reps;
    d.k_grid = a.k_grid.0.clone();
    if let Some(c) = &a.c_grid {
        d.c_grid = c.0.clone();
    }
    if let Some(s) = a.kernel_order {
        d.order = KernelOrder::from_order(s).map_err(validation)?;
    }
    if let Some(p) = a.phi0 {
        d.phi0 = p;
    }
    d.methods = a.methods.0.clone();
    d.seed = a.seed;
    d.fold_seed = Some(a.fold_seed.unwrap_or(a.seed));
    d.alpha = a.alpha;
    d.strict = a.strict;
    d.oracle_variance = match a.oracle_variance {
        OracleVarianceChoice::DesignTrue => OracleVariance::DesignTrue,
        OracleVarianceChoice::Estimated => OracleVariance::Estimated,
    };
    d.propensity_floor = a.propensity_floor;
    Ok(d)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_simulate(a: &SimulateArgs, pairs: &[(String, String)], stdout: &mut dyn Write) -> Result<(), CliError> {
    let design = resolve_design(a)?;
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let summary = run_monte_carlo(&design, threads).map_err(|e| match e {
        McError::Strict { .. } => CliError::Strict(e.to_string()),
        other => validation(other),
    })?;
    let mut bytes = header_lines(pairs).into_bytes();
    let resolved = [
        ("c-grid", join(&design.c_grid)),
        ("kernel-order", design.order.to_string()),
        ("phi0", design.phi0.to_string()),
        ("fold-seed", design.fold_seed.unwrap_or(design.seed).to_string()),
        ("replication-seeds", "mix64(seed + (r+1)*0x9E3779B97F4A7C15), r = 0..reps-1".to_string()),
        ("true-sigma2", summary.true_sigma2.to_string()),
    ];
    for (k, v) in resolved {
        bytes.extend(format!("# resolved.{k}={v}\n").into_bytes());
    }
    summary.write_csv(&mut bytes)?;
    write_output(a.out.as_deref(), stdout, &bytes)?;
    if let Some(path) = &a.json_out {
        let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_curves(a: &CurvesArgs, pairs: &[(String, String)], stdout: &mut dyn Write) -> Result<(), CliError> {
    let params = TheoryParams {
        f_delta: a.f_delta,
        f_b: a.f_b,
        g_delta: a.g_delta,
        g_b: a.g_b,
        sigma2: a.sigma2,
        phi1: a.phi1,
        phi2: a.phi2.unwrap_or(a.phi1),
    };
    let mut ks = a.k_grid.0.clone();
    if !ks.contains(&a.n) {
        ks.push(a.n);
    }
    let label = match a.what {
        Curve::HoBias => "sqrt(n)-scaled higher-order bias F_K*n^(1/2-2*phi1)",
        Curve::HoVar => "Omega_K/n^zeta",
        Curve::SoMse => "n*SO-MSE",
    };
    let mut text = header_lines(pairs);
    text.push_str(&format!("# value={label}\n"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["K", "value"])?;
    for k in ks {
        let v = match a.what {
            Curve::HoBias => theory::ho_bias_leading(&params, k, a.n),
            Curve::HoVar => theory::ho_variance_second_term(&params, k, a.n),
            Curve::SoMse => theory::so_mse(&params, k, a.n).map(|v| v * a.n as f64),
        }
        .map_err(validation)?;
        w.write_record([k.to_string(), v.to_string()])?;
    }
    text.push_str(&String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("utf-8 csv"));
    write_output(a.out.as_deref(), stdout, text.as_bytes())
}

fn cmd_advise_k(a: &AdviseArgs, pairs: &[(String, String)], stdout: &mut dyn Write) -> Result<(), CliError> {
    let phi = match (a.phi, a.dx, a.s, a.phi0) {
        (Some(p), _, _, _) => PhiInput::Known(p),
        (None, Some(dx), Some(s), Some(phi0)) => {
            let (phi1, phi2, _) = theory::nw_rates(dx, s, phi0).map_err(validation)?;
            PhiInput::Known(phi1.min(phi2))
        }
        _ => PhiInput::Unknown,
    };
    let advice = advise_k(a.n, phi, &a.k_candidates.0, a.upsilon).map_err(validation)?;
    let mut text = header_lines(pairs);
    if let PhiInput::Known(p) = phi {
        text.push_str(&format!("# resolved.phi={p}\n"));
    } else {
        text.push_str("# resolved.phi=(1/4, 1/2] (min and max columns)\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["K", "bias_loss_min", "bias_loss_max", "mse_bound_loss_min", "mse_bound_loss_max", "mse_exact_loss"])?;
    for r in &advice.rows {
        w.write_record([
            r.k.to_string(),
            r.bias_loss.0.to_string(),
            r.bias_loss.1.to_string(),
            r.mse_bound_loss.0.to_string(),
            r.mse_bound_loss.1.to_string(),
            r.mse_exact_loss.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    text.push_str(&String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("utf-8 csv"));
    for note in &advice.notes {
        text.push_str(&format!("# {note}\n"));
    }
    write_output(a.out.as_deref(), stdout, text.as_bytes())
}

fn cmd_gen_data(a: &GenDataArgs, pairs: &[(String, String)], stdout: &mut dyn Write) -> Result<(), CliError> {
    let name: DesignName = a.design.parse().map_err(validation)?;
    if a.n < 2 {
        return Err(validation("--n must be at least 2"));
    }
    let ds = name.generate(a.n, a.seed);
    let mut bytes = header_lines(pairs).into_bytes();
    ds.write_csv(&mut bytes).map_err(|e| CliError::Io(e.to_string()))?;
    write_output(a.out.as_deref(), stdout, &bytes)
}
