//! Command-line driver: `synth`, `diff`, `discover` and `pareto`.
//!
//! Runs are configured by a TOML file:
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! path = "heat.grid"          # relative to the config file
//!
//! [diff]
//! window = 9
//! degree = 5
//! max_order = 3
//!
//! [pool.variables.u]
//! orders = { t = 1, x = 3 }   # highest derivative order per axis
//!
//! [[pool.trig]]
//! function = "sin"
//! frequency = [0.5, 4.0]
//!
//! [ea]
//! population_size = 32
//!
//! [moeadd]
//! divisions = 3
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::differentiation::{build_token_cache, DiffConfig};
use crate::equation_ea::EAConfig;
use crate::error::{Error, Result};
use crate::grid::{dataset_to_string, load_dataset, Dataset};
use crate::moeadd::{aggregate_frontier, frontier_csv, run_moeadd, FrontierRow, MoeaddConfig};
use crate::synthetic::{generate, SynthKind, SynthSpec};
use crate::system_builder::{objective_vector, EquationSystem, SparsityVector, SystemSearch};
use crate::token_pool::{TokenFamily, TrigFunction};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "PDE_FORGE_THREADS";

fn default_true() -> bool {
    true
}

fn default_power() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
}

/// Derivative tokens of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableTokens {
    /// Highest derivative order per axis name; axes left out get none.
    pub orders: BTreeMap<String, usize>,
    /// Include the raw field itself.
    #[serde(default = "default_true")]
    pub raw: bool,
    #[serde(default)]
    pub max_power: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTokens {
    #[serde(default)]
    pub name: Option<String>,
    pub function: TrigFunction,
    pub frequency: [f64; 2],
    #[serde(default)]
    pub max_power: Option<u32>,
}

/// Token pool declaration. Without `variables`, every dataset variable gets
/// all pure derivatives up to `diff.max_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default = "default_power")]
    pub max_power: u32,
    #[serde(default)]
    pub variables: BTreeMap<String, VariableTokens>,
    #[serde(default)]
    pub trig: Vec<TrigTokens>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_power: 1,
            variables: BTreeMap::new(),
            trig: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub diff: DiffConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub ea: EAConfig,
    #[serde(default)]
    pub moeadd: MoeaddConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative data path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    /// Pins every seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.ea.rng_seed = seed;
        self.moeadd.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.diff.validate()?;
        self.ea.validate()?;
        self.moeadd.validate()
    }
}

/// Token families declared by `pool`, checked against the dataset.
pub fn build_pool(pool: &PoolConfig, diff: &DiffConfig, dataset: &Dataset) -> Result<Vec<Arc<TokenFamily>>> {
    let axes = dataset.grid.dim_names().to_vec();
    let mut families = Vec::new();
    if pool.variables.is_empty() {
        for v in dataset.variable_names() {
            families.push(TokenFamily::all_derivatives(&v, &axes, diff.max_order, pool.max_power)?);
        }
    }
    for (var, decl) in &pool.variables {
        if dataset.field(var).is_none() {
            return Err(Error::Config(format!("pool variable `{var}` is not in the dataset")));
        }
        let mut allowed = Vec::new();
        if decl.raw {
            allowed.push((0, 0));
        }
        for (axis, &max) in &decl.orders {
            let a = dataset
                .grid
                .axis_index(axis)
                .ok_or_else(|| Error::Config(format!("pool axis `{axis}` is not a grid dimension")))?;
            if max > diff.max_order {
                return Err(Error::Config(format!(
                    "`{var}` asks for order {max} along `{axis}` but diff.max_order is {}",
                    diff.max_order
                )));
            }
            allowed.extend((1..=max).map(|o| (a, o)));
        }
        families.push(TokenFamily::derivative(var, &axes, &allowed, decl.max_power.unwrap_or(pool.max_power))?);
    }
    for (i, t) in pool.trig.iter().enumerate() {
        let name = t.name.clone().unwrap_or_else(|| {
            let base = match t.function {
                TrigFunction::Sin => "sin",
                TrigFunction::Cos => "cos",
            };
            if pool.trig.iter().filter(|o| o.function == t.function).count() > 1 {
                format!("{base}{i}")
            } else {
                base.to_string()
            }
        });
        let power = t.max_power.unwrap_or(pool.max_power);
        families.push(TokenFamily::trig(&name, t.function, &axes, (t.frequency[0], t.frequency[1]), power)?);
    }
    Ok(families.into_iter().map(Arc::new).collect())
}

#[derive(Debug, Parser)]
#[command(name = "pde-forge", version, about = "Discover systems of PDEs from gridded data")]
pub struct Cli {
    /// Run evaluations on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with a known governing system.
    Synth(SynthArgs),
    /// Write the derivative token cache of a dataset.
    Diff(DiffArgs),
    /// Discover one system for a fixed sparsity vector.
    Discover(DiscoverArgs),
    /// Build the quality/complexity Pareto frontier.
    Pareto(ParetoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum KindArg {
    Heat1d,
    Advection1d,
    TaylorGreen,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Heat1d => SynthKind::Heat1d,
            KindArg::Advection1d => SynthKind::Advection1d,
            KindArg::TaylorGreen => SynthKind::TaylorGreen,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Grid shape, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub origins: Option<Vec<f64>>,
    /// Relative standard deviation of multiplicative noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub max_order: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// One sparsity constant per equation, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    /// Also write the per-equation residual fields.
    #[arg(long)]
    pub dump_residuals: bool,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(args.kind.into());
    for (name, value) in [
        ("alpha", args.alpha),
        ("k", args.k),
        ("c", args.c),
        ("nu", args.nu),
        ("rho", args.rho),
    ] {
        if let Some(v) = value {
            spec = spec.with_param(name, v);
        }
    }
    if let Some(s) = &args.shape {
        spec.shape = s.clone();
        if args.origins.is_none() {
            spec.origins = vec![0.0; s.len()];
        }
    }
    if let Some(s) = &args.steps {
        spec.steps = s.clone();
    }
    if let Some(o) = &args.origins {
        spec.origins = o.clone();
    }
    spec.noise_std = args.noise;
    // Grid problems here come from command-line values.
    spec.validate().map_err(|e| match e {
        Error::Shape(m) => Error::Argument(m),
        other => other,
    })?;
    let dataset = generate(&spec, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let mut comments = vec![format!("synthetic {} dataset", spec.kind)];
    for (k, v) in &spec.params {
        comments.push(format!("{k} = {v}"));
    }
    if spec.noise_std > 0.0 {
        comments.push(format!("noise_std = {} (seed {})", spec.noise_std, args.seed));
    }
    comments.push("ground truth:".into());
    comments.extend(spec.ground_truth()?.into_iter().map(|e| format!("  {e}")));
    write_file(&args.out, &dataset_to_string(&dataset, &comments)?)?;
    println!("wrote {} ({} fields)", args.out.display(), dataset.fields.len());
    Ok(())
}

fn cmd_diff(args: &DiffArgs) -> Result<()> {
    let dataset = load_dataset(&args.input)?;
    let defaults = DiffConfig::default();
    let cfg = DiffConfig {
        window: args.window.unwrap_or(defaults.window),
        degree: args.degree.unwrap_or(defaults.degree),
        max_order: args.max_order.unwrap_or(defaults.max_order),
    };
    cfg.validate()?;
    let cache = build_token_cache(&dataset, &cfg)?;
    let comments = vec![format!(
        "derivative tokens: window {}, degree {}, max order {}",
        cfg.window, cfg.degree, cfg.max_order
    )];
    write_file(&args.out, &dataset_to_string(&cache.to_dataset()?, &comments)?)?;
    println!("wrote {} ({} tokens)", args.out.display(), cache.len());
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    search: SystemSearch,
}

fn prepare(args: &RunArgs) -> Result<Prepared> {
    let mut cfg = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("pde-forge-out"));
    let search = build_search(&cfg)?;
    Ok(Prepared { cfg, out, search })
}

/// Loads the configured dataset and sets up the system search exactly as
/// `discover` and `pareto` do.
pub fn build_search(cfg: &RunConfig) -> Result<SystemSearch> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.data.path)?;
    let pool = build_pool(&cfg.pool, &cfg.diff, &dataset)?;
    SystemSearch::from_dataset(&dataset, &cfg.diff, pool, cfg.ea)
}

#[derive(Serialize)]
struct EquationReport {
    rendered: String,
    lambda: f64,
    quality: f64,
    complexity: usize,
    fitness: f64,
    described: Vec<String>,
}

#[derive(Serialize)]
struct SystemReport<'a> {
    config: &'a RunConfig,
    lambdas: &'a [f64],
    objectives: Vec<f64>,
    total_quality: f64,
    total_complexity: usize,
    degenerate: bool,
    equations: Vec<EquationReport>,
}

fn system_report<'a>(cfg: &'a RunConfig, system: &'a EquationSystem) -> SystemReport<'a> {
    let rendered = system.render();
    SystemReport {
        config: cfg,
        lambdas: system.lambdas.values(),
        objectives: objective_vector(system),
        total_quality: system.total_quality(),
        total_complexity: system.total_complexity(),
        degenerate: system.degenerate,
        equations: system
            .equations
            .iter()
            .zip(rendered)
            .enumerate()
            .map(|(i, (eq, rendered))| EquationReport {
                rendered,
                lambda: eq.lambda,
                quality: system.quality[i],
                complexity: system.complexity[i],
                fitness: eq.fitness,
                described: system.described[i].iter().cloned().collect(),
            })
            .collect(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Argument(format!("serialization failed: {e}")))
}

fn cmd_discover(args: &DiscoverArgs) -> Result<()> {
    let p = prepare(&args.run)?;
    let k = p.search.n_equations();
    if args.lambdas.len() != k {
        return Err(Error::Argument(format!(
            "--lambdas has {} values but the dataset has {k} dependent variables",
            args.lambdas.len()
        )));
    }
    let lambdas = SparsityVector::new(args.lambdas.clone())?;
    let (system, trace) = p.search.run_traced(&lambdas, p.cfg.seed)?;
    let report_path = p.out.join("report.json");
    write_file(&report_path, &to_json(&system_report(&p.cfg, &system))?)?;
    if args.dump_residuals {
        let grid = p.search.cache().grid().clone();
        let fields = trace
            .residuals
            .into_iter()
            .enumerate()
            .map(|(i, r)| crate::grid::DataField::new(format!("residual{}", i + 1), grid.clone(), r))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset::new(grid, fields)?;
        let comments: Vec<String> = system.render().into_iter().map(|e| format!("residual of {e}")).collect();
        write_file(&p.out.join("residuals.grid"), &dataset_to_string(&ds, &comments)?)?;
    }
    for (line, (q, c)) in system.render().iter().zip(system.quality.iter().zip(&system.complexity)) {
        println!("{line}    [Q = {q:.6e}, C = {c}]");
    }
    println!("wrote {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct FrontierReport<'a> {
    config: &'a RunConfig,
    ideal_point: &'a [f64],
    evaluations: usize,
    individuals: &'a [FrontierRow],
}

/// Text table of the aggregated frontier; 2-D-dominated rows are marked `*`.
pub fn frontier_table(rows: &[FrontierRow]) -> String {
    let mut out = String::from("  C_total  E_total       system\n");
    for r in rows {
        let mark = if r.dominated_2d { '*' } else { ' ' };
        let _ = writeln!(
            out,
            "{mark} {:>7}  {:<12.6e}  {}",
            r.total_complexity,
            r.total_error,
            r.equations.first().map(String::as_str).unwrap_or("")
        );
        for eq in r.equations.iter().skip(1) {
            let _ = writeln!(out, "  {:>7}  {:<12}  {eq}", "", "");
        }
    }
    out
}

fn cmd_pareto(args: &ParetoArgs) -> Result<()> {
    let p = prepare(&args.run)?;
    let archive = run_moeadd(&p.search, &p.cfg.moeadd)?;
    let rows = aggregate_frontier(&archive);
    let report = FrontierReport {
        config: &p.cfg,
        ideal_point: &archive.ideal_point,
        evaluations: archive.evaluations,
        individuals: &rows,
    };
    write_file(&p.out.join("frontier.json"), &to_json(&report)?)?;
    write_file(&p.out.join("frontier.csv"), &frontier_csv(&rows))?;
    print!("{}", frontier_table(&rows));
    println!("wrote {}", p.out.display());
    Ok(())
}

fn init_threads(deterministic: bool) {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let threads = if deterministic { Some(1) } else { cap };
    if let Some(n) = threads.filter(|&n| n > 0) {
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.deterministic);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Diff(a) => cmd_diff(a),
        Command::Discover(a) => cmd_discover(a),
        Command::Pareto(a) => cmd_pareto(a),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
