//! Command-line driver: declarative run configs, one output directory per
//! run, and the subcommands that tie the library together.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::energy::{total_loss, LossBreakdown, ProblemSpec, SampleBatch, TrialFunction};
use crate::error::Error;
use crate::geodata::{
    build_problem, data_benchmark_losses, field_to_grid, synthetic_grids, xy_value_csv, GeoOptions, GeoProblem,
    Grid, MappedField, BEDROCK_RANGE, ELEVATION_SCALE, THICKNESS_RANGE,
};
use crate::metrics::{l1_error, scaling_study, ErrorReport, EvalGrid, ScalingStudy};
use crate::nnet::Network;
use crate::optim::{mse_on, pretrain, train, PretrainReport, Sampling, TrainConfig, TrainReport};
use crate::oracle::{optimal_omega, solve_pgd, solve_psor_1d, OracleSolution, SolverSettings};
use crate::problems::ProblemName;

/// The five `(α, β)` rows of the published penalty sweep.
pub const TABLE1_PAIRS: [(f64, f64); 5] =
    [(100.0, 100.0), (500.0, 100.0), (1000.0, 500.0), (4000.0, 4000.0), (5000.0, 4000.0)];

/// Stream of the fixed evaluation batch used for end-of-run loss reports.
const EVAL_STREAM: u64 = 1 << 48;

/// Failures of a CLI invocation, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config files or invalid settings (exit code 2).
    #[error("usage: {0}")]
    Usage(String),
    /// Everything that fails after the configuration was accepted (exit code 1).
    #[error(transparent)]
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Everything a run needs; written next to the outputs as `config.json`
/// with defaults filled in, and accepted back through `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `mms1d-p2`, `mms2d-p<p>` or `grid:<bedrock path>`.
    pub problem: Option<String>,
    pub bedrock: Option<PathBuf>,
    pub thickness: Option<PathBuf>,
    /// `[ncols, nrows]` of generated test rasters used instead of files.
    pub synthetic: Option<[usize; 2]>,
    pub downsample: usize,
    /// Exponent for grid problems; manufactured problems carry their own.
    pub p: f64,
    pub drift_from_bedrock: bool,
    /// Hidden-layer widths.
    pub layers: Vec<usize>,
    pub layer_norm: bool,
    /// Checkpoint to start from instead of a fresh initialization.
    pub init: Option<PathBuf>,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub base_lr: f64,
    pub breakpoints: [usize; 2],
    pub interior_batch: usize,
    pub boundary_batch: usize,
    pub minibatch: Option<usize>,
    pub seed: u64,
    pub deterministic: bool,
    /// `resample`, `fixed`, `stratified` or `grid`; subcommand default when unset.
    pub sampling: Option<String>,
    pub eval_every: usize,
    pub checkpoint_every: Option<usize>,
    pub pairs: Vec<[f64; 2]>,
    pub sample_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Oracle cells per axis.
    pub cells: Option<Vec<usize>>,
    /// `auto`, `psor` or `pgd`.
    pub solver: String,
    pub tolerance: f64,
    pub max_solver_iterations: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        RunConfig {
            problem: None,
            bedrock: None,
            thickness: None,
            synthetic: None,
            downsample: 1,
            p: 3.0,
            drift_from_bedrock: false,
            layers: vec![128; 5],
            layer_norm: true,
            init: None,
            alpha: 4000.0,
            beta: 4000.0,
            iterations: base.iterations,
            pretrain_iterations: 6000,
            base_lr: base.base_lr,
            breakpoints: [base.breakpoints.0, base.breakpoints.1],
            interior_batch: base.interior_batch,
            boundary_batch: base.boundary_batch,
            minibatch: None,
            seed: base.seed,
            deterministic: true,
            sampling: None,
            eval_every: base.eval_every,
            checkpoint_every: None,
            pairs: TABLE1_PAIRS.iter().map(|&(a, b)| [a, b]).collect(),
            sample_counts: (6..=14).map(|k| 1usize << k).collect(),
            seeds: vec![1, 2, 3],
            cells: None,
            solver: "auto".into(),
            tolerance: SolverSettings::default().tolerance,
            max_solver_iterations: SolverSettings::default().max_iterations,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn problem_name(&self) -> CliResult<ProblemName> {
        let name = self.problem.as_deref().ok_or_else(|| CliError::Usage("a problem name is required".into()))?;
        ProblemName::parse(name).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn sampling_or(&self, default: Sampling) -> CliResult<Sampling> {
        match &self.sampling {
            Some(s) => Ok(Sampling::parse(s)?),
            None => Ok(default),
        }
    }

    pub fn train_config(&self, default_sampling: Sampling) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.iterations,
            base_lr: self.base_lr,
            breakpoints: (self.breakpoints[0], self.breakpoints[1]),
            interior_batch: self.interior_batch,
            boundary_batch: self.boundary_batch,
            seed: self.seed,
            deterministic: self.deterministic,
            sampling: self.sampling_or(default_sampling)?,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: None,
            minibatch: self.minibatch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Settings shared by every subcommand.
    pub fn validate(&self) -> CliResult<()> {
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(CliError::Usage("layers must be a nonempty list of positive widths".into()));
        }
        if self.downsample == 0 {
            return Err(CliError::Usage("downsample factor must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(CliError::Usage("alpha and beta must be nonnegative".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(CliError::Usage("solver tolerance must be positive".into()));
        }
        if !matches!(self.solver.as_str(), "auto" | "psor" | "pgd") {
            return Err(CliError::Usage(format!("unknown solver '{}'", self.solver)));
        }
        self.train_config(Sampling::Stratified)?;
        Ok(())
    }

    fn output_dir(&self, command: &str) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        let mut sizes = vec![dim];
        sizes.extend(&self.layers);
        sizes.push(1);
        sizes
    }

    /// Loads `init` when given, otherwise a fresh domain-aware network.
    pub fn network_for(&self, spec: &ProblemSpec) -> CliResult<Network> {
        if let Some(path) = &self.init {
            let net = Network::load(path)?;
            if net.input_dim() != spec.dim() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} takes {} inputs, the problem has {}",
                    path.display(),
                    net.input_dim(),
                    spec.dim()
                )));
            }
            return Ok(net);
        }
        let d = &spec.domain;
        Ok(Network::init_for_domain(self.seed, &self.layer_sizes(spec.dim()), self.layer_norm, d.lower(), d.upper())?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "deep-obstacle", version, about = "Neural penalized-energy solver for p-Laplacian obstacle problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on one problem.
    Train(Overrides),
    /// One training run per (alpha, beta) pair.
    Sweep(Overrides),
    /// Relative error against the number of interior samples.
    Scaling(Overrides),
    /// Bedrock pretraining followed by training on gridded data.
    Greenland(Overrides),
    /// Finite-difference reference solution.
    Oracle(Overrides),
    /// Fit the network to the obstacle only.
    Pretrain(Overrides),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Scaling(_) => "scaling",
            Command::Greenland(_) => "greenland",
            Command::Oracle(_) => "oracle",
            Command::Pretrain(_) => "pretrain",
        }
    }

    fn overrides(&self) -> &Overrides {
        match self {
            Command::Train(o)
            | Command::Sweep(o)
            | Command::Scaling(o)
            | Command::Greenland(o)
            | Command::Oracle(o)
            | Command::Pretrain(o) => o,
        }
    }
}

/// Flags override the matching config-file keys.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run config; flags given alongside it take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub bedrock: Option<PathBuf>,
    #[arg(long)]
    pub thickness: Option<PathBuf>,
    /// Generated rasters instead of files, as COLSxROWS.
    #[arg(long, value_parser = parse_dims)]
    pub synthetic: Option<[usize; 2]>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub drift_from_bedrock: bool,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub no_layer_norm: bool,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "iters")]
    pub iterations: Option<usize>,
    #[arg(long = "pretrain-iters")]
    pub pretrain_iterations: Option<usize>,
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    #[arg(long = "batch")]
    pub interior_batch: Option<usize>,
    #[arg(long)]
    pub boundary_batch: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// ALPHA:BETA pairs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pub pairs: Option<Vec<[f64; 2]>>,
    #[arg(long = "counts", value_delimiter = ',')]
    pub sample_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<usize>>,
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected COLSxROWS, got '{s}'"))?;
    let a = a.parse().map_err(|_| format!("bad column count in '{s}'"))?;
    let b = b.parse().map_err(|_| format!("bad row count in '{s}'"))?;
    Ok([a, b])
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected ALPHA:BETA, got '{s}'"))?;
    let a = a.parse().map_err(|_| format!("bad alpha in '{s}'"))?;
    let b = b.parse().map_err(|_| format!("bad beta in '{s}'"))?;
    Ok([a, b])
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = &self.$field { cfg.$field = v.clone(); } )* };
        }
        macro_rules! set_opt {
            ($($field:ident),*) => { $( if let Some(v) = &self.$field { cfg.$field = Some(v.clone()); } )* };
        }
        set!(downsample, p, layers, alpha, beta, iterations, pretrain_iterations, base_lr, interior_batch);
        set!(boundary_batch, seed, eval_every, pairs, sample_counts, seeds, solver, tolerance);
        set_opt!(problem, bedrock, thickness, synthetic, init, minibatch, sampling, checkpoint_every, cells, output);
        if self.drift_from_bedrock {
            cfg.drift_from_bedrock = true;
        }
        if self.no_layer_norm {
            cfg.layer_norm = false;
        }
    }

    /// The config file (if any) with these flags applied on top.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Help and version output exit with 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("outputs written to {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `deep-obstacle {} --help` for usage", cli.command.name());
            }
            e.exit_code()
        }
    }
}

/// Runs one subcommand and returns its output directory.
pub fn run(command: &Command) -> CliResult<PathBuf> {
    let cfg = command.overrides().resolve()?;
    let dir = cfg.output_dir(command.name());
    match command {
        Command::Train(_) => cmd_train(&cfg, &dir).map(|_| ()),
        Command::Sweep(_) => cmd_sweep(&cfg, &dir).map(|_| ()),
        Command::Scaling(_) => cmd_scaling(&cfg, &dir).map(|_| ()),
        Command::Greenland(_) => cmd_greenland(&cfg, &dir).map(|_| ()),
        Command::Oracle(_) => cmd_oracle(&cfg, &dir).map(|_| ()),
        Command::Pretrain(_) => cmd_pretrain(&cfg, &dir).map(|_| ()),
    }?;
    Ok(dir)
}

fn prepare_dir(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// A problem ready to train on, with the grid context when it came from data.
pub struct LoadedProblem {
    pub spec: ProblemSpec,
    pub geo: Option<GeoProblem>,
    pub bedrock_grid: Option<Grid>,
    pub warnings: Vec<String>,
}

pub fn load_problem(cfg: &RunConfig) -> CliResult<LoadedProblem> {
    match cfg.problem_name()? {
        ProblemName::Grid(path) => {
            let thickness = cfg
                .thickness
                .as_ref()
                .ok_or_else(|| CliError::Usage("grid problems need a thickness raster".into()))?;
            let bedrock = Grid::read(Path::new(&path))?.downsample(cfg.downsample)?;
            let thickness = Grid::read(thickness)?.downsample(cfg.downsample)?;
            geo_problem(cfg, bedrock, thickness)
        }
        name => {
            let mms = name.mms(cfg.alpha, cfg.beta)?;
            Ok(LoadedProblem { spec: mms.spec, geo: None, bedrock_grid: None, warnings: Vec::new() })
        }
    }
}

fn geo_problem(cfg: &RunConfig, bedrock: Grid, thickness: Grid) -> CliResult<LoadedProblem> {
    let mut warnings = bedrock.range_warnings("bedrock", BEDROCK_RANGE);
    warnings.extend(thickness.range_warnings("thickness", THICKNESS_RANGE));
    let opts = GeoOptions { drift_from_bedrock: cfg.drift_from_bedrock, scale: None };
    let geo = build_problem(&bedrock, &thickness, cfg.p, cfg.alpha, cfg.beta, &opts)?;
    let filled = geo.surface.filled_cells();
    if filled > 0 {
        warnings.push(format!("{filled} masked cells filled from their nearest valid neighbor"));
    }
    Ok(LoadedProblem { spec: geo.spec.clone(), geo: Some(geo), bedrock_grid: Some(bedrock), warnings })
}

fn report_warnings(dir: &Path, warnings: &[String]) -> CliResult<()> {
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if !warnings.is_empty() {
        fs::write(dir.join("warnings.txt"), warnings.join("\n") + "\n")?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub error: Option<ErrorReport>,
}

/// Trains, then writes `report.csv`, `final.bin`, `solution.csv` and, with an
/// exact solution, `error.csv`; grid problems also get the predicted rasters.
pub fn cmd_train(cfg: &RunConfig, dir: &Path) -> CliResult<TrainOutcome> {
    let problem = load_problem(cfg)?;
    prepare_dir(cfg, dir)?;
    report_warnings(dir, &problem.warnings)?;
    let mut net = cfg.network_for(&problem.spec)?;
    let outcome = train_and_dump(cfg, &problem, &mut net, dir)?;
    if let Some(reason) = &outcome.report.aborted {
        return Err(CliError::Run(Error::NonFinite(reason.clone())));
    }
    Ok(outcome)
}

fn train_and_dump(cfg: &RunConfig, problem: &LoadedProblem, net: &mut Network, dir: &Path) -> CliResult<TrainOutcome> {
    let mut tc = cfg.train_config(Sampling::Stratified)?;
    tc.checkpoint_dir = Some(dir.to_path_buf());
    let report = train(net, &problem.spec, &tc)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    let grid = EvalGrid::default_for(&problem.spec.domain);
    let values = net.values(grid.points())?;
    fs::write(dir.join("solution.csv"), xy_value_csv(grid.points(), values.as_slice().expect("contiguous")))?;
    let error = match &problem.spec.exact {
        Some(exact) => {
            let e = l1_error(&*net, exact, &grid)?;
            fs::write(dir.join("error.csv"), e.to_csv())?;
            Some(e)
        }
        None => None,
    };
    if let (Some(geo), Some(bed)) = (&problem.geo, &problem.bedrock_grid) {
        write_predicted_grids(geo, bed, &*net, dir)?;
    }
    Ok(TrainOutcome { report, error })
}

fn write_predicted_grids(geo: &GeoProblem, bedrock: &Grid, net: &dyn TrialFunction, dir: &Path) -> CliResult<()> {
    let map = geo.bedrock.map();
    let surface = field_to_grid(bedrock, map, geo.bedrock.scale(), net)?;
    surface.write(&dir.join("predicted_surface.asc"))?;
    let thickness: Vec<f64> = surface
        .values
        .iter()
        .zip(&bedrock.values)
        .zip(&surface.mask)
        .map(|((&s, &b), &m)| if m { s - b } else { surface.nodata })
        .collect();
    Grid::new(surface.ncols, surface.nrows, surface.cell_size, surface.origin, surface.nodata, thickness)?
        .write(&dir.join("predicted_thickness.asc"))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub relative: Option<f64>,
    /// `ok` or the failure message.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,seed,relative_error,status\n");
        for r in &self.rows {
            let e = r.relative.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.alpha, r.beta, r.seed, e, r.status.replace(',', ";"));
        }
        out
    }

    /// Row with the smallest and the largest relative error.
    pub fn best_and_worst(&self) -> Option<(&SweepRow, &SweepRow)> {
        let ok = || self.rows.iter().filter(|r| r.relative.is_some());
        let key = |r: &&SweepRow| r.relative.unwrap();
        let best = ok().min_by(|a, b| key(a).total_cmp(&key(b)))?;
        let worst = ok().max_by(|a, b| key(a).total_cmp(&key(b)))?;
        Some((best, worst))
    }
}

/// Seeds for a list of pairs: every pair starts from `base`, and a repeated
/// pair gets `base + k` for its `k`-th repetition.
pub fn sweep_seeds(pairs: &[[f64; 2]], base: u64) -> Vec<u64> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| base + pairs[..i].iter().filter(|q| q == &p).count() as u64)
        .collect()
}

/// One training run per pair; failures are recorded and the sweep goes on.
pub fn cmd_sweep(cfg: &RunConfig, dir: &Path) -> CliResult<SweepTable> {
    if cfg.pairs.is_empty() {
        return Err(CliError::Usage("sweep needs at least one alpha:beta pair".into()));
    }
    let name = cfg.problem_name()?;
    prepare_dir(cfg, dir)?;
    let seeds = sweep_seeds(&cfg.pairs, cfg.seed);
    let mut rows = Vec::with_capacity(cfg.pairs.len());
    for (i, (&[alpha, beta], &seed)) in cfg.pairs.iter().zip(&seeds).enumerate() {
        let run_cfg = RunConfig { alpha, beta, seed, eval_every: 0, ..cfg.clone() };
        let run_dir = dir.join(format!("run{i:02}"));
        let result = name.mms(alpha, beta).map_err(CliError::from).and_then(|mms| {
            fs::create_dir_all(&run_dir)?;
            let mut net = run_cfg.network_for(&mms.spec)?;
            let problem = LoadedProblem { spec: mms.spec, geo: None, bedrock_grid: None, warnings: Vec::new() };
            train_and_dump(&run_cfg, &problem, &mut net, &run_dir)
        });
        let row = match result {
            Ok(out) if out.report.aborted.is_none() => {
                SweepRow { alpha, beta, seed, relative: out.error.map(|e| e.relative), status: "ok".into() }
            }
            Ok(out) => SweepRow { alpha, beta, seed, relative: None, status: out.report.aborted.unwrap_or_default() },
            Err(e) => SweepRow { alpha, beta, seed, relative: None, status: e.to_string() },
        };
        rows.push(row);
    }
    let table = SweepTable { rows };
    fs::write(dir.join("sweep.csv"), table.to_csv())?;
    Ok(table)
}

/// Scaling study: the `N` interior samples are drawn once, iid uniform
/// (unless `sampling` says otherwise), and each step uses a random
/// `minibatch` of them.
pub fn cmd_scaling(cfg: &RunConfig, dir: &Path) -> CliResult<ScalingStudy> {
    let mms = cfg.problem_name()?.mms(cfg.alpha, cfg.beta)?;
    prepare_dir(cfg, dir)?;
    let mut base = cfg.train_config(Sampling::Fixed)?;
    base.minibatch = cfg.minibatch.or(Some(TrainConfig::default().interior_batch));
    let study = scaling_study(&mms.spec, &cfg.layer_sizes(mms.spec.dim()), &base, &cfg.sample_counts, &cfg.seeds)?;
    fs::write(dir.join("scaling.csv"), study.to_csv())?;
    let mut fit = String::from("slope,intercept\n");
    if let Some(f) = &study.fit {
        let _ = writeln!(fit, "{},{}", f.slope, f.intercept);
    }
    fs::write(dir.join("fit.csv"), fit)?;
    Ok(study)
}

pub struct OracleOutcome {
    pub solution: OracleSolution,
    pub max_error: Option<f64>,
    pub error: Option<ErrorReport>,
}

/// Finite-difference reference solution (`solution.csv`, and `error.csv`
/// when the exact solution is known).
pub fn cmd_oracle(cfg: &RunConfig, dir: &Path) -> CliResult<OracleOutcome> {
    let problem = load_problem(cfg)?;
    let spec = &problem.spec;
    let dim = spec.dim();
    let cells = match &cfg.cells {
        Some(c) if c.len() == 1 => vec![c[0]; dim],
        Some(c) if c.len() == dim => c.clone(),
        Some(c) => return Err(CliError::Usage(format!("{} cell counts for a {dim}D problem", c.len()))),
        None => vec![if dim == 1 { 1024 } else { 128 }; dim],
    };
    prepare_dir(cfg, dir)?;
    report_warnings(dir, &problem.warnings)?;
    let settings = SolverSettings { tolerance: cfg.tolerance, max_iterations: cfg.max_solver_iterations };
    let use_psor = match cfg.solver.as_str() {
        "psor" => true,
        "pgd" => false,
        _ => dim == 1 && spec.p == 2.0,
    };
    let solution = if use_psor {
        solve_psor_1d(spec, cells[0], optimal_omega(cells[0]), &settings)?
    } else {
        solve_pgd(spec, &cells, &settings)?
    };
    fs::write(dir.join("solution.csv"), solution.to_csv())?;
    let max_error = solution.max_error(spec);
    let error = match solution.l1_error(spec) {
        Some(r) => {
            let (l1, relative) = r?;
            let e = ErrorReport {
                l1,
                relative,
                resolution: solution.grid.nodes_per_axis(),
                sample_count: None,
            };
            fs::write(
                dir.join("error.csv"),
                format!("max_error,l1,relative\n{:e},{:e},{:e}\n", max_error.unwrap_or(f64::NAN), l1, relative),
            )?;
            Some(e)
        }
        None => None,
    };
    Ok(OracleOutcome { solution, max_error, error })
}

/// Fits the network to the problem's obstacle and saves it as `pretrained.bin`.
pub fn cmd_pretrain(cfg: &RunConfig, dir: &Path) -> CliResult<PretrainReport> {
    let problem = load_problem(cfg)?;
    prepare_dir(cfg, dir)?;
    report_warnings(dir, &problem.warnings)?;
    let mut net = cfg.network_for(&problem.spec)?;
    let report = run_pretrain(cfg, &problem.spec, &mut net, cfg.iterations)?;
    net.save(&dir.join("pretrained.bin"))?;
    fs::write(dir.join("pretrain.csv"), pretrain_csv(&report))?;
    Ok(report)
}

/// Pretraining keeps the schedule's shape: the breakpoints are stretched by
/// the ratio of pretraining to training iterations.
fn run_pretrain(cfg: &RunConfig, spec: &ProblemSpec, net: &mut Network, iterations: usize) -> CliResult<PretrainReport> {
    let base = cfg.train_config(Sampling::Stratified)?;
    let stretch = |b: usize| (b as f64 * iterations as f64 / cfg.iterations.max(1) as f64).round() as usize;
    let breakpoints = (stretch(base.breakpoints.0), stretch(base.breakpoints.1));
    let tc = TrainConfig { iterations, breakpoints, ..base };
    let report = pretrain(net, &spec.obstacle, &spec.domain, &tc)?;
    if let Some(reason) = &report.aborted {
        return Err(CliError::Run(Error::NonFinite(reason.clone())));
    }
    Ok(report)
}

fn pretrain_csv(report: &PretrainReport) -> String {
    let mut out = String::from("iteration,mse\n");
    for (i, m) in report.mse.iter().enumerate() {
        let _ = writeln!(out, "{i},{m:e}");
    }
    out
}

pub struct GreenlandOutcome {
    pub pretrain: PretrainReport,
    /// Bedrock-fit MSE of the pretrained network on the evaluation batch.
    pub pretrain_mse: f64,
    /// Losses of the pretrained network, before stage-two training.
    pub initial_losses: LossBreakdown,
    pub train: TrainReport,
    /// Losses of the trained network on the evaluation batch.
    pub final_losses: LossBreakdown,
    /// The measured surface inserted into the same loss terms, same batch.
    pub benchmark: LossBreakdown,
    pub warnings: Vec<String>,
}

/// Two-stage run on bedrock/thickness rasters: fit the bedrock, then train on
/// the obstacle problem. The problem is built on the downsampled rasters and
/// the reference losses use the undownsampled surface.
pub fn cmd_greenland(cfg: &RunConfig, dir: &Path) -> CliResult<GreenlandOutcome> {
    let (bedrock, thickness) = match (&cfg.synthetic, &cfg.bedrock, &cfg.thickness) {
        (Some([nc, nr]), _, _) => synthetic_grids(*nc, *nr, 5000.0)?,
        (None, Some(b), Some(t)) => (Grid::read(b)?, Grid::read(t)?),
        (None, Some(_), None) => {
            return Err(CliError::Usage("the data benchmark needs a thickness raster".into()));
        }
        _ => return Err(CliError::Usage("greenland needs --bedrock and --thickness, or --synthetic".into())),
    };
    let full = build_problem(&bedrock, &thickness, cfg.p, cfg.alpha, cfg.beta, &GeoOptions::default())?;
    let problem =
        geo_problem(cfg, bedrock.downsample(cfg.downsample)?, thickness.downsample(cfg.downsample)?)?;
    let geo = problem.geo.as_ref().expect("grid problem");
    prepare_dir(cfg, dir)?;
    report_warnings(dir, &problem.warnings)?;
    if let Some(b) = &problem.bedrock_grid {
        b.write(&dir.join("bedrock_used.asc"))?;
    }

    let spec = &problem.spec;
    let eval = SampleBatch::draw_stratified(&spec.domain, 4096, 1024, cfg.seed, EVAL_STREAM)?;
    let surface = MappedField::new(Arc::clone(&full.surface), geo.bedrock.map());
    let benchmark = data_benchmark_losses(spec, &surface, &eval)?;

    let mut net = cfg.network_for(spec)?;
    let pre = run_pretrain(cfg, spec, &mut net, cfg.pretrain_iterations)?;
    let pretrain_mse = mse_on(&net, &spec.obstacle, &eval)?;
    net.save(&dir.join("pretrained.bin"))?;
    fs::write(dir.join("pretrain.csv"), pretrain_csv(&pre))?;
    let initial_losses = total_loss(&net, spec, &eval)?;

    let trained = train_and_dump(cfg, &problem, &mut net, dir)?;
    if let Some(reason) = &trained.report.aborted {
        return Err(CliError::Run(Error::NonFinite(reason.clone())));
    }
    let final_losses = total_loss(&net, spec, &eval)?;
    let mut bench = String::from("stage,loss1,loss2,loss3,total,scale\n");
    for (stage, l) in [("data", &benchmark), ("pretrained", &initial_losses), ("trained", &final_losses)] {
        let _ = writeln!(bench, "{stage},{:e},{:e},{:e},{:e},{}", l.loss1, l.loss2, l.loss3, l.total, ELEVATION_SCALE);
    }
    fs::write(dir.join("benchmark.csv"), bench)?;
    fs::write(dir.join("pretrain_mse.txt"), format!("{pretrain_mse:e}\n"))?;
    Ok(GreenlandOutcome {
        pretrain: pre,
        pretrain_mse,
        initial_losses,
        train: trained.report,
        final_losses,
        benchmark,
        warnings: problem.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(RunConfig::from_json(r#"{"alpah": 1}"#), Err(CliError::Usage(_))));
        let cfg = RunConfig::from_json(r#"{"problem": "mms1d-p2", "alpha": 100}"#).unwrap();
        assert_eq!(cfg.alpha, 100.0);
        assert_eq!(cfg.beta, 4000.0);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig { problem: Some("mms2d-p3".into()), minibatch: Some(64), ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig { alpha: 1.0, seed: 9, ..RunConfig::default() };
        let o = Overrides { alpha: Some(2.0), layers: Some(vec![8, 8]), no_layer_norm: true, ..Overrides::default() };
        o.apply(&mut cfg);
        assert_eq!((cfg.alpha, cfg.seed, cfg.layers.as_slice(), cfg.layer_norm), (2.0, 9, &[8, 8][..], false));
    }

    #[test]
    fn duplicate_pairs_get_distinct_seeds() {
        let pairs = [[100.0, 100.0], [4000.0, 4000.0], [100.0, 100.0], [100.0, 100.0]];
        assert_eq!(sweep_seeds(&pairs, 5), vec![5, 5, 6, 7]);
    }

    #[test]
    fn flag_value_parsers() {
        assert_eq!(parse_dims("32x16").unwrap(), [32, 16]);
        assert!(parse_dims("32").is_err());
        assert_eq!(parse_pair("500:100").unwrap(), [500.0, 100.0]);
        assert!(parse_pair("500").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["deep-obstacle", "train", "--iters", "0"]), 2);
        assert_eq!(main_with_args(["deep-obstacle", "bogus"]), 2);
        assert_eq!(main_with_args(["deep-obstacle", "train", "--problem", "mms9d"]), 2);
        assert_eq!(main_with_args(["deep-obstacle", "oracle", "--problem", "mms2d-p1.5"]), 2);
    }

    #[test]
    fn missing_thickness_is_reported() {
        let cfg = RunConfig { bedrock: Some("b.asc".into()), ..RunConfig::default() };
        let dir = std::env::temp_dir().join(format!("deep-obstacle-cli-{}", std::process::id()));
        assert!(matches!(cmd_greenland(&cfg, &dir), Err(CliError::Usage(_))));
    }
}
