//! Experiment driver behind the `whittle` binary.
//!
//! Every command reads one JSON experiment config (`--config` or a shipped
//! `--preset`), runs the requested computation and writes CSV files into the
//! output directory. Each CSV starts with a provenance comment line carrying
//! the SHA-256 of the effective config, the seed list and the crate version.
//!
//! Exit codes: 0 success, 1 a certified check failed or is unavailable,
//! 2 usage or config error.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fluid::{analytic_blocks, linearize, stability_certificate, FluidModel};
use crate::markov_belief::{belief_value, BeliefState, ChannelClass, ClassMix};
use crate::relaxed_policy::{solve_relaxed, RelaxedSolution};
use crate::simulator::{
    hitting_time, lattice_round, occupancy, run_throughput, trajectory_deviation, Engine, Estimate, InitialState,
    Policy, SimConfig,
};
use crate::whittle_index::{build_index_table, IndexTable};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "WHITTLE_WORKERS";

const PRESETS: &[(&str, &str)] = &[
    ("two-class", include_str!("../presets/two-class.json")),
    ("single", include_str!("../presets/single.json")),
    ("fig2", include_str!("../presets/fig2.json")),
    ("fig5", include_str!("../presets/fig5.json")),
    ("assumption-psi", include_str!("../presets/assumption-psi.json")),
    ("throughput-gap", include_str!("../presets/throughput-gap.json")),
];

/// Names of the shipped presets.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub p: f64,
    pub r: f64,
}

fn default_tau() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub classes: Vec<ClassSpec>,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// All channels just observed OFF.
    X,
    /// No channel observed yet.
    Y,
    /// Lattice point nearest the relaxed occupancy.
    Zeta,
}

impl Start {
    fn label(&self) -> &'static str {
        match self {
            Start::X => "x",
            Start::Y => "y",
            Start::Zeta => "zeta",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    HittingTime,
    ThroughputGap,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub n: Vec<usize>,
    pub horizon: usize,
    pub burn_in: Option<usize>,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub starts: Vec<Start>,
    pub policy: Policy,
    pub engine: Engine,
    pub max_t: usize,
    pub fluid_steps: usize,
    pub deviation_steps: usize,
    pub sweep: SweepKind,
    /// Whether `pipeline` also runs the simulation suite.
    pub simulate: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            n: vec![1000],
            horizon: 10_000,
            burn_in: None,
            seeds: vec![1, 2, 3, 4, 5],
            epsilon: 0.005,
            starts: vec![Start::X],
            policy: Policy::Whittle,
            engine: Engine::Aggregate,
            max_t: 100_000,
            fluid_steps: 10_000,
            deviation_steps: 200,
            sweep: SweepKind::HittingTime,
            simulate: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub mix: MixSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            _ => 2,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}; known: {}", preset_names().join(", "))))?;
        Self::parse(text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != 1 {
            return Err(CliError::Config(format!("unsupported schema {}", self.schema)));
        }
        if self.mix.classes.is_empty() {
            return Err(CliError::Config("class list is empty".into()));
        }
        let mix = self.class_mix()?;
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if e.starts.is_empty() {
            return Err(CliError::Config("start list is empty".into()));
        }
        if !(e.epsilon > 0.0) {
            return Err(CliError::Config(format!("epsilon must be positive, got {}", e.epsilon)));
        }
        for &n in &e.n {
            let cfg = SimConfig {
                burn_in: e.burn_in,
                ..SimConfig::new(mix.clone(), n, e.horizon, 0, e.policy, InitialState::AllStationary)
            };
            cfg.validate().map_err(|err| CliError::Config(err.to_string()))?;
        }
        Ok(())
    }

    pub fn class_mix(&self) -> Result<ClassMix, CliError> {
        let classes = self
            .mix
            .classes
            .iter()
            .map(|c| ChannelClass::new(c.p, c.r, self.mix.tau))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(e.to_string()))?;
        ClassMix::new(classes, self.mix.gamma.clone(), self.mix.alpha).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Parser, Debug)]
#[command(name = "whittle", version, about = "Whittle index scheduling over Markov ON/OFF channels")]
pub struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Shipped preset: two_class, single, fig2, fig5, assumption-psi, throughput-gap.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory (default: config `output_dir`, else `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// index_table.csv: class,state,age,belief,index
    IndexTable,
    /// Prints the relaxed solution as JSON; zeta.csv: class,state,age,zeta
    SolveRelaxed,
    /// fluid_run.csv: t,distance,z_0..z_{d-1} from the first configured start
    FluidRun,
    /// stability.csv: k,rho_hat (exit 1 when not certified)
    Stability,
    /// simulate.csv: n,policy,start,belief_mean,belief_se,realized_mean,realized_se,activation_mean,activation_se,bound
    Simulate,
    /// hitting_time.csv: n,start,mean,se,seeds,misses
    HittingTime,
    /// occupancy.csv: n,start,epsilon,mean,se,seeds
    Occupancy,
    /// deviation.csv: n,median,mean,se,seeds (start at the lattice point nearest zeta)
    Deviation,
    /// report.json plus index_table.csv, zeta.csv, stability.csv (exit 1 if a check fails)
    Pipeline,
    /// sweep.csv: hitting_time -> n,start,mean,se,seeds,misses; throughput_gap -> n,bound,mean,se,gap,seeds
    Sweep,
    /// Lists the shipped presets
    Presets,
}

/// Loaded config plus output location.
pub struct Context {
    pub config: ExperimentConfig,
    pub mix: ClassMix,
    pub table: IndexTable,
    pub out: PathBuf,
}

impl Context {
    fn provenance(&self) -> String {
        let seeds: Vec<String> = self.config.experiment.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "# whittle {VERSION} config_sha256={} seeds={}\n",
            self.config.digest(),
            seeds.join(";")
        )
    }

    fn write_csv(&self, file: &str, header: &str, rows: &[String]) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(file);
        let mut body = self.provenance();
        body.push_str(header);
        body.push('\n');
        for r in rows {
            body.push_str(r);
            body.push('\n');
        }
        std::fs::write(&path, body)?;
        Ok(path)
    }

    fn solve(&self) -> Result<RelaxedSolution, CliError> {
        solve_relaxed(&self.mix, &self.table).map_err(|e| CliError::Config(e.to_string()))
    }

    fn sim_config(&self, n: usize, start: Start, seed: u64, sol: Option<&RelaxedSolution>) -> Result<SimConfig, CliError> {
        let e = &self.config.experiment;
        let initial = match start {
            Start::X => InitialState::AllOffObserved,
            Start::Y => InitialState::AllStationary,
            Start::Zeta => {
                let zeta = sol
                    .and_then(|s| s.zeta.as_ref())
                    .ok_or_else(|| CliError::Check("relaxed solution is degenerate, no zeta start".into()))?;
                let counts = lattice_round(zeta, &self.mix, n);
                InitialState::Explicit(counts.iter().map(|&c| c as f64 / n as f64).collect())
            }
        };
        Ok(SimConfig {
            burn_in: e.burn_in,
            engine: e.engine,
            ..SimConfig::new(self.mix.clone(), n, e.horizon, seed, e.policy, initial)
        })
    }

    fn fluid_start(&self, start: Start, sol: &RelaxedSolution) -> Result<Vec<f64>, CliError> {
        let mut z = vec![0.0; self.mix.dim()];
        match start {
            Start::X | Start::Y => {
                let s = if start == Start::X { BeliefState::OffAge(1) } else { BeliefState::Stationary };
                for k in 0..self.mix.num_classes() {
                    z[self.mix.global_index(k, s)] = self.mix.gamma[k];
                }
            }
            Start::Zeta => z = zeta_of(sol)?.clone(),
        }
        Ok(z)
    }
}

fn zeta_of(sol: &RelaxedSolution) -> Result<&Vec<f64>, CliError> {
    sol.zeta
        .as_ref()
        .ok_or_else(|| CliError::Check(format!("transient regime ({:?}): no stationary occupancy", sol.regime)))
}

fn se_field(e: &Estimate) -> String {
    e.se.map(|s| s.to_string()).unwrap_or_default()
}

fn state_fields(s: BeliefState) -> (String, String) {
    match s {
        BeliefState::OffAge(l) => ("off".into(), l.to_string()),
        BeliefState::OnAge(l) => ("on".into(), l.to_string()),
        BeliefState::Stationary => ("stationary".into(), String::new()),
    }
}

fn load(cli: &Cli) -> Result<Context, CliError> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --config or --preset, not both".into())),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => return Err(CliError::Usage("--config or --preset is required".into())),
    };
    if let Some(seeds) = &cli.seeds {
        config.experiment.seeds = seeds.clone();
        config.validate()?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mix = config.class_mix()?;
    let table = build_index_table(&mix);
    Ok(Context { config, mix, table, out })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_pool();
    match dispatch(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("whittle: {e}");
            e.exit_code()
        }
    }
}

fn init_pool() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    if cli.command == Command::Presets {
        for name in preset_names() {
            writeln!(stdout, "{name}")?;
        }
        return Ok(());
    }
    let ctx = load(cli)?;
    match cli.command {
        Command::IndexTable => cmd_index_table(&ctx, stdout),
        Command::SolveRelaxed => cmd_solve_relaxed(&ctx, stdout),
        Command::FluidRun => cmd_fluid_run(&ctx, stdout),
        Command::Stability => cmd_stability(&ctx, stdout),
        Command::Simulate => cmd_simulate(&ctx, stdout),
        Command::HittingTime => cmd_hitting_time(&ctx, stdout, "hitting_time.csv"),
        Command::Occupancy => cmd_occupancy(&ctx, stdout),
        Command::Deviation => cmd_deviation(&ctx, stdout),
        Command::Pipeline => cmd_pipeline(&ctx, stdout),
        Command::Sweep => match ctx.config.experiment.sweep {
            SweepKind::HittingTime => cmd_hitting_time(&ctx, stdout, "sweep.csv"),
            SweepKind::ThroughputGap => cmd_throughput_gap(&ctx, stdout),
        },
        Command::Presets => unreachable!(),
    }
}

fn index_rows(ctx: &Context) -> Vec<String> {
    (0..ctx.mix.dim())
        .map(|i| {
            let (k, s) = ctx.mix.locate(i);
            let (kind, age) = state_fields(s);
            format!("{k},{kind},{age},{},{}", belief_value(&ctx.mix.classes[k], s), ctx.table.index(i))
        })
        .collect()
}

pub fn cmd_index_table(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let path = ctx.write_csv("index_table.csv", "class,state,age,belief,index", &index_rows(ctx))?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

fn zeta_rows(ctx: &Context, zeta: &[f64]) -> Vec<String> {
    zeta.iter()
        .enumerate()
        .map(|(i, z)| {
            let (k, s) = ctx.mix.locate(i);
            let (kind, age) = state_fields(s);
            format!("{k},{kind},{age},{z}")
        })
        .collect()
}

#[derive(Serialize)]
struct RelaxedSummary<'a> {
    omega_star: f64,
    thresholds: &'a [crate::relaxed_policy::ClassThreshold],
    rho_star: f64,
    activation: &'a [f64],
    throughput_per_user: Option<f64>,
    regime: &'a crate::relaxed_policy::Regime,
    warnings: &'a [crate::relaxed_policy::RelaxedWarning],
}

fn summary(sol: &RelaxedSolution) -> RelaxedSummary<'_> {
    RelaxedSummary {
        omega_star: sol.omega_star,
        thresholds: &sol.thresholds,
        rho_star: sol.rho_star,
        activation: &sol.activation,
        throughput_per_user: sol.throughput_per_user.is_finite().then_some(sol.throughput_per_user),
        regime: &sol.regime,
        warnings: &sol.warnings,
    }
}

pub fn cmd_solve_relaxed(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    let json = serde_json::to_string_pretty(&summary(&sol)).expect("summary serializes");
    writeln!(stdout, "{json}")?;
    if let Some(zeta) = &sol.zeta {
        let path = ctx.write_csv("zeta.csv", "class,state,age,zeta", &zeta_rows(ctx, zeta))?;
        writeln!(stdout, "wrote {}", path.display())?;
    }
    Ok(())
}

pub fn cmd_fluid_run(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    let zeta = zeta_of(&sol)?;
    let start = ctx.config.experiment.starts[0];
    let z0 = ctx.fluid_start(start, &sol)?;
    let model = FluidModel::new(&ctx.mix, &ctx.table);
    let traj = model
        .trajectory(&z0, ctx.config.experiment.fluid_steps, zeta, ctx.table.find_rung(sol.omega_star), true)
        .map_err(|e| CliError::Check(e.to_string()))?;
    let mut header = String::from("t,distance");
    for i in 0..ctx.mix.dim() {
        let _ = write!(header, ",z_{i}");
    }
    let rows: Vec<String> = traj
        .states
        .iter()
        .zip(&traj.distance)
        .enumerate()
        .map(|(t, (z, d))| {
            let mut row = format!("{t},{d}");
            for x in z {
                let _ = write!(row, ",{x}");
            }
            row
        })
        .collect();
    let path = ctx.write_csv("fluid_run.csv", &header, &rows)?;
    writeln!(
        stdout,
        "start {} final distance {:e}, stayed in region: {}; wrote {}",
        start.label(),
        traj.distance.last().copied().unwrap_or(f64::NAN),
        traj.stayed_in_region,
        path.display()
    )?;
    Ok(())
}

pub fn cmd_stability(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    let lin = linearize(&sol, &ctx.table).map_err(|e| CliError::Check(e.to_string()))?;
    let cert = stability_certificate(&lin.u_star);
    let rows: Vec<String> = cert.estimates.iter().map(|(k, r)| format!("{k},{r}")).collect();
    let path = ctx.write_csv("stability.csv", "k,rho_hat", &rows)?;
    writeln!(stdout, "certified: {}; wrote {}", cert.certified, path.display())?;
    if !cert.certified {
        return Err(CliError::Check("stability not certified".into()));
    }
    Ok(())
}

pub fn cmd_simulate(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let e = &ctx.config.experiment;
    let sol = ctx.solve()?;
    let mut rows = Vec::new();
    for &n in &e.n {
        for &start in &e.starts {
            let cfg = ctx.sim_config(n, start, 0, Some(&sol))?;
            let rep = run_throughput(&cfg, &e.seeds).map_err(|err| CliError::Config(err.to_string()))?;
            let policy = match e.policy {
                Policy::Whittle => "whittle",
                Policy::Relaxed => "relaxed",
            };
            rows.push(format!(
                "{n},{policy},{},{},{},{},{},{},{},{}",
                start.label(),
                rep.belief.mean,
                se_field(&rep.belief),
                rep.realized.mean,
                se_field(&rep.realized),
                rep.activation.mean,
                se_field(&rep.activation),
                sol.throughput_per_user
            ));
        }
    }
    let path = ctx.write_csv(
        "simulate.csv",
        "n,policy,start,belief_mean,belief_se,realized_mean,realized_se,activation_mean,activation_se,bound",
        &rows,
    )?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

/// Hitting times over seeds; misses are runs that never entered the ball.
pub fn hitting_times(ctx: &Context, n: usize, start: Start, sol: &RelaxedSolution) -> Result<(Estimate, usize), CliError> {
    let e = &ctx.config.experiment;
    let zeta = zeta_of(sol)?;
    let configs = e
        .seeds
        .iter()
        .map(|&s| ctx.sim_config(n, start, s, Some(sol)))
        .collect::<Result<Vec<_>, _>>()?;
    let times: Vec<Option<usize>> = configs
        .par_iter()
        .map(|c| hitting_time(c, e.epsilon, zeta, e.max_t))
        .collect::<Result<_, _>>()
        .map_err(|err| CliError::Config(err.to_string()))?;
    let hits: Vec<f64> = times.iter().flatten().map(|&t| t as f64).collect();
    let misses = times.len() - hits.len();
    let est = if hits.is_empty() { Estimate { mean: f64::NAN, se: None, n: 0 } } else { Estimate::from_samples(&hits) };
    Ok((est, misses))
}

fn cmd_hitting_time(ctx: &Context, stdout: &mut dyn Write, file: &str) -> Result<(), CliError> {
    let e = &ctx.config.experiment;
    let sol = ctx.solve()?;
    let mut rows = Vec::new();
    for &n in &e.n {
        for &start in &e.starts {
            let (est, misses) = hitting_times(ctx, n, start, &sol)?;
            rows.push(format!("{n},{},{},{},{},{misses}", start.label(), est.mean, se_field(&est), e.seeds.len()));
        }
    }
    let path = ctx.write_csv(file, "n,start,mean,se,seeds,misses", &rows)?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

pub fn cmd_occupancy(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let e = &ctx.config.experiment;
    let sol = ctx.solve()?;
    let zeta = zeta_of(&sol)?;
    let mut rows = Vec::new();
    for &n in &e.n {
        for &start in &e.starts {
            let configs =
                e.seeds.iter().map(|&s| ctx.sim_config(n, start, s, Some(&sol))).collect::<Result<Vec<_>, _>>()?;
            let fr: Vec<f64> = configs
                .par_iter()
                .map(|c| occupancy(c, e.epsilon, zeta))
                .collect::<Result<_, _>>()
                .map_err(|err| CliError::Config(err.to_string()))?;
            let est = Estimate::from_samples(&fr);
            rows.push(format!("{n},{},{},{},{},{}", start.label(), e.epsilon, est.mean, se_field(&est), e.seeds.len()));
        }
    }
    let path = ctx.write_csv("occupancy.csv", "n,start,epsilon,mean,se,seeds", &rows)?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

/// Sup-deviations between simulation and fluid, one per seed.
pub fn deviations(ctx: &Context, n: usize, sol: &RelaxedSolution) -> Result<Vec<f64>, CliError> {
    let e = &ctx.config.experiment;
    let configs = e
        .seeds
        .iter()
        .map(|&s| ctx.sim_config(n, Start::Zeta, s, Some(sol)))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .par_iter()
        .map(|c| trajectory_deviation(c, e.deviation_steps))
        .collect::<Result<_, _>>()
        .map_err(|err| CliError::Config(err.to_string()))
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn cmd_deviation(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let e = &ctx.config.experiment;
    let sol = ctx.solve()?;
    let mut rows = Vec::new();
    for &n in &e.n {
        let d = deviations(ctx, n, &sol)?;
        let est = Estimate::from_samples(&d);
        rows.push(format!("{n},{},{},{},{}", median(&d), est.mean, se_field(&est), e.seeds.len()));
    }
    let path = ctx.write_csv("deviation.csv", "n,median,mean,se,seeds", &rows)?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

fn cmd_throughput_gap(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let e = &ctx.config.experiment;
    let sol = ctx.solve()?;
    let bound = sol.throughput_per_user;
    let mut rows = Vec::new();
    for &n in &e.n {
        let cfg = ctx.sim_config(n, e.starts[0], 0, Some(&sol))?;
        let rep = run_throughput(&cfg, &e.seeds).map_err(|err| CliError::Config(err.to_string()))?;
        rows.push(format!(
            "{n},{bound},{},{},{},{}",
            rep.belief.mean,
            se_field(&rep.belief),
            bound - rep.belief.mean,
            e.seeds.len()
        ));
    }
    let path = ctx.write_csv("sweep.csv", "n,bound,mean,se,gap,seeds", &rows)?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    value: Option<f64>,
}

#[derive(Serialize)]
struct PipelineReport<'a> {
    name: &'a str,
    version: &'static str,
    config_sha256: String,
    relaxed: RelaxedSummary<'a>,
    status: &'static str,
    skipped: Vec<String>,
    checks: Vec<Check>,
    stability: Option<Vec<(u32, f64)>>,
    simulation: Option<Vec<SimulationRow>>,
}

#[derive(Serialize)]
struct SimulationRow {
    n: usize,
    belief: Estimate,
    activation: Estimate,
    bound: f64,
}

pub fn cmd_pipeline(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    cmd_index_table(ctx, stdout)?;
    let mut checks = Vec::new();
    let mut skipped = Vec::new();
    let mut stability = None;
    let mut simulation = None;
    let status;
    match &sol.zeta {
        None => {
            status = "transient regime";
            skipped.push(format!("fluid and simulation checks skipped: {:?}", sol.regime));
        }
        Some(zeta) => {
            status = "regular";
            ctx.write_csv("zeta.csv", "class,state,age,zeta", &zeta_rows(ctx, zeta))?;
            let constraint = (sol.total_activation() - ctx.mix.alpha).abs();
            checks.push(Check { name: "constraint_residual", passed: constraint < 1e-12, value: Some(constraint) });
            let model = FluidModel::new(&ctx.mix, &ctx.table);
            let next = model.step(zeta).map_err(|e| CliError::Check(e.to_string()))?;
            let residual = next.iter().zip(zeta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            checks.push(Check { name: "fluid_fixed_point", passed: residual < 1e-10, value: Some(residual) });
            match linearize(&sol, &ctx.table) {
                Ok(lin) => {
                    let red = &lin.u_star * lin.reduce(zeta) + &lin.b_star;
                    checks.push(Check { name: "reduced_fixed_point", passed: red.amax() < 1e-12, value: Some(red.amax()) });
                    match analytic_blocks(&sol) {
                        Ok(blocks) => {
                            let diff = (blocks.assemble() - &lin.u_star).amax();
                            checks.push(Check { name: "analytic_blocks", passed: diff < 1e-12, value: Some(diff) });
                        }
                        Err(e) => skipped.push(format!("analytic blocks: {e}")),
                    }
                    let cert = stability_certificate(&lin.u_star);
                    let rows: Vec<String> = cert.estimates.iter().map(|(k, r)| format!("{k},{r}")).collect();
                    ctx.write_csv("stability.csv", "k,rho_hat", &rows)?;
                    checks.push(Check {
                        name: "stability_certificate",
                        passed: cert.certified,
                        value: cert.estimates.last().map(|e| e.1),
                    });
                    stability = Some(cert.estimates);
                }
                Err(e) => skipped.push(format!("linearization: {e}")),
            }
            if ctx.config.experiment.simulate {
                let e = &ctx.config.experiment;
                let mut rows = Vec::new();
                for &n in &e.n {
                    let cfg = ctx.sim_config(n, e.starts[0], 0, Some(&sol))?;
                    let rep = run_throughput(&cfg, &e.seeds).map_err(|err| CliError::Config(err.to_string()))?;
                    rows.push(SimulationRow { n, belief: rep.belief, activation: rep.activation, bound: sol.throughput_per_user });
                }
                simulation = Some(rows);
            }
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let report = PipelineReport {
        name: &ctx.config.name,
        version: VERSION,
        config_sha256: ctx.config.digest(),
        relaxed: summary(&sol),
        status,
        skipped,
        checks,
        stability,
        simulation,
    };
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    for w in &sol.warnings {
        writeln!(stdout, "warning: {w:?}")?;
    }
    writeln!(stdout, "status: {status}; wrote {}", path.display())?;
    if !failed.is_empty() {
        return Err(CliError::Check(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(())
}

/// Reads a CSV written by this module, dropping the provenance line.
pub fn csv_body(path: &Path) -> std::io::Result<String> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n"))
}
