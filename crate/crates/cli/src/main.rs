//! `su11`: command-line driver for the SU(1,1) phase-estimation simulator.
//!
//! Exit codes: 0 success, 1 domain error (invalid parameters, failed
//! campaign, failed verification), 2 usage error (bad flags, unreadable or
//! malformed config).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use su11_core::analysis::benchmarks;
use su11_core::ensemble::{
    format_threshold, run_campaign, threshold_scan, CampaignConfig, EnsembleStats, GridSettings, ThresholdConfig,
};
use su11_core::export::{
    format_f64, linspace, write_likelihood_csv, write_posterior_csv, write_trajectory_csv, Document, Provenance,
};
use su11_core::measurement::{LikelihoodModel, Scheme};
use su11_core::protocol::{run_trial, ModelSet, ProtocolConfig, ProtocolMode};
use su11_core::tmsq::{OpaParams, SchmidtTable, DEFAULT_TAIL_TOL};
use su11_core::verify::run_battery;

const SEED_ENV: &str = "SU11_SEED";

#[derive(Parser)]
#[command(name = "su11", version, about = "Adaptive phase estimation with vacuum-seeded SU(1,1) interferometers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print QCRB, Heisenberg and shot-noise variances as JSON.
    Limits(LimitsArgs),
    /// Dump outcome probabilities over a phase-difference sweep as CSV.
    Likelihood(LikelihoodArgs),
    /// Run one seeded trial and write its trajectory.
    Run(RunArgs),
    /// Run a Monte Carlo campaign and write ensemble statistics.
    Ensemble(EnsembleArgs),
    /// Scan M_threshold over fixed feedback phases.
    Threshold(ThresholdArgs),
    /// Run the invariant battery and write a pass/fail report.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Ladder,
    Optimal,
}

impl From<ProtocolArg> for ProtocolMode {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Fixed => ProtocolMode::FixedTheta,
            ProtocolArg::Ladder => ProtocolMode::Ladder,
            ProtocolArg::Optimal => ProtocolMode::OptimalAdaptive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    PhotonNumber,
    Optimal,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct OutArg {
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LimitsArgs {
    #[arg(long)]
    mean_photons: f64,
    #[arg(long, default_value_t = 1000)]
    measurements: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct LikelihoodArgs {
    #[arg(long)]
    mean_photons: f64,
    #[arg(long, value_enum, default_value = "photon-number")]
    scheme: SchemeArg,
    /// Number of phase differences, evenly spaced over [lo, hi].
    #[arg(long, default_value_t = 101)]
    points: usize,
    #[arg(long, default_value_t = -std::f64::consts::PI, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = std::f64::consts::PI, allow_hyphen_values = true)]
    hi: f64,
    /// Largest outcome index listed.
    #[arg(long, default_value_t = 10)]
    max_outcome: usize,
    #[command(flatten)]
    out: OutArg,
}

/// Flags shared by the trial-running subcommands; each overrides the config.
#[derive(Args)]
struct ProtocolFlags {
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long)]
    measurements: Option<usize>,
    /// Fixed feedback phase, or the starting phase of the optimal protocol.
    #[arg(long)]
    theta: Option<f64>,
    /// Ladder stage-1 length.
    #[arg(long)]
    pre_rounds: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags take precedence over its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ProtocolFlags {
    fn apply(&self, p: &mut ProtocolConfig, grid: &mut GridSettings) {
        if let Some(mode) = self.protocol {
            p.mode = mode.into();
        }
        if let Some(m) = self.measurements {
            p.total_measurements = m;
        }
        if let Some(t) = self.theta {
            match p.mode {
                ProtocolMode::OptimalAdaptive => p.initial_theta = Some(t),
                _ => p.fixed_theta = Some(t),
            }
        }
        if let Some(r) = self.pre_rounds {
            p.ladder.pre_rounds = r;
        }
        if let Some(n) = self.grid_points {
            grid.points = n;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    phi_true: Option<f64>,
    #[arg(long)]
    mean_photons: Option<f64>,
    #[command(flatten)]
    flags: ProtocolFlags,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Also write the final posterior (`phi,density`) to this file.
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    mean_photons: Option<Vec<f64>>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    phi_true: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[command(flatten)]
    flags: ProtocolFlags,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Per-trial summaries as CSV.
    #[arg(long)]
    trials_out: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Comma-separated feedback phases, each below phi_true.
    #[arg(long, value_delimiter = ',')]
    thetas: Option<Vec<f64>>,
    #[arg(long)]
    phi_true: Option<f64>,
    #[arg(long)]
    mean_photons: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_measurements: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

/// Configuration of a single `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    protocol: ProtocolConfig,
    mean_photons: f64,
    seed: u64,
    grid: GridSettings,
    tail_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            mean_photons: 4.0,
            seed: 0,
            grid: GridSettings::default(),
            tail_tol: DEFAULT_TAIL_TOL,
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

impl From<su11_core::Error> for Failure {
    fn from(e: su11_core::Error) -> Self {
        Failure::Domain(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Domain(e) => e,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("malformed config {}", path.display()))
        .map_err(Failure::Usage)
}

/// Config value, then `SU11_SEED`, then the flag.
fn resolve_seed(config: u64, flag: Option<u64>) -> CliResult<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(anyhow!("{SEED_ENV} must be a decimal 64-bit integer, got {v:?}"))),
        Err(_) => Ok(config),
    }
}

fn emit(out: &OutArg, bytes: &[u8]) -> CliResult<()> {
    write_to(out.out.as_deref(), bytes)
}

fn write_to(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, bytes)
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(Failure::Domain),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct LimitsOutput {
    #[serde(flatten)]
    benchmarks: su11_core::analysis::Benchmarks,
    definitions: Definitions,
}

#[derive(Serialize)]
struct Definitions {
    qcrb: &'static str,
    heisenberg: &'static str,
    shot_noise: &'static str,
}

fn limits(args: LimitsArgs) -> CliResult<()> {
    let b = benchmarks(args.measurements, args.mean_photons)?;
    let out = LimitsOutput {
        benchmarks: b,
        definitions: Definitions {
            qcrb: "1/(M n(n+2))",
            heisenberg: "1/(M n^2) (convention)",
            shot_noise: "1/(M n) (convention)",
        },
    };
    let config = serde_json::json!({ "mean_photons": args.mean_photons, "measurements": args.measurements });
    let doc = Document::new("su11.limits/1", Provenance::new(&config, None), out);
    emit(&args.out, doc.to_json().as_bytes())
}

fn likelihood(args: LikelihoodArgs) -> CliResult<()> {
    let scheme = match args.scheme {
        SchemeArg::PhotonNumber => Scheme::PhotonNumber,
        SchemeArg::Optimal => Scheme::Optimal,
    };
    if args.points < 1 || !(args.lo <= args.hi) {
        return Err(Failure::Domain(anyhow!("need points >= 1 and lo <= hi")));
    }
    let params = OpaParams::from_mean_photons(args.mean_photons)?;
    let table = SchmidtTable::for_amplitudes(params, DEFAULT_TAIL_TOL)?;
    let model = LikelihoodModel::new(scheme, std::sync::Arc::new(table));
    let config = serde_json::json!({
        "mean_photons": args.mean_photons,
        "scheme": scheme,
        "points": args.points,
        "lo": args.lo,
        "hi": args.hi,
        "max_outcome": args.max_outcome,
    });
    let mut buf = Vec::new();
    write_likelihood_csv(
        &mut buf,
        &Provenance::new(&config, None),
        &model,
        &linspace(args.lo, args.hi, args.points),
        args.max_outcome,
    )?;
    emit(&args.out, &buf)
}

fn run(args: RunArgs) -> CliResult<()> {
    let mut config: RunConfig = load_config(args.flags.config.as_deref())?;
    args.flags.apply(&mut config.protocol, &mut config.grid);
    if let Some(phi) = args.phi_true {
        config.protocol.phi_true = phi;
    }
    if let Some(n) = args.mean_photons {
        config.mean_photons = n;
    }
    config.seed = resolve_seed(config.seed, args.flags.seed)?;

    let grid = config.grid.build()?;
    config.protocol.validate(&grid)?;
    let models = ModelSet::with_tail_tol(config.mean_photons, grid, config.tail_tol)?;
    let trial = run_trial(&config.protocol, &models, config.seed)?;
    let provenance = Provenance::new(&config, Some(config.seed));

    let mut buf = Vec::new();
    match args.format {
        Format::Csv => write_trajectory_csv(&mut buf, &provenance, &trial.record)?,
        Format::Json => {
            let doc = Document::new("su11.run/1", provenance.clone(), &trial.record);
            buf.extend_from_slice(doc.to_json().as_bytes());
        }
    }
    if let Some(path) = &args.posterior {
        let mut post = Vec::new();
        write_posterior_csv(&mut post, &provenance, &trial.posterior)?;
        write_to(Some(path), &post)?;
    }
    emit(&args.out, &buf)
}

fn stats_csv(stats: &[EnsembleStats]) -> String {
    let mut s = String::from(
        "mean_photons,phi_true,trials,failed,mse,mse_ci_lo,mse_ci_hi,mean_posterior_variance,\
         median_posterior_variance,bias,unimodal_fraction,qcrb,heisenberg,shot_noise\n",
    );
    for e in stats {
        let b = &e.benchmarks;
        let row = [
            e.mean_photons,
            e.phi_true,
            e.trials as f64,
            e.failed as f64,
            e.mse,
            e.mse_ci[0],
            e.mse_ci[1],
            e.mean_posterior_variance,
            e.median_posterior_variance,
            e.bias,
            e.unimodal_fraction,
            b.qcrb,
            b.heisenberg,
            b.shot_noise,
        ];
        s.push_str(&row.map(format_f64).join(","));
        s.push('\n');
    }
    s
}

fn trials_csv(stats: &[EnsembleStats]) -> String {
    let mut s = String::from(
        "mean_photons,phi_true,trial,seed,estimate,map,posterior_variance,bimodal,m_threshold,pruned,error\n",
    );
    for e in stats {
        for t in &e.summaries {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let r = t.result.as_ref();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.mean_photons,
                e.phi_true,
                t.trial,
                t.seed,
                opt(r.map(|r| format_f64(r.estimate))),
                opt(r.map(|r| format_f64(r.map))),
                opt(r.map(|r| format_f64(r.posterior_variance))),
                opt(r.map(|r| r.peaks.is_bimodal().to_string())),
                opt(r.and_then(|r| r.m_threshold).map(|m| m.to_string())),
                opt(r.and_then(|r| r.pruned).map(|p| p.to_string())),
                // errors are free text; keep the CSV well formed
                opt(t.error.as_ref().map(|e| format!("\"{}\"", e.replace('"', "\"\"")))),
            ));
        }
    }
    s
}

fn csv_with_provenance(provenance: &Provenance, body: &str) -> String {
    format!(
        "# code_version: {}\n# master_seed: {}\n# config: {}\n{body}",
        provenance.code_version,
        provenance.master_seed.map_or("none".to_string(), |s| s.to_string()),
        provenance.config
    )
}

fn ensemble(args: EnsembleArgs) -> CliResult<()> {
    let mut config: CampaignConfig = load_config(args.flags.config.as_deref())?;
    args.flags.apply(&mut config.protocol, &mut config.grid);
    if let Some(n) = args.mean_photons {
        config.mean_photons = n;
    }
    if let Some(p) = args.phi_true {
        config.phi_true = p;
    }
    if let Some(t) = args.trials {
        config.trials = t;
    }
    config.master_seed = resolve_seed(config.master_seed, args.flags.seed)?;
    if let Some(out) = &args.out.out {
        config.outputs.stats = Some(out.clone());
    }
    if let Some(out) = &args.trials_out {
        config.outputs.trials = Some(out.clone());
    }

    let stats = run_campaign(&config)?;
    let provenance = Provenance::new(&config, Some(config.master_seed));
    let body = match args.format {
        Format::Json => Document::new("su11.ensemble/1", provenance.clone(), &stats).to_json(),
        Format::Csv => csv_with_provenance(&provenance, &stats_csv(&stats)),
    };
    if let Some(path) = &config.outputs.trials {
        write_to(Some(path), csv_with_provenance(&provenance, &trials_csv(&stats)).as_bytes())?;
    }
    write_to(config.outputs.stats.as_deref(), body.as_bytes())
}

fn threshold(args: ThresholdArgs) -> CliResult<()> {
    let mut config: ThresholdConfig = load_config(args.config.as_deref())?;
    if let Some(t) = args.thetas {
        config.thetas = t;
    }
    if let Some(p) = args.phi_true {
        config.phi_true = p;
    }
    if let Some(n) = args.mean_photons {
        config.mean_photons = n;
    }
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(m) = args.max_measurements {
        config.max_measurements = m;
    }
    if let Some(n) = args.grid_points {
        config.grid.points = n;
    }
    config.master_seed = resolve_seed(config.master_seed, args.seed)?;

    let scan = threshold_scan(&config)?;
    let provenance = Provenance::new(&config, Some(config.master_seed));
    let body = match args.format {
        Format::Json => Document::new("su11.threshold/1", provenance, &scan).to_json(),
        Format::Csv => {
            let max = config.max_measurements;
            let mut s = String::from("theta,median,q1,q3,censored,trials\n");
            for r in &scan.rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    format_f64(r.theta),
                    format_threshold(r.median, max),
                    format_threshold(r.q1, max),
                    format_threshold(r.q3, max),
                    r.censored,
                    r.trials
                ));
            }
            csv_with_provenance(&provenance, &s)
        }
    };
    emit(&args.out, body.as_bytes())
}

fn verify(args: VerifyArgs) -> CliResult<()> {
    let seed = resolve_seed(2024, args.seed)?;
    let report = run_battery(seed)?;
    let passed = report.passed;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    let doc = Document::new("su11.verify/1", Provenance::new(&serde_json::json!({ "seed": seed }), Some(seed)), report);
    emit(&args.out, doc.to_json().as_bytes())?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Domain(anyhow!("{failed} verification checks failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Limits(a) => limits(a),
        Command::Likelihood(a) => likelihood(a),
        Command::Run(a) => run(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Threshold(a) => threshold(a),
        Command::Verify(a) => verify(a),
    }
}
