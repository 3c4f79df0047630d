//! Batch command-line driver.
//!
//! Every command is deterministic for a fixed configuration and seed: no
//! output depends on wall-clock time or thread scheduling.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dgm::{checkpoint, toy_schedule, NetworkParams, ToyEquation, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::estimation::{
    bin_estimate, bootstrap_reliability, default_bins, default_grid, fit_samples, interarrival_stats, load_event_csv,
    load_two_file, write_bins_csv, write_curve_csv, BootstrapOptions, EventLog, FitResult, LogEvent, Target,
};
use crate::market::{simulate_controlled_with, simulate_uncontrolled_with, EventKind, EventPath, PathRngs};
use crate::strategy::{evaluate_network, naive_value, policy_from_network, policy_surface, write_surface_csv, NetworkPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_CONTRACT: i32 = 5;
pub const EXIT_CONFIG: i32 = 6;
pub const EXIT_CHECKPOINT: i32 = 7;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Parse { .. } => EXIT_PARSE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::ContractViolation(_) => EXIT_CONTRACT,
        Error::Config(_) => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "amm-exec", version, about = "Optimal execution in a constant-product AMM")]
pub struct Cli {
    /// Run configuration (TOML). Defaults reproduce the reference experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate market paths and write one event CSV per path plus a summary.
    Simulate(SimulateArgs),
    /// Train the value network and write a checkpoint and loss history.
    Train(TrainArgs),
    /// Evaluate a trained policy against full liquidation at the start.
    Evaluate(EvaluateArgs),
    /// Fit spread-conditional estimates to an event log.
    Fit(FitArgs),
    /// Tabulate the policy intensity on a time x spread x inventory grid.
    PolicySurface(SurfaceArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
    /// Drive the agent with the policy of `--checkpoint`.
    #[arg(long, conflicts_with = "uncontrolled")]
    pub controlled: bool,
    /// Market only (the default).
    #[arg(long)]
    pub uncontrolled: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<output_dir>/simulate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Constant-solution check: no intensities, no control, `u(1, .) = 0`,
    /// batch 256 and the toy learning-rate schedule.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; defaults to `<output_dir>/checkpoint.dgm`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history path; defaults to `loss_history.csv` beside the checkpoint.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<output_dir>/evaluate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Event-path CSV; repeat to concatenate several paths.
    #[arg(long, conflicts_with_all = ["pool", "spot"])]
    pub events: Vec<PathBuf>,
    /// Pool swaps `time,side,price`.
    #[arg(long, requires = "spot")]
    pub pool: Option<PathBuf>,
    /// Spot quotes `time,mid`.
    #[arg(long, requires = "pool")]
    pub spot: Option<PathBuf>,
    /// POOL_RETURN, SPOT_RETURN, P_BUY_POOL or P_BUY_SPOT.
    #[arg(long, default_value = "P_BUY_POOL")]
    pub target: Target,
    /// Legendre order; 4 for probabilities and 5 for returns by default.
    #[arg(long)]
    pub order: Option<usize>,
    /// Bootstrap trials; 0 skips the bootstrap.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<output_dir>/fit`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grid sizes `TIMES,SPREADS,INVENTORIES` over `[0, T]`, `[-1.75, 1.75]`
    /// and `[0, Q]`.
    #[arg(long, default_value = "11,15,5", value_parser = parse_grid)]
    pub grid: (usize, usize, usize),
    /// Output CSV; defaults to `<output_dir>/policy_surface.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [t, d, z] = parts.as_slice() else {
        return Err("expected TIMES,SPREADS,INVENTORIES".into());
    };
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(t)?, n(d)?, n(z)?))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
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

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Fit(a) => cmd_fit(&cfg, a),
        Command::PolicySurface(a) => cmd_policy_surface(&cfg, a),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_network(cfg: &RunConfig, path: &Path) -> Result<NetworkParams> {
    let (_, net) = checkpoint::load(path)?;
    if net.arch != cfg.train.architecture {
        return Err(Error::Checkpoint(format!(
            "{}: architecture {:?} does not match the configured {:?}",
            path.display(),
            net.arch,
            cfg.train.architecture
        )));
    }
    Ok(net)
}

fn network_policy(cfg: &RunConfig, path: &Path) -> Result<NetworkPolicy> {
    let net = load_network(cfg, path)?;
    policy_from_network(net, &cfg.model()?, &cfg.agent_params()?, cfg.scaling()?)
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    format: &'static str,
    version: u32,
    seed: u64,
    paths: usize,
    controlled: bool,
    horizon: f64,
    mean_events: Option<f64>,
    kind_counts: KindCounts,
    truncated: usize,
    event_counts: Vec<usize>,
    terminal_spreads: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_z_y: Option<Vec<f64>>,
}

#[derive(Debug, Default, Serialize)]
#[allow(non_snake_case)]
struct KindCounts {
    SPOT_UP: usize,
    SPOT_DOWN: usize,
    SWAP_X: usize,
    SWAP_Y: usize,
    AGENT: usize,
}

fn cmd_simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("simulate"));
    let model = cfg.model()?;
    let initial = cfg.initial_market()?;
    let horizon = cfg.agent.horizon;
    let policy = if a.controlled {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Usage("--controlled requires --checkpoint".into()))?;
        Some(network_policy(cfg, path)?)
    } else {
        None
    };
    let agent = cfg.agent_params()?;

    let mut summary = SimulationSummary {
        format: "amm-exec-simulation-summary",
        version: 1,
        seed,
        paths: a.paths,
        controlled: a.controlled,
        horizon,
        mean_events: None,
        kind_counts: KindCounts::default(),
        truncated: 0,
        event_counts: Vec::with_capacity(a.paths),
        terminal_spreads: Vec::with_capacity(a.paths),
        terminal_z_y: policy.as_ref().map(|_| Vec::with_capacity(a.paths)),
    };
    fs::create_dir_all(&out)?;
    for i in 0..a.paths {
        let mut rngs = PathRngs::for_path(seed, i as u64);
        let path: EventPath = match &policy {
            Some(p) => simulate_controlled_with(
                &model,
                &agent,
                p,
                &initial,
                cfg.initial_agent(),
                rngs,
                cfg.evaluation.running_cost,
            )?,
            None => simulate_uncontrolled_with(&model, &initial, horizon, &mut rngs)?,
        };
        path.save_csv(&out.join(format!("path-{i:05}.csv")))?;
        summary.event_counts.push(path.exogenous_count());
        summary.terminal_spreads.push(path.final_market().spread());
        if path.truncated.is_some() {
            summary.truncated += 1;
        }
        let k = &mut summary.kind_counts;
        k.SPOT_UP += path.count(EventKind::SpotUp);
        k.SPOT_DOWN += path.count(EventKind::SpotDown);
        k.SWAP_X += path.count(EventKind::SwapX);
        k.SWAP_Y += path.count(EventKind::SwapY);
        k.AGENT += path.count(EventKind::Agent);
        if let Some(z) = summary.terminal_z_y.as_mut() {
            z.push(path.final_agent().z_y);
        }
    }
    if a.paths > 0 {
        summary.mean_events = Some(summary.event_counts.iter().sum::<usize>() as f64 / a.paths as f64);
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "simulated {} path(s); mean exogenous events {}",
        a.paths,
        summary.mean_events.map_or("n/a".into(), |m| format!("{m:.3}"))
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut tc: TrainConfig = cfg.train_config();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if a.toy {
        tc.batch_size = 256;
        tc.iterations = a.iterations.unwrap_or(2000);
        tc.schedule = toy_schedule(tc.iterations);
    } else if let Some(n) = a.iterations {
        tc.iterations = n;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoint.dgm"));
    let history = a
        .history
        .clone()
        .unwrap_or_else(|| out.with_file_name("loss_history.csv"));
    if let Some(dir) = &tc.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let init = NetworkParams::xavier(tc.architecture, tc.seed);
    let report = |r: &crate::dgm::train::HistoryRow| eprintln!("iteration {:>6}  loss {:.6e}  lr {:e}", r.iteration, r.loss, r.lr);
    let outcome: TrainOutcome = if a.toy {
        crate::dgm::train::train_from(&tc, &ToyEquation { value: 0.0 }, init, report)?
    } else {
        crate::dgm::train::train_from(&tc, &cfg.problem()?, init, report)?
    };

    let mut w = create(&out)?;
    checkpoint::write(&mut w, &outcome.params, tc.seed, outcome.completed)?;
    drop(w);
    let mut h = create(&history)?;
    outcome.write_history(&mut h)?;
    h.flush()?;
    match outcome.diverged {
        Some(e) => {
            eprintln!("last finite parameters written to {}", out.display());
            Err(e)
        }
        None => {
            println!("trained {} iteration(s); checkpoint {}", outcome.completed, out.display());
            Ok(())
        }
    }
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let policy = network_policy(cfg, &a.checkpoint)?;
    let mut opts = cfg.eval_options();
    if let Some(p) = a.paths {
        opts.paths = p;
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("evaluate"));
    let model = cfg.model()?;
    let initial = cfg.initial_market()?;
    let naive = naive_value(&model, &initial, cfg.agent.q)?;
    println!("naive benchmark: {naive:.2}");
    let report = evaluate_network(&policy, &model, &cfg.agent_params()?, &initial, &opts)?;
    fs::create_dir_all(&out)?;
    report.save(&out.join("report.json"), &out.join("paths.csv"))?;
    println!(
        "paths {}  mean {:.2}  se {:.2}  q05 {:.2}  q50 {:.2}  q95 {:.2}  win rate {:.4}",
        report.paths - report.excluded,
        report.mean,
        report.std_error,
        report.q05,
        report.q50,
        report.q95,
        report.win_rate
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    format: &'static str,
    version: u32,
    target: Target,
    events: usize,
    fit: &'a FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Serialize)]
struct BootstrapSummary {
    trials: usize,
    fraction: f64,
    seed: u64,
    failed: usize,
    max_abs_deviation: f64,
}

/// Concatenates logs, shifting each to start where the previous one ended.
fn concat_logs(logs: Vec<EventLog>) -> Result<EventLog> {
    let mut all: Vec<LogEvent> = Vec::new();
    for log in logs {
        let offset = all.last().map_or(0.0, |e| e.time);
        let start = log.events().first().map_or(0.0, |e| e.time.min(0.0));
        all.extend(log.events().iter().map(|e| LogEvent {
            time: e.time - start + offset,
            ..*e
        }));
    }
    EventLog::new(all)
}

fn cmd_fit(cfg: &RunConfig, a: &FitArgs) -> Result<()> {
    for p in a.events.iter().chain(&a.pool).chain(&a.spot) {
        if !p.is_file() {
            return Err(Error::Usage(format!("{}: no such file", p.display())));
        }
    }
    let log = match (&a.pool, &a.spot) {
        (Some(p), Some(s)) => load_two_file(p, s)?,
        _ if !a.events.is_empty() => concat_logs(a.events.iter().map(|p| load_event_csv(p)).collect::<Result<_>>()?)?,
        _ => return Err(Error::Usage("give --events, or --pool with --spot".into())),
    };
    let target = a.target;
    let order = a.order.unwrap_or_else(|| target.default_order());
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("fit"));
    fs::create_dir_all(&out)?;

    let samples = target.samples(&log);
    let fit = fit_samples(&samples, target, order)?;
    let grid = default_grid();
    let mut w = create(&out.join("curve.csv"))?;
    write_curve_csv(&mut w, &fit, &grid)?;
    w.flush()?;
    let mut w = create(&out.join("bins.csv"))?;
    write_bins_csv(&mut w, &bin_estimate(&log, target, &default_bins())?)?;
    w.flush()?;
    write_json(&out.join("interarrival.json"), &interarrival_stats(&log))?;

    let bootstrap = if a.bootstrap > 0 {
        let opts = BootstrapOptions {
            trials: a.bootstrap,
            fraction: a.fraction,
            seed: a.seed.unwrap_or(cfg.seed),
            grid: grid.clone(),
        };
        let r = bootstrap_reliability(&samples, |s| fit_samples(s, target, order), &opts)?;
        let mut w = create(&out.join("bootstrap.csv"))?;
        r.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join("envelope.csv"))?;
        r.write_envelope_csv(&mut w)?;
        w.flush()?;
        Some(BootstrapSummary {
            trials: opts.trials,
            fraction: opts.fraction,
            seed: opts.seed,
            failed: r.failed,
            max_abs_deviation: r.abs_deviations().fold(0.0, f64::max),
        })
    } else {
        None
    };
    write_json(
        &out.join("fit.json"),
        &FitOutput {
            format: "amm-exec-fit",
            version: 1,
            target,
            events: log.len(),
            fit: &fit,
            bootstrap,
        },
    )?;
    println!(
        "{target}: {} samples, order {order}, score {:.6e}",
        fit.samples, fit.score
    );
    Ok(())
}

fn cmd_policy_surface(cfg: &RunConfig, a: &SurfaceArgs) -> Result<()> {
    let (nt, nd, nz) = a.grid;
    if nt == 0 || nd == 0 || nz == 0 {
        return Err(Error::Usage("grid sizes must be positive".into()));
    }
    let policy = network_policy(cfg, &a.checkpoint)?;
    let even = |lo: f64, hi: f64, n: usize| crate::estimation::spread_grid(lo, hi, n);
    let times = even(0.0, cfg.agent.horizon, nt);
    let spreads = even(-1.75, 1.75, nd);
    let inventories = even(0.0, cfg.agent.q, nz);
    let rows = policy_surface(&policy, &cfg.initial_market()?, &times, &spreads, &inventories)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("policy_surface.csv"));
    let mut w = create(&out)?;
    write_surface_csv(&mut w, &rows)?;
    w.flush()?;
    println!("{} grid points written to {}", rows.len(), out.display());
    Ok(())
}
