//! `matchucb` command-line driver.
//!
//! Every flag is applied as an override on the config table before
//! validation, so the precedence is flag, then config file, then defaults.
//! The output directory falls back to `$MATCHUCB_OUTPUT_DIR` and finally to
//! `./matchucb-out`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveTime;
use clap::{Args, Parser, Subcommand};
use matchucb::bikeshare::{
    ingest_trips, read_station_table, write_flows, BikeshareWorld, IngestOptions, WorldOptions,
};
use matchucb::experiment::{
    parse_override, read_config_table, resolve_relative_paths, run_experiment, set_key, RunConfig,
};

const OUTPUT_ENV: &str = "MATCHUCB_OUTPUT_DIR";
const FALLBACK_OUTPUT: &str = "matchucb-out";

#[derive(Debug, Parser)]
#[command(
    name = "matchucb",
    version,
    about = "Greedy matching bandits for agents with Markovian states"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run(RunArgs),
    /// Check a config file and print it with defaults filled in.
    Validate(ValidateArgs),
    /// Compare greedy with the exact optimum on random small instances.
    AuditMatching(AuditArgs),
    /// Aggregate a trip log into station flows for the bike-share experiment.
    IngestTrips(IngestArgs),
}

#[derive(Debug, Args)]
struct ConfigFlags {
    /// One of example1, synthetic, bikeshare, matching-audit.
    #[arg(long)]
    experiment: Option<String>,
    /// Policy variant; repeat for several.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long)]
    tau0: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    zeta: Option<i64>,
    #[arg(long)]
    n_epochs: Option<usize>,
    /// Seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    log_coefficient: Option<f64>,
    #[arg(long)]
    early_stop_delta: Option<f64>,
    #[arg(long)]
    early_stop_patience: Option<u64>,
    /// Write the index of every edge into the per-epoch CSVs.
    #[arg(long)]
    record_indices: bool,
    /// Parallel runs; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Any config key, as `dotted.key=value` with a TOML value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; flags alone suffice when `--experiment` is given.
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output directory [default: $MATCHUCB_OUTPUT_DIR, then ./matchucb-out].
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    config: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 20)]
    max_edges: usize,
    #[arg(long = "seed", default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Trip log with start/end station ids, start times and optional coordinates.
    trips: PathBuf,
    /// Optional `id,lat,lon` station table.
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Window start, HH:MM.
    #[arg(long, default_value = "12:00")]
    window_start: String,
    /// Window end (exclusive), HH:MM.
    #[arg(long, default_value = "13:00")]
    window_end: String,
    /// First day, YYYY-MM-DD.
    #[arg(long)]
    date_from: Option<String>,
    /// Last day (inclusive), YYYY-MM-DD.
    #[arg(long)]
    date_to: Option<String>,
    #[arg(long, default_value_t = 10)]
    base_supply: u32,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    /// Seed for the behavioural parameters in the world snapshot.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT))
}

fn apply_flags(table: &mut toml::Table, flags: &ConfigFlags) -> Result<()> {
    use toml::Value;
    let mut set = |key: &str, value: Value| set_key(table, key, value);
    if let Some(e) = &flags.experiment {
        set("experiment", Value::String(e.clone()))?;
    }
    if !flags.variants.is_empty() {
        let list = flags
            .variants
            .iter()
            .map(|v| Value::String(v.clone()))
            .collect();
        set("variants", Value::Array(list))?;
    }
    if let Some(v) = flags.tau0 {
        set("tau0", Value::Integer(v))?;
    }
    if let Some(v) = flags.zeta {
        set("zeta", Value::Integer(v))?;
    }
    if let Some(v) = flags.n_epochs {
        set("n_epochs", Value::Integer(v.try_into()?))?;
    }
    if !flags.seeds.is_empty() {
        let list = flags
            .seeds
            .iter()
            .map(|&s| i64::try_from(s).map(Value::Integer))
            .collect::<Result<_, _>>()
            .context("seeds must fit in a signed 64-bit integer")?;
        set("seeds", Value::Array(list))?;
    }
    if let Some(v) = flags.log_coefficient {
        set("log_coefficient", Value::Float(v))?;
    }
    if let Some(v) = flags.early_stop_delta {
        set("early_stop.delta", Value::Float(v))?;
    }
    if let Some(v) = flags.early_stop_patience {
        set("early_stop.patience", Value::Integer(v.try_into()?))?;
    }
    if flags.record_indices {
        set("record_indices", Value::Boolean(true))?;
    }
    if let Some(v) = flags.workers {
        set("workers", Value::Integer(v.try_into()?))?;
    }
    for o in &flags.overrides {
        let (key, value) = parse_override(o)?;
        set(&key, value)?;
    }
    Ok(())
}

/// Reads the file (if any), applies flags and validates. Relative paths in
/// the file resolve against its directory; paths given as flags resolve
/// against the working directory.
fn load_config(path: Option<&Path>, flags: &ConfigFlags) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let mut t = read_config_table(p)?;
            if let Some(base) = p.parent() {
                resolve_relative_paths(&mut t, base);
            }
            t
        }
        None => toml::Table::new(),
    };
    apply_flags(&mut table, flags)?;
    Ok(RunConfig::from_table(table, None)?)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    if args.config.is_none() && args.flags.experiment.is_none() {
        bail!("give a config file or --experiment");
    }
    let mut cfg = load_config(args.config.as_deref(), &args.flags)?;
    let out = args
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(default_output_dir);
    cfg.output_dir = Some(out.clone());
    let outcome = run_experiment(&cfg, &out)?;
    eprintln!(
        "wrote {} files to {} in {:.2}s",
        outcome.manifest.files.len() + 1,
        out.display(),
        outcome.manifest.wall_seconds
    );
    for (key, value) in &outcome.manifest.headline {
        println!("{key}\t{value}");
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let cfg = load_config(Some(&args.config), &args.flags)?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let flags = ConfigFlags {
        experiment: Some("matching-audit".into()),
        variants: Vec::new(),
        tau0: None,
        zeta: None,
        n_epochs: None,
        seeds: args.seeds,
        log_coefficient: None,
        early_stop_delta: None,
        early_stop_patience: None,
        record_indices: false,
        workers: None,
        overrides: vec![
            format!("audit.instances={}", args.instances),
            format!("audit.max_edges={}", args.max_edges),
        ],
    };
    cmd_run(RunArgs {
        config: None,
        flags,
        output_dir: args.output_dir,
    })
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let date = |s: &Option<String>| -> Result<Option<_>> {
        s.as_deref()
            .map(|d| {
                d.parse()
                    .with_context(|| format!("bad date {d:?}, expected YYYY-MM-DD"))
            })
            .transpose()
    };
    let opts = IngestOptions {
        window_start: parse_time(&args.window_start)?,
        window_end: parse_time(&args.window_end)?,
        date_from: date(&args.date_from)?,
        date_to: date(&args.date_to)?,
        base_supply: args.base_supply,
        scale: args.scale,
    };
    let table = match &args.stations {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Some(read_station_table(f, opts.base_supply, opts.scale)?)
        }
        None => None,
    };
    let f =
        fs::File::open(&args.trips).with_context(|| format!("opening {}", args.trips.display()))?;
    let report = ingest_trips(f, table.as_deref(), &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = args.output_dir.unwrap_or_else(default_output_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let flows_path = out.join("flows.csv");
    let file = fs::File::create(&flows_path)
        .with_context(|| format!("creating {}", flows_path.display()))?;
    write_flows(BufWriter::new(file), &report.stations, &report.flows)?;
    let world = BikeshareWorld::new(
        report.stations,
        report.flows,
        WorldOptions::default(),
        args.seed,
    )?;
    let world_path = out.join("world.json");
    fs::write(&world_path, world.to_json()? + "\n")
        .with_context(|| format!("writing {}", world_path.display()))?;
    println!(
        "{} rows read, {} in window, {} days, {} stations, {} flows",
        report.rows_read,
        report.rows_in_window,
        report.days,
        world.stations.len(),
        world.flows.len()
    );
    Ok(())
}

/// Accepts `HH:MM` or `HH:MM:SS`.
fn parse_time(s: &str) -> Result<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M:%S"))
        .with_context(|| format!("bad time {s:?}, expected HH:MM"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Validate(a) => cmd_validate(a),
        Command::AuditMatching(a) => cmd_audit(a),
        Command::IngestTrips(a) => cmd_ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
