//! Experiment configuration, orchestration and output files.
//!
//! A run is described by one TOML file (see [`RunConfig`]). Every
//! `(variant, seed)` pair is an independent job; jobs may run on several
//! threads but results are written by a single writer in job order, so the
//! CSV bodies do not depend on the worker count. Wall-clock timestamps only
//! appear in `manifest.json`.
//!
//! Output layout under the output directory:
//!
//! | file | rows |
//! |------|------|
//! | `runs/<VARIANT>_seed<S>.csv` | per-epoch regret trace ([`crate::regret::TraceRow`]) |
//! | `runs/<VARIANT>_seed<S>_bounds.json` | bound evaluators with measured pulls |
//! | `worlds/seed<S>.json` | environment or bike-share world snapshot |
//! | `runs/bikeshare_seed<S>.csv` | per-epoch bike-share rows, all three modes |
//! | `summary.csv` | seed mean and standard error per epoch |
//! | `audit.csv`, `audit_histogram.csv` | matching audit |
//! | `manifest.json` | config echo, version, timing, file list |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bikeshare::{
    self, ingest_trips, read_station_table, run_bikeshare, Behavior, BikeError, BikeMode,
    BikeRunConfig, BikeTrace, BikeshareWorld, DemandMode, GridSpec, IngestOptions, WorldOptions,
};
use crate::environment::{
    example1_world, generate_synthetic, EarlyStop, EnvError, RewardFamily, SyntheticSpec,
};
use crate::matching::{exact_match, greedy_match, InstanceShape, MatchingError, MatchingInstance};
use crate::policy::{pull_counts, run, EpochSchedule, PolicyConfig, PolicyError, Variant};
use crate::regret::{build_benchmark, BoundsReport, RegretError, RegretTrace};
use crate::rng::{substream, SimRng};

const STREAM_POLICY: u64 = 0x0E0C;
const STREAM_AUDIT: u64 = 0xA0D1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Bike(#[from] BikeError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Regret(#[from] RegretError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Example1,
    Synthetic,
    Bikeshare,
    MatchingAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Example1Config {
    pub epsilon: f64,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self { epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Number of agents; also the number of incentives unless
    /// `m_incentives` is set.
    pub m: usize,
    pub m_incentives: Option<usize>,
    pub n_states: usize,
    pub reward_family: RewardFamily,
    /// Row-major class of every edge. Requires `capacities`.
    pub class_of: Option<Vec<usize>>,
    pub capacities: Option<Vec<usize>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            m: 10,
            m_incentives: None,
            n_states: 10,
            reward_family: RewardFamily::Mixed,
            class_of: None,
            capacities: None,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SyntheticSpec {
        let classes = match (&self.class_of, &self.capacities) {
            (Some(c), Some(k)) => Some((c.clone(), k.clone())),
            _ => None,
        };
        SyntheticSpec {
            m_agents: self.m,
            m_incentives: self.m_incentives.unwrap_or(self.m),
            n_states: self.n_states,
            family: self.reward_family,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BikeshareConfig {
    /// Bike-share epochs are short and fixed by default; the top-level
    /// schedule is for the synthetic experiments.
    pub tau0: i64,
    pub zeta: i64,
    pub demand_mode: DemandMode,
    pub behavior: Behavior,
    pub k_candidates: usize,
    /// Matched agents per epoch as a fraction of requests.
    pub budget: f64,
    pub station_capacity: usize,
    pub n_states: usize,
    /// Trips file; the synthetic grid is used when absent.
    pub trips_csv: Option<PathBuf>,
    /// Optional `id,lat,lon` table for stations without row coordinates.
    pub stations_csv: Option<PathBuf>,
    pub grid: GridSpec,
    pub ingest: IngestOptions,
}

impl Default for BikeshareConfig {
    fn default() -> Self {
        let w = WorldOptions::default();
        let r = BikeRunConfig::default();
        Self {
            tau0: r.schedule.tau0 as i64,
            zeta: r.schedule.zeta as i64,
            demand_mode: w.demand_mode,
            behavior: w.behavior,
            k_candidates: w.k_candidates,
            budget: w.budget_fraction,
            station_capacity: w.station_capacity,
            n_states: w.n_states,
            trips_csv: None,
            stations_csv: None,
            grid: GridSpec::default(),
            ingest: IngestOptions::default(),
        }
    }
}

impl BikeshareConfig {
    pub fn world_options(&self) -> WorldOptions {
        WorldOptions {
            demand_mode: self.demand_mode,
            behavior: self.behavior,
            n_states: self.n_states,
            k_candidates: self.k_candidates,
            station_capacity: self.station_capacity,
            budget_fraction: self.budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub instances: usize,
    /// Largest instance size, in edges.
    pub max_edges: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_edges: 20,
        }
    }
}

fn default_tau0() -> i64 {
    50
}

fn default_zeta() -> i64 {
    1
}

fn default_n_epochs() -> usize {
    1000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default = "default_tau0")]
    pub tau0: i64,
    #[serde(default = "default_zeta")]
    pub zeta: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    #[serde(default = "default_n_epochs")]
    pub n_epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Overrides every variant's default coefficient on `ln t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_coefficient: Option<f64>,
    #[serde(default)]
    pub record_indices: bool,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub example1: Example1Config,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub bikeshare: BikeshareConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

/// Accepted keys per table, used to report every unknown key at once.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "",
        &[
            "experiment",
            "variants",
            "tau0",
            "zeta",
            "early_stop",
            "n_epochs",
            "seeds",
            "output_dir",
            "log_coefficient",
            "record_indices",
            "workers",
            "example1",
            "synthetic",
            "bikeshare",
            "audit",
        ],
    ),
    ("early_stop", &["delta", "patience"]),
    ("example1", &["epsilon"]),
    (
        "synthetic",
        &[
            "m",
            "m_incentives",
            "n_states",
            "reward_family",
            "class_of",
            "capacities",
        ],
    ),
    (
        "bikeshare",
        &[
            "tau0",
            "zeta",
            "demand_mode",
            "behavior",
            "k_candidates",
            "budget",
            "station_capacity",
            "n_states",
            "trips_csv",
            "stations_csv",
            "grid",
            "ingest",
        ],
    ),
    (
        "bikeshare.grid",
        &[
            "side",
            "spacing_m",
            "base_supply",
            "scale",
            "rate_mean",
            "rate_cap",
            "reach_m",
            "imbalance",
        ],
    ),
    (
        "bikeshare.ingest",
        &[
            "window_start",
            "window_end",
            "date_from",
            "date_to",
            "base_supply",
            "scale",
        ],
    ),
    ("audit", &["instances", "max_edges"]),
];

fn unknown_keys(table: &toml::Table) -> Vec<String> {
    fn walk(table: &toml::Table, path: &str, out: &mut Vec<String>) {
        let Some((_, known)) = SCHEMA.iter().find(|(p, _)| *p == path) else {
            return;
        };
        for (key, value) in table {
            let full = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            if !known.contains(&key.as_str()) {
                out.push(full);
            } else if let toml::Value::Table(inner) = value {
                walk(inner, &full, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(table, "", &mut out);
    out
}

impl RunConfig {
    /// Parses, rejects unknown keys, fills defaults and checks ranges.
    /// Relative paths are resolved against `base_dir` when given.
    pub fn from_table(table: toml::Table, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let mut table = table;
        if let Some(base) = base_dir {
            resolve_relative_paths(&mut table, base);
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(table, None)
    }

    /// Default variants per experiment when the list is empty.
    pub fn default_variants(kind: ExperimentKind) -> Vec<Variant> {
        match kind {
            ExperimentKind::Example1 => vec![Variant::CUcb, Variant::MgEucb],
            ExperimentKind::Synthetic => vec![
                Variant::MgEucb,
                Variant::MgEucbPlus,
                Variant::HEucb,
                Variant::HEucbPlus,
            ],
            ExperimentKind::Bikeshare => vec![Variant::MgEucbPlus],
            ExperimentKind::MatchingAudit => Vec::new(),
        }
    }

    fn normalize(&mut self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.variants.is_empty() {
            self.variants = Self::default_variants(self.experiment);
        }
        let mut seen = BTreeSet::new();
        self.variants.retain(|v| seen.insert(*v));
        if self.tau0 < 1 {
            problems.push(format!("tau0 = {} must be at least 1", self.tau0));
        }
        if self.zeta < 0 {
            problems.push(format!("zeta = {} must be non-negative", self.zeta));
        }
        if self.n_epochs == 0 {
            problems.push("n_epochs must be positive".into());
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".into());
        }
        if let Some(l) = self.log_coefficient {
            if !(l.is_finite() && l > 0.0) {
                problems.push(format!("log_coefficient = {l} must be positive"));
            }
        }
        if let Some(es) = self.early_stop {
            if !(es.delta.is_finite() && es.delta >= 0.0) || es.patience == 0 {
                problems.push("early_stop needs delta >= 0 and patience >= 1".into());
            }
        }
        match self.experiment {
            ExperimentKind::Example1 => {
                let eps = self.example1.epsilon;
                if !(eps > 0.0 && eps < 1.0) {
                    problems.push(format!("example1.epsilon = {eps} must lie in (0, 1)"));
                }
            }
            ExperimentKind::Synthetic => self.check_synthetic(&mut problems),
            ExperimentKind::Bikeshare => self.check_bikeshare(&mut problems),
            ExperimentKind::MatchingAudit => {
                if self.audit.instances == 0 {
                    problems.push("audit.instances must be positive".into());
                }
                if !(1..=crate::matching::DEFAULT_EXACT_EDGE_LIMIT).contains(&self.audit.max_edges)
                {
                    problems.push(format!(
                        "audit.max_edges = {} must lie in 1..={}",
                        self.audit.max_edges,
                        crate::matching::DEFAULT_EXACT_EDGE_LIMIT
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    fn check_synthetic(&self, problems: &mut Vec<String>) {
        let s = &self.synthetic;
        if s.m == 0 || s.m_incentives == Some(0) || s.n_states == 0 {
            problems.push("synthetic.m, m_incentives and n_states must be positive".into());
            return;
        }
        let spec = s.spec();
        match (&s.class_of, &s.capacities) {
            (None, None) => {}
            (Some(_), Some(_)) => {
                let (class_of, caps) = spec.classes.clone().expect("both parts present");
                match InstanceShape::new(spec.m_agents, spec.m_incentives, class_of, caps) {
                    Err(e) => problems.push(format!("synthetic classes: {e}")),
                    Ok(shape) => {
                        if !shape.capacities_non_binding() {
                            for v in self.variants.iter().filter(|v| v.uses_hungarian()) {
                                problems.push(format!("{v} requires non-binding capacities"));
                            }
                        }
                    }
                }
            }
            _ => problems.push("synthetic.class_of and synthetic.capacities go together".into()),
        }
    }

    fn check_bikeshare(&self, problems: &mut Vec<String>) {
        let b = &self.bikeshare;
        if b.tau0 < 1 || b.zeta < 0 {
            problems.push("bikeshare.tau0 must be >= 1 and bikeshare.zeta >= 0".into());
        }
        if !(0.0..=1.0).contains(&b.budget) {
            problems.push(format!(
                "bikeshare.budget = {} must lie in [0, 1]",
                b.budget
            ));
        }
        if b.n_states == 0 {
            problems.push("bikeshare.n_states must be positive".into());
        }
        for p in [&b.trips_csv, &b.stations_csv].into_iter().flatten() {
            if !p.exists() {
                problems.push(format!("{} does not exist", p.display()));
            }
        }
        if self.variants.iter().any(|&v| v != Variant::MgEucbPlus) {
            problems.push("bikeshare runs only MG_EUCB_PLUS against its two baselines".into());
        }
    }

    pub fn schedule(&self) -> EpochSchedule {
        EpochSchedule {
            tau0: self.tau0 as usize,
            zeta: self.zeta as usize,
            early_stop: self.early_stop,
        }
    }

    pub fn bike_run_config(&self) -> BikeRunConfig {
        BikeRunConfig {
            schedule: EpochSchedule {
                tau0: self.bikeshare.tau0 as usize,
                zeta: self.bikeshare.zeta as usize,
                early_stop: None,
            },
            log_coefficient: self
                .log_coefficient
                .unwrap_or(Variant::MgEucbPlus.default_log_coefficient()),
            n_epochs: self.n_epochs,
        }
    }

    pub fn to_toml(&self) -> Result<String, toml::ser::Error> {
        toml::to_string_pretty(self)
    }
}

const PATH_KEYS: [&[&str]; 3] = [
    &["output_dir"],
    &["bikeshare", "trips_csv"],
    &["bikeshare", "stations_csv"],
];

/// Rewrites relative path values in a config table to sit under `base`.
pub fn resolve_relative_paths(table: &mut toml::Table, base: &Path) {
    for key in PATH_KEYS {
        let (last, parents) = key.split_last().expect("non-empty key");
        let mut t = Some(&mut *table);
        for p in parents {
            t = t
                .and_then(|t| t.get_mut(*p))
                .and_then(toml::Value::as_table_mut);
        }
        if let Some(toml::Value::String(s)) = t.and_then(|t| t.get_mut(*last)) {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
    }
}

/// Reads, checks and normalises a config file.
pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let table = read_config_table(path)?;
    RunConfig::from_table(table, path.parent())
}

/// Raw key-value table of a config file, for callers that apply overrides
/// before validation.
pub fn read_config_table(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

/// Sets `dotted.key = value` in a config table, creating tables on the way.
pub fn set_key(
    table: &mut toml::Table,
    dotted: &str,
    value: toml::Value,
) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| ConfigError::Parse(format!("bad key {dotted:?}")))?;
    let mut current = table;
    for p in parts {
        let entry = current
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("{p} is not a table in {dotted:?}")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override {text:?} is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

// ---------------------------------------------------------------------------
// CSV helpers

/// CSV writer with a header row, minimal quoting and CRLF line ends.
pub fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let file = create(path)?;
    let mut w = csv_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| io_err(path, source))?;
    Ok(())
}

/// Reads rows of any output CSV back.
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let file = fs::File::open(path).map_err(|source| io_err(path, source))?;
    Ok(csv::Reader::from_reader(file)
        .deserialize()
        .collect::<Result<_, _>>()?)
}

fn create(path: &Path) -> Result<fs::File, ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    fs::File::create(path).map_err(|source| io_err(path, source))
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut file = create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")
        .map_err(|source| io_err(path, source))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Seed-aggregated regret row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub epoch: usize,
    pub n_seeds: usize,
    pub realized_mean: f64,
    pub realized_se: f64,
    pub cumulative_regret_mean: f64,
    pub cumulative_regret_se: f64,
    pub optimal_fraction_mean: f64,
    pub optimal_fraction_se: f64,
}

pub fn summarize_traces(variant: Variant, traces: &[&RegretTrace]) -> Vec<SummaryRow> {
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    let cumulative: Vec<Vec<f64>> = traces.iter().map(|t| t.cumulative_regret()).collect();
    (0..len)
        .map(|k| {
            let realized: Vec<f64> = traces.iter().map(|t| t.records()[k].realized).collect();
            let cum: Vec<f64> = cumulative.iter().map(|c| c[k]).collect();
            let opt: Vec<f64> = traces
                .iter()
                .map(|t| t.records()[k].optimal_fraction)
                .collect();
            let (realized_mean, realized_se) = mean_se(&realized);
            let (cumulative_regret_mean, cumulative_regret_se) = mean_se(&cum);
            let (optimal_fraction_mean, optimal_fraction_se) = mean_se(&opt);
            SummaryRow {
                variant,
                epoch: k,
                n_seeds: traces.len(),
                realized_mean,
                realized_se,
                cumulative_regret_mean,
                cumulative_regret_se,
                optimal_fraction_mean,
                optimal_fraction_se,
            }
        })
        .collect()
}

/// Seed-aggregated bike-share row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BikeSummaryRow {
    pub mode: BikeMode,
    pub epoch: usize,
    pub n_seeds: usize,
    pub efficiency_mean: f64,
    pub efficiency_se: f64,
    pub mean_matching_reward_mean: f64,
    pub mean_matching_reward_se: f64,
    pub matched_agents_mean: f64,
}

pub fn summarize_bikeshare(mode: BikeMode, traces: &[&BikeTrace]) -> Vec<BikeSummaryRow> {
    let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    (0..len)
        .map(|k| {
            let eff: Vec<f64> = traces.iter().map(|t| t.records[k].efficiency).collect();
            let rew: Vec<f64> = traces
                .iter()
                .map(|t| t.records[k].mean_matching_reward)
                .collect();
            let matched: Vec<f64> = traces
                .iter()
                .map(|t| t.records[k].matched_agents as f64)
                .collect();
            let (efficiency_mean, efficiency_se) = mean_se(&eff);
            let (mean_matching_reward_mean, mean_matching_reward_se) = mean_se(&rew);
            BikeSummaryRow {
                mode,
                epoch: k,
                n_seeds: traces.len(),
                efficiency_mean,
                efficiency_se,
                mean_matching_reward_mean,
                mean_matching_reward_se,
                matched_agents_mean: mean_se(&matched).0,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Matching audit

/// Random instance with at most `max_edges` edges: up to 5 agents, random
/// class map over up to 4 classes, capacities in `1..=3`, `U(0,1)` weights.
pub fn random_audit_instance(rng: &mut SimRng, max_edges: usize) -> MatchingInstance {
    let max_edges = max_edges.max(1);
    let m_agents = rng.random_range(1..=5usize.min(max_edges));
    let m_incentives = rng.random_range(1..=(max_edges / m_agents).clamp(1, 5));
    let n = m_agents * m_incentives;
    let n_classes = rng.random_range(1..=n.min(4));
    let class_of = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
    let capacities = (0..n_classes).map(|_| rng.random_range(1..=3)).collect();
    let shape = InstanceShape::new(m_agents, m_incentives, class_of, capacities)
        .expect("class indices in range");
    let weights = (0..n).map(|_| rng.random::<f64>()).collect();
    shape.with_weights(weights).expect("weights in [0, 1]")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub seed: u64,
    pub instance: usize,
    pub m_agents: usize,
    pub m_incentives: usize,
    pub n_classes: usize,
    pub greedy: f64,
    pub exact: f64,
    /// `greedy / exact`, or 1 when the optimum is 0.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Greedy versus exact optimum on `instances` random instances.
pub fn audit_matching(
    instances: usize,
    max_edges: usize,
    seed: u64,
) -> Result<Vec<AuditRow>, MatchingError> {
    let mut rng = substream(seed, STREAM_AUDIT);
    (0..instances)
        .map(|k| {
            let inst = random_audit_instance(&mut rng, max_edges);
            let greedy = greedy_match(&inst).weight(&inst);
            let exact = exact_match(&inst)?.weight(&inst);
            Ok(AuditRow {
                seed,
                instance: k,
                m_agents: inst.shape().m_agents(),
                m_incentives: inst.shape().m_incentives(),
                n_classes: inst.shape().n_classes(),
                greedy,
                exact,
                ratio: if exact > 0.0 { greedy / exact } else { 1.0 },
            })
        })
        .collect()
}

/// Twenty equal bins over `[0, 1]`; the last bin is closed.
pub fn ratio_histogram(rows: &[AuditRow]) -> Vec<HistogramRow> {
    const BINS: usize = 20;
    let mut counts = [0usize; BINS];
    for r in rows {
        let b = ((r.ratio.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &count)| HistogramRow {
            bin_lo: b as f64 / BINS as f64,
            bin_hi: (b + 1) as f64 / BINS as f64,
            count,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub started_at: String,
    pub finished_at: String,
    pub wall_seconds: f64,
    /// Output files relative to the output directory.
    pub files: Vec<String>,
    /// Headline numbers per variant or mode.
    pub headline: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs `jobs` on up to `workers` threads and returns results in job order.
fn run_jobs<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<T, ExperimentError> + Sync,
) -> Result<Vec<T>, ExperimentError> {
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(jobs.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T, ExperimentError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let out = f(&jobs[k]);
                *slots[k].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

struct PolicyRun {
    variant: Variant,
    seed: u64,
    trace: RegretTrace,
    bounds: Option<BoundsReport>,
    world: String,
}

fn policy_job(cfg: &RunConfig, variant: Variant, seed: u64) -> Result<PolicyRun, ExperimentError> {
    let (mut env, shape) = match cfg.experiment {
        ExperimentKind::Example1 => example1_world(cfg.example1.epsilon)?,
        _ => {
            let (env, inst) = generate_synthetic(&cfg.synthetic.spec(), seed)?;
            (env, inst.shape().clone())
        }
    };
    let world = serde_json::to_string_pretty(&env)?;
    let mut policy = PolicyConfig::for_env(variant, &env)?;
    if let Some(l) = cfg.log_coefficient {
        policy = policy.with_log_coefficient(l);
    }
    policy.record_indices = cfg.record_indices;
    let schedule = cfg.schedule();
    let benchmark = build_benchmark(&env, &shape)?;
    let mut rng = substream(seed, STREAM_POLICY);
    let trace = run(&mut env, &shape, &policy, &schedule, cfg.n_epochs, &mut rng)?;
    let bounds = if matches!(variant, Variant::MgEucb | Variant::MgEucbPlus) && schedule.zeta > 0 {
        let pulls: Vec<f64> = pull_counts(&trace, &shape, trace.len())
            .into_iter()
            .map(|p| p as f64)
            .collect();
        Some(BoundsReport::new(
            &benchmark,
            &policy.mixing_constants,
            &schedule,
            trace.len() as u64,
            Some(&pulls),
        )?)
    } else {
        None
    };
    Ok(PolicyRun {
        variant,
        seed,
        trace,
        bounds,
        world,
    })
}

fn bike_world(cfg: &RunConfig, seed: u64) -> Result<BikeshareWorld, ExperimentError> {
    let b = &cfg.bikeshare;
    let options = b.world_options();
    match &b.trips_csv {
        None => Ok(bikeshare::synthetic_world(&b.grid, options, seed)?),
        Some(path) => {
            let table = match &b.stations_csv {
                Some(p) => {
                    let f = fs::File::open(p).map_err(|source| io_err(p, source))?;
                    Some(read_station_table(f, b.ingest.base_supply, b.ingest.scale)?)
                }
                None => None,
            };
            let f = fs::File::open(path).map_err(|source| io_err(path, source))?;
            let report = ingest_trips(f, table.as_deref(), &b.ingest)?;
            Ok(BikeshareWorld::new(
                report.stations,
                report.flows,
                options,
                seed,
            )?)
        }
    }
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Runs every job of `cfg` and writes the artifacts into `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome, ExperimentError> {
    let started = chrono::Utc::now();
    let clock = Instant::now();
    fs::create_dir_all(out_dir).map_err(|source| io_err(out_dir, source))?;
    let mut files: Vec<PathBuf> = Vec::new();
    let mut headline = BTreeMap::new();

    match cfg.experiment {
        ExperimentKind::Example1 | ExperimentKind::Synthetic => {
            let jobs: Vec<(Variant, u64)> = cfg
                .variants
                .iter()
                .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
                .collect();
            let runs = run_jobs(&jobs, cfg.workers, |&(v, s)| policy_job(cfg, v, s))?;
            let mut worlds_written = BTreeSet::new();
            for r in &runs {
                let path = out_dir
                    .join("runs")
                    .join(format!("{}_seed{}.csv", r.variant, r.seed));
                let file = create(&path)?;
                let mut w = std::io::BufWriter::new(file);
                r.trace.write_csv(&mut w)?;
                w.flush().map_err(|source| io_err(&path, source))?;
                files.push(path);
                if let Some(b) = &r.bounds {
                    let path = out_dir
                        .join("runs")
                        .join(format!("{}_seed{}_bounds.json", r.variant, r.seed));
                    write_json(&path, b)?;
                    files.push(path);
                }
                if worlds_written.insert(r.seed) {
                    let path = out_dir.join("worlds").join(format!("seed{}.json", r.seed));
                    let mut f = create(&path)?;
                    f.write_all(r.world.as_bytes())
                        .and_then(|_| f.write_all(b"\n"))
                        .map_err(|source| io_err(&path, source))?;
                    files.push(path);
                }
            }
            let mut summary = Vec::new();
            for &v in &cfg.variants {
                let traces: Vec<&RegretTrace> = runs
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| &r.trace)
                    .collect();
                let rows = summarize_traces(v, &traces);
                if let Some(last) = rows.last() {
                    headline.insert(
                        format!("{v}.final_cumulative_regret"),
                        last.cumulative_regret_mean,
                    );
                    let tail = rows.len().div_ceil(10);
                    let opt = rows[rows.len() - tail..]
                        .iter()
                        .map(|r| r.optimal_fraction_mean)
                        .sum::<f64>()
                        / tail as f64;
                    headline.insert(format!("{v}.final_decile_optimal_fraction"), opt);
                }
                summary.extend(rows);
            }
            let path = out_dir.join("summary.csv");
            write_rows(&path, &summary)?;
            files.push(path);
        }
        ExperimentKind::Bikeshare => {
            let run_cfg = cfg.bike_run_config();
            let results = run_jobs(&cfg.seeds, cfg.workers, |&seed| {
                let world = bike_world(cfg, seed)?;
                let traces = run_bikeshare(&world, &run_cfg, seed)?;
                Ok((seed, world, traces))
            })?;
            for (seed, world, traces) in &results {
                let path = out_dir.join("worlds").join(format!("seed{seed}.json"));
                write_json(&path, world)?;
                files.push(path);
                let rows: Vec<_> = traces
                    .iter()
                    .flat_map(|t| t.records.iter().cloned())
                    .collect();
                let path = out_dir
                    .join("runs")
                    .join(format!("bikeshare_seed{seed}.csv"));
                write_rows(&path, &rows)?;
                files.push(path);
            }
            let mut summary = Vec::new();
            for mode in BikeMode::ALL {
                let traces: Vec<&BikeTrace> = results
                    .iter()
                    .flat_map(|(_, _, t)| t.iter().filter(|t| t.mode == mode))
                    .collect();
                let terminal: Vec<f64> =
                    traces.iter().map(|t| t.terminal_efficiency(0.1)).collect();
                headline.insert(format!("{mode}.terminal_efficiency"), mean_se(&terminal).0);
                summary.extend(summarize_bikeshare(mode, &traces));
            }
            let path = out_dir.join("summary.csv");
            write_rows(&path, &summary)?;
            files.push(path);
        }
        ExperimentKind::MatchingAudit => {
            let per_seed = run_jobs(&cfg.seeds, cfg.workers, |&seed| {
                Ok(audit_matching(
                    cfg.audit.instances,
                    cfg.audit.max_edges,
                    seed,
                )?)
            })?;
            let rows: Vec<AuditRow> = per_seed.into_iter().flatten().collect();
            let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
            headline.insert("min_ratio".into(), min);
            headline.insert(
                "violations".into(),
                rows.iter().filter(|r| r.ratio < 1.0 / 3.0 - 1e-12).count() as f64,
            );
            let path = out_dir.join("audit.csv");
            write_rows(&path, &rows)?;
            files.push(path);
            let path = out_dir.join("audit_histogram.csv");
            write_rows(&path, &ratio_histogram(&rows))?;
            files.push(path);
        }
    }

    let manifest_path = out_dir.join("manifest.json");
    let manifest = Manifest {
        tool: "matchucb".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        started_at: started.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        files: files.iter().map(|p| relative(out_dir, p)).collect(),
        headline,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutcome {
        output_dir: out_dir.to_path_buf(),
        manifest,
    })
}
