//! Bike-share incentive simulation.
//!
//! An agent is an origin-destination flow. It persists across epochs, so a
//! bandit arm `(flow, candidate station)` can accumulate statistics even
//! though individual riders come and go. Each epoch:
//!
//! 1. demand is sampled per flow;
//! 2. at most `budget` active flows are offered incentives to end their trip
//!    at one of the `k` stations nearest their destination (each station
//!    takes at most `station_capacity` redirects);
//! 3. every matched flow receives `tau` offers, one per iteration, while its
//!    behavioural state moves with the flow's kernel;
//! 4. trips are routed in random order. The `j`-th served rider of a matched
//!    flow is redirected iff the `j`-th offer was accepted.
//!
//! Bikes move only by served trips, so the total count never changes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::environment::{random_kernel, EnvError, EpochResult};
use crate::markov::{mixing_profile, MarkovError, TransitionKernel};
use crate::matching::{greedy_order, Edge, InstanceShape, Matching, MatchingError};
use crate::policy::{confidence, EpochSchedule, PolicyError};
use crate::rng::substream;

/// Largest distance threshold a rider state can draw, in meters. Utility
/// rewards are normalised by it.
pub const MAX_THRESHOLD_M: f64 = 4000.0;

const EARTH_RADIUS_M: f64 = 6_371_000.0;

const STREAM_WORLD: u64 = 0xB5E0;
const STREAM_GRID: u64 = 0xB5E1;
const STREAM_DEMAND: u64 = 0xB1C0;
const STREAM_ROUTING: u64 = 0xB1C1;
const STREAM_BEHAVIOR: u64 = 0xB1C2;

#[derive(Debug, thiserror::Error)]
pub enum BikeError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid world: {0}")]
    World(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coordinates {
    /// Planar position in meters.
    Planar { x: f64, y: f64 },
    /// Degrees.
    LatLon { lat: f64, lon: f64 },
}

impl Coordinates {
    /// Euclidean distance on planar points, great-circle distance on
    /// lat/lon. Mixed kinds have no meaningful distance and give `None`.
    pub fn distance(&self, other: &Coordinates) -> Option<f64> {
        match (*self, *other) {
            (Coordinates::Planar { x: x1, y: y1 }, Coordinates::Planar { x: x2, y: y2 }) => {
                Some((x1 - x2).hypot(y1 - y2))
            }
            (
                Coordinates::LatLon { lat: a1, lon: o1 },
                Coordinates::LatLon { lat: a2, lon: o2 },
            ) => {
                let (p1, p2) = (a1.to_radians(), a2.to_radians());
                let dp = p2 - p1;
                let dl = (o2 - o1).to_radians();
                let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
                Some(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
            }
            _ => None,
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Coordinates::Planar { x, y } => x.is_finite() && y.is_finite(),
            Coordinates::LatLon { lat, lon } => lat.is_finite() && lon.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub coords: Coordinates,
    pub supply: u32,
}

/// Expected trips per epoch from `origin` to `dest` (station indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowDemand {
    pub origin: usize,
    pub dest: usize,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBehavior {
    /// Longest detour the rider accepts in this state.
    pub threshold_m: f64,
    /// Acceptance probability for detours within the threshold.
    pub accept_p: f64,
}

impl StateBehavior {
    /// Probability that an offer `dist` meters from the intended destination
    /// is accepted.
    pub fn accept_probability(&self, dist: f64) -> f64 {
        if dist <= self.threshold_m {
            self.accept_p
        } else {
            0.0
        }
    }
}

/// Behaviour of one flow, indexed by its state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralParams {
    pub states: Vec<StateBehavior>,
}

impl BehavioralParams {
    pub fn sample<R: Rng + ?Sized>(n_states: usize, rng: &mut R) -> Self {
        let states = (0..n_states)
            .map(|_| StateBehavior {
                threshold_m: rng.random_range(0.0..=MAX_THRESHOLD_M),
                accept_p: rng.random(),
            })
            .collect();
        Self { states }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandMode {
    #[default]
    Static,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Bernoulli,
    Utility,
}

impl Behavior {
    /// Reward of an accepted offer at distance `dist`.
    pub fn accept_reward(self, state: &StateBehavior, dist: f64) -> f64 {
        match self {
            Behavior::Bernoulli => 1.0,
            Behavior::Utility => ((state.threshold_m - dist).max(0.0) / MAX_THRESHOLD_M).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldOptions {
    pub demand_mode: DemandMode,
    pub behavior: Behavior,
    /// Rider states per flow.
    pub n_states: usize,
    /// Candidate stations per flow.
    pub k_candidates: usize,
    /// Redirects a station may receive per epoch.
    pub station_capacity: usize,
    /// Matched flows per epoch as a fraction of that epoch's requests.
    pub budget_fraction: f64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            demand_mode: DemandMode::Static,
            behavior: Behavior::Bernoulli,
            n_states: 5,
            k_candidates: 5,
            station_capacity: 1,
            budget_fraction: 0.01,
        }
    }
}

/// Running totals over all epochs played on a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub served: u64,
    pub rejected: u64,
    pub offered: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BikeshareWorld {
    pub stations: Vec<Station>,
    pub flows: Vec<FlowDemand>,
    pub options: WorldOptions,
    pub behavior_params: Vec<BehavioralParams>,
    /// One kernel per flow, shared by all of that flow's arms.
    pub flow_kernels: Vec<TransitionKernel>,
    pub flow_states: Vec<usize>,
    /// Per flow, the `k` stations nearest its destination, nearest first.
    pub candidates: Vec<Vec<usize>>,
    pub seed: u64,
    pub counters: Counters,
}

impl BikeshareWorld {
    /// Builds a world, drawing kernels, behaviour and initial states from
    /// `seed`.
    pub fn new(
        stations: Vec<Station>,
        flows: Vec<FlowDemand>,
        options: WorldOptions,
        seed: u64,
    ) -> Result<Self, BikeError> {
        validate_layout(&stations, &flows, &options)?;
        let mut rng = substream(seed, STREAM_WORLD);
        let mut behavior_params = Vec::with_capacity(flows.len());
        let mut flow_kernels = Vec::with_capacity(flows.len());
        let mut flow_states = Vec::with_capacity(flows.len());
        for _ in &flows {
            flow_kernels.push(random_kernel(options.n_states, &mut rng)?);
            behavior_params.push(BehavioralParams::sample(options.n_states, &mut rng));
            flow_states.push(rng.random_range(0..options.n_states));
        }
        let candidates = flows
            .iter()
            .map(|f| nearest_stations(&stations, f.dest, options.k_candidates))
            .collect();
        Ok(Self {
            stations,
            flows,
            options,
            behavior_params,
            flow_kernels,
            flow_states,
            candidates,
            seed,
            counters: Counters::default(),
        })
    }

    pub fn total_bikes(&self) -> u64 {
        self.stations.iter().map(|s| u64::from(s.supply)).sum()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.stations[a]
            .coords
            .distance(&self.stations[b].coords)
            .expect("coordinate kinds are checked at construction")
    }

    /// Distance of the detour from a flow's destination to `station`.
    pub fn detour(&self, flow: usize, station: usize) -> f64 {
        self.distance(self.flows[flow].dest, station)
    }

    /// Expected reward of one offer to `flow` for `station` in the flow's
    /// current state.
    pub fn expected_offer_reward(&self, flow: usize, station: usize) -> f64 {
        let state = &self.behavior_params[flow].states[self.flow_states[flow]];
        let d = self.detour(flow, station);
        state.accept_probability(d) * self.options.behavior.accept_reward(state, d)
    }

    /// Expected departures per epoch from each station.
    pub fn outflow(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.stations.len()];
        for f in &self.flows {
            out[f.origin] += f.mean_rate;
        }
        out
    }

    /// Bikes on hand minus expected departures, per station.
    pub fn surplus(&self) -> Vec<f64> {
        self.outflow()
            .into_iter()
            .zip(&self.stations)
            .map(|(out, s)| f64::from(s.supply) - out)
            .collect()
    }

    /// Number of `(flow, candidate)` arms.
    pub fn n_arms(&self) -> usize {
        self.flows.len() * self.options.k_candidates
    }

    pub fn arm_id(&self, flow: usize, slot: usize) -> usize {
        flow * self.options.k_candidates + slot
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self, BikeError> {
        let world: Self =
            serde_json::from_str(text).map_err(|e| BikeError::World(e.to_string()))?;
        validate_layout(&world.stations, &world.flows, &world.options)?;
        let n = world.flows.len();
        if world.behavior_params.len() != n
            || world.flow_kernels.len() != n
            || world.flow_states.len() != n
            || world.candidates.len() != n
        {
            return Err(BikeError::World(
                "per-flow tables do not match the flow count".into(),
            ));
        }
        Ok(world)
    }
}

fn validate_layout(
    stations: &[Station],
    flows: &[FlowDemand],
    options: &WorldOptions,
) -> Result<(), BikeError> {
    if options.n_states == 0 {
        return Err(BikeError::World("n_states must be positive".into()));
    }
    if !(0.0..=1.0).contains(&options.budget_fraction) {
        return Err(BikeError::World(format!(
            "budget_fraction {} outside [0, 1]",
            options.budget_fraction
        )));
    }

    if let Some(s) = stations.iter().find(|s| !s.coords.is_finite()) {
        return Err(BikeError::World(format!(
            "station {} has non-finite coordinates",
            s.id
        )));
    }
    if let Some(first) = stations.first() {
        let planar = matches!(first.coords, Coordinates::Planar { .. });
        if stations
            .iter()
            .any(|s| matches!(s.coords, Coordinates::Planar { .. }) != planar)
        {
            return Err(BikeError::World(
                "stations mix planar and lat/lon coordinates".into(),
            ));
        }
    }
    for (k, f) in flows.iter().enumerate() {
        if f.origin >= stations.len() || f.dest >= stations.len() {
            return Err(BikeError::World(format!(
                "flow {k} references a missing station"
            )));
        }
        if !f.mean_rate.is_finite() || f.mean_rate < 0.0 {
            return Err(BikeError::World(format!(
                "flow {k} has rate {}",
                f.mean_rate
            )));
        }
    }
    Ok(())
}

/// The `k` stations nearest `dest`, excluding `dest`, ties by index.
fn nearest_stations(stations: &[Station], dest: usize, k: usize) -> Vec<usize> {
    let origin = stations[dest].coords;
    let mut others: Vec<(f64, usize)> = (0..stations.len())
        .filter(|&s| s != dest)
        .map(|s| {
            (
                origin
                    .distance(&stations[s].coords)
                    .unwrap_or(f64::INFINITY),
                s,
            )
        })
        .collect();
    others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    others.into_iter().take(k).map(|(_, s)| s).collect()
}

// ---------------------------------------------------------------------------
// Demand

/// Requests per flow for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Demand {
    pub counts: Vec<u32>,
}

impl Demand {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Individual `(origin, dest)` requests in flow order.
    pub fn requests(&self, world: &BikeshareWorld) -> Vec<(usize, usize)> {
        self.counts
            .iter()
            .zip(&world.flows)
            .flat_map(|(&c, f)| std::iter::repeat_n((f.origin, f.dest), c as usize))
            .collect()
    }
}

/// Static mode rounds each rate half-to-even; Poisson mode draws
/// `Poisson(rate)` per flow.
pub fn sample_demand<R: Rng + ?Sized>(world: &BikeshareWorld, rng: &mut R) -> Demand {
    let counts = world
        .flows
        .iter()
        .map(|f| match world.options.demand_mode {
            DemandMode::Static => f.mean_rate.round_ties_even() as u32,
            DemandMode::Poisson if f.mean_rate > 0.0 => {
                let d = Poisson::new(f.mean_rate).expect("rate checked positive and finite");
                d.sample(rng) as u32
            }
            DemandMode::Poisson => 0,
        })
        .collect();
    Demand { counts }
}

// ---------------------------------------------------------------------------
// Epoch instance

/// Matching instance of one epoch plus the maps back to flows, stations and
/// persistent arms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochInstance {
    pub shape: InstanceShape,
    /// Flow of each agent.
    pub roster: Vec<usize>,
    /// Station of each incentive.
    pub stations: Vec<usize>,
    /// Persistent arm of each dense edge; `None` for pairs that may not be
    /// matched (they sit in a zero-capacity class).
    pub arm_of: Vec<Option<usize>>,
    /// Most agents that may be matched this epoch.
    pub budget: usize,
}

impl EpochInstance {
    pub fn empty() -> Self {
        Self {
            shape: InstanceShape::single_class(0, 0, 0),
            roster: Vec::new(),
            stations: Vec::new(),
            arm_of: Vec::new(),
            budget: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.roster.is_empty() || self.stations.is_empty() || self.budget == 0
    }

    /// Greedy matching on `weights` stopped after `budget` edges. Greedy
    /// picks edges in non-increasing weight order, so the prefix is exactly
    /// greedy run with an extra cardinality limit.
    pub fn budgeted_greedy(&self, weights: &[f64]) -> Matching {
        if self.is_empty() {
            return Matching::empty();
        }
        let mut order = greedy_order(&self.shape, weights);
        order.truncate(self.budget);
        Matching::new(order)
    }
}

/// Matching budget for an epoch with `requests` trip requests.
pub fn matching_budget(world: &BikeshareWorld, requests: u64) -> usize {
    (world.options.budget_fraction * requests as f64 + 1e-9).floor() as usize
}

/// Builds the epoch's matching instance.
///
/// Redirects only make sense from a station with bikes to spare toward one
/// that is short, measured by [`BikeshareWorld::surplus`]. A flow is
/// eligible when it has at least one request, its destination has a surplus
/// of at least one bike, and at least one candidate is in deficit. Every
/// eligible flow becomes an agent; `budget` limits how many are matched.
pub fn build_epoch_instance(
    world: &BikeshareWorld,
    demand: &Demand,
    budget: usize,
) -> Result<EpochInstance, BikeError> {
    let surplus = world.surplus();
    let mut eligible: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for (f, flow) in world.flows.iter().enumerate() {
        if demand.counts.get(f).copied().unwrap_or(0) == 0 || surplus[flow.dest] < 1.0 {
            continue;
        }
        let slots: Vec<(usize, usize)> = world.candidates[f]
            .iter()
            .enumerate()
            .filter(|&(_, &s)| surplus[s] < 0.0)
            .map(|(slot, &s)| (slot, s))
            .collect();
        if !slots.is_empty() {
            eligible.push((f, slots));
        }
    }
    if eligible.is_empty() || budget == 0 {
        return Ok(EpochInstance::empty());
    }

    let stations: Vec<usize> = eligible
        .iter()
        .flat_map(|(_, slots)| slots.iter().map(|&(_, s)| s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let position: BTreeMap<usize, usize> =
        stations.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    let n_inc = stations.len();
    let forbidden = n_inc;
    let mut class_of = vec![forbidden; eligible.len() * n_inc];
    let mut arm_of = vec![None; eligible.len() * n_inc];
    for (a, (f, slots)) in eligible.iter().enumerate() {
        for &(slot, s) in slots {
            let i = position[&s];
            class_of[a * n_inc + i] = i;
            arm_of[a * n_inc + i] = Some(world.arm_id(*f, slot));
        }
    }
    let mut capacities = vec![world.options.station_capacity; n_inc];
    capacities.push(0);
    let shape = InstanceShape::new(eligible.len(), n_inc, class_of, capacities)?;
    Ok(EpochInstance {
        shape,
        roster: eligible.into_iter().map(|(f, _)| f).collect(),
        stations,
        arm_of,
        budget,
    })
}

// ---------------------------------------------------------------------------
// Epoch play

/// What happened in one bike-share epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BikeEpochOutcome {
    /// Edge means in epoch-instance coordinates.
    pub result: EpochResult,
    pub requests: u64,
    pub served: u64,
    pub rejected: u64,
    pub offered: u64,
    pub accepted: u64,
    pub redirected: u64,
}

impl BikeEpochOutcome {
    /// Served share of requests; an epoch without requests counts as fully
    /// efficient.
    pub fn efficiency(&self) -> f64 {
        efficiency(self.served, self.rejected)
    }
}

pub fn efficiency(served: u64, rejected: u64) -> f64 {
    let total = served + rejected;
    if total == 0 {
        1.0
    } else {
        served as f64 / total as f64
    }
}

/// Plays one epoch: `tau` offers per matched flow, then routes `demand`.
///
/// `behavior_rng` drives offers and state moves, `routing_rng` the rider
/// order. Keeping them apart lets runs with different matchings share the
/// same demand realisation.
#[allow(clippy::too_many_arguments)]
pub fn play_bikeshare_epoch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    world: &mut BikeshareWorld,
    epoch: &EpochInstance,
    matching: &Matching,
    demand: &Demand,
    tau: usize,
    start_time: u64,
    behavior_rng: &mut R1,
    routing_rng: &mut R2,
) -> Result<BikeEpochOutcome, BikeError> {
    matching.check_feasible(&epoch.shape)?;
    let behavior = world.options.behavior;
    // (flow, target station, per-iteration acceptance)
    let mut offers: Vec<(usize, usize, Vec<bool>)> = Vec::with_capacity(matching.len());
    let mut means = Vec::with_capacity(matching.len());
    let mut accepted_total = 0u64;
    for e in matching.edges() {
        let flow = epoch.roster[e.agent];
        let station = epoch.stations[e.incentive];
        let d = world.detour(flow, station);
        let mut accepts = Vec::with_capacity(tau);
        let mut reward = 0.0;
        for _ in 0..tau {
            let state = &world.behavior_params[flow].states[world.flow_states[flow]];
            let accept = d <= state.threshold_m && behavior_rng.random::<f64>() < state.accept_p;
            if accept {
                reward += behavior.accept_reward(state, d);
            }
            accepts.push(accept);
            world.flow_states[flow] =
                world.flow_kernels[flow].sample_next(world.flow_states[flow], behavior_rng);
        }
        accepted_total += accepts.iter().filter(|&&a| a).count() as u64;
        means.push(if tau == 0 { 0.0 } else { reward / tau as f64 });
        offers.push((flow, station, accepts));
    }

    let mut order: Vec<usize> = demand
        .counts
        .iter()
        .enumerate()
        .flat_map(|(f, &c)| std::iter::repeat_n(f, c as usize))
        .collect();
    order.shuffle(routing_rng);

    let mut redirect: BTreeMap<usize, (usize, &[bool], usize)> = offers
        .iter()
        .map(|(f, s, a)| (*f, (*s, a.as_slice(), 0)))
        .collect();
    let mut arrivals = vec![0u32; world.stations.len()];
    let (mut served, mut rejected, mut redirected) = (0u64, 0u64, 0u64);
    for f in order {
        let FlowDemand { origin, dest, .. } = world.flows[f];
        if world.stations[origin].supply == 0 {
            rejected += 1;
            continue;
        }
        world.stations[origin].supply -= 1;
        served += 1;
        let mut target = dest;
        if let Some((station, accepts, next)) = redirect.get_mut(&f) {
            if accepts.get(*next).copied().unwrap_or(false) {
                target = *station;
                redirected += 1;
            }
            *next += 1;
        }
        arrivals[target] += 1;
    }
    for (s, n) in arrivals.into_iter().enumerate() {
        world.stations[s].supply += n;
    }

    let offered = (matching.len() * tau) as u64;
    world.counters.served += served;
    world.counters.rejected += rejected;
    world.counters.offered += offered;
    world.counters.accepted += accepted_total;
    Ok(BikeEpochOutcome {
        result: EpochResult {
            edges: matching.edges().to_vec(),
            means,
            iterations: tau,
            start_time,
        },
        requests: demand.total(),
        served,
        rejected,
        offered,
        accepted: accepted_total,
        redirected,
    })
}

// ---------------------------------------------------------------------------
// Coupled runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BikeMode {
    MgEucbPlus,
    FullInformation,
    NoIncentive,
}

impl BikeMode {
    pub const ALL: [BikeMode; 3] = [
        BikeMode::MgEucbPlus,
        BikeMode::FullInformation,
        BikeMode::NoIncentive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BikeMode::MgEucbPlus => "mg_eucb_plus",
            BikeMode::FullInformation => "full_information",
            BikeMode::NoIncentive => "no_incentive",
        }
    }
}

impl std::fmt::Display for BikeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the per-epoch results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BikeEpochRecord {
    pub epoch: usize,
    pub mode: BikeMode,
    pub served: u64,
    pub rejected: u64,
    pub efficiency: f64,
    pub incentives_offered: u64,
    pub incentives_accepted: u64,
    /// Sum over matched arms of the per-iteration mean reward. Under the
    /// Bernoulli model this is the expected number of accepted offers per
    /// iteration.
    pub mean_matching_reward: f64,
    pub requests: u64,
    /// Flows that could have been offered an incentive this epoch.
    pub eligible_agents: usize,
    pub matched_agents: usize,
    pub redirected: u64,
    pub total_bikes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BikeRunConfig {
    pub schedule: EpochSchedule,
    pub log_coefficient: f64,
    pub n_epochs: usize,
}

impl Default for BikeRunConfig {
    fn default() -> Self {
        Self {
            schedule: EpochSchedule {
                tau0: 10,
                zeta: 0,
                early_stop: None,
            },
            log_coefficient: 3.0,
            n_epochs: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BikeTrace {
    pub mode: BikeMode,
    pub records: Vec<BikeEpochRecord>,
}

impl BikeTrace {
    /// Mean efficiency over the last `fraction` of epochs.
    pub fn terminal_efficiency(&self, fraction: f64) -> f64 {
        let n = self.records.len();
        let tail = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let rows = &self.records[n.saturating_sub(tail)..];
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().map(|r| r.efficiency).sum::<f64>() / rows.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        write_records(out, &self.records)
    }
}

pub fn write_records<W: std::io::Write>(
    out: W,
    records: &[BikeEpochRecord],
) -> Result<(), csv::Error> {
    let mut w = crate::experiment::csv_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<BikeEpochRecord>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Per-arm statistics of the learned policy.
#[derive(Debug, Clone, PartialEq)]
struct ArmStats {
    cum: Vec<f64>,
    pulls: Vec<u64>,
    c_mix: Vec<f64>,
    m: usize,
}

impl ArmStats {
    fn new(world: &BikeshareWorld) -> Result<Self, BikeError> {
        let c_mix = world
            .flow_kernels
            .iter()
            .map(|k| mixing_profile(k).map(|p| p.c_mix))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cum: vec![0.0; world.n_arms()],
            pulls: vec![1; world.n_arms()],
            c_mix,
            m: world.flows.len().max(world.stations.len()).max(1),
        })
    }

    fn indices(
        &self,
        world: &BikeshareWorld,
        epoch: &EpochInstance,
        t: u64,
        cfg: &BikeRunConfig,
    ) -> Vec<f64> {
        epoch
            .arm_of
            .iter()
            .map(|arm| match *arm {
                Some(arm) => {
                    let flow = arm / world.options.k_candidates;
                    let k = self.pulls[arm];
                    self.cum[arm] / k as f64
                        + confidence(
                            self.c_mix[flow],
                            k,
                            t,
                            self.m,
                            cfg.log_coefficient,
                            &cfg.schedule,
                        )
                }
                None => 0.0,
            })
            .collect()
    }

    fn update(&mut self, epoch: &EpochInstance, result: &EpochResult) {
        for (e, &mean) in result.edges.iter().zip(&result.means) {
            if let Some(arm) = epoch.arm_of[epoch.shape.index(*e)] {
                self.cum[arm] += mean;
                self.pulls[arm] += 1;
            }
        }
    }
}

fn select(
    mode: BikeMode,
    world: &BikeshareWorld,
    epoch: &EpochInstance,
    stats: &ArmStats,
    t: u64,
    cfg: &BikeRunConfig,
) -> Matching {
    if epoch.is_empty() {
        return Matching::empty();
    }
    match mode {
        BikeMode::NoIncentive => Matching::empty(),
        BikeMode::MgEucbPlus => epoch.budgeted_greedy(&stats.indices(world, epoch, t, cfg)),
        BikeMode::FullInformation => {
            let weights: Vec<f64> = (0..epoch.shape.n_edges())
                .map(|k| match epoch.arm_of[k] {
                    Some(_) => {
                        let Edge { agent, incentive } = epoch.shape.edge(k);
                        world.expected_offer_reward(epoch.roster[agent], epoch.stations[incentive])
                    }
                    None => 0.0,
                })
                .collect();
            epoch.budgeted_greedy(&weights)
        }
    }
}

/// Runs one mode for `cfg.n_epochs` epochs on its own copy of the world.
/// All modes share the demand and routing streams of `seed`.
pub fn run_mode(
    world: &BikeshareWorld,
    mode: BikeMode,
    cfg: &BikeRunConfig,
    seed: u64,
) -> Result<BikeTrace, BikeError> {
    cfg.schedule.validate()?;
    let mut world = world.clone();
    let mut demand_rng = substream(seed, STREAM_DEMAND);
    let mut routing_rng = substream(seed, STREAM_ROUTING);
    let mut behavior_rng = substream(seed, STREAM_BEHAVIOR);
    let mut stats = ArmStats::new(&world)?;
    let initial = world.total_bikes();
    let mut clock = 0u64;
    let mut records = Vec::with_capacity(cfg.n_epochs);
    for k in 0..cfg.n_epochs {
        let demand = sample_demand(&world, &mut demand_rng);
        let budget = matching_budget(&world, demand.total());
        let epoch = build_epoch_instance(&world, &demand, budget)?;
        let matching = select(mode, &world, &epoch, &stats, k as u64 + 1, cfg);
        let tau = cfg.schedule.tau(k);
        let outcome = play_bikeshare_epoch(
            &mut world,
            &epoch,
            &matching,
            &demand,
            tau,
            clock,
            &mut behavior_rng,
            &mut routing_rng,
        )?;
        clock += tau as u64;
        if mode == BikeMode::MgEucbPlus {
            stats.update(&epoch, &outcome.result);
        }
        let total_bikes = world.total_bikes();
        if total_bikes != initial {
            return Err(BikeError::World(format!(
                "bike count changed from {initial} to {total_bikes} in epoch {k}"
            )));
        }
        records.push(BikeEpochRecord {
            epoch: k,
            mode,
            served: outcome.served,
            rejected: outcome.rejected,
            efficiency: outcome.efficiency(),
            incentives_offered: outcome.offered,
            incentives_accepted: outcome.accepted,
            mean_matching_reward: outcome.result.total(),
            requests: outcome.requests,
            eligible_agents: epoch.roster.len(),
            matched_agents: matching.len(),
            redirected: outcome.redirected,
            total_bikes,
        });
    }
    Ok(BikeTrace { mode, records })
}

/// The three coupled runs (learned policy, full-information greedy, no
/// incentives), executed in parallel.
pub fn run_bikeshare(
    world: &BikeshareWorld,
    cfg: &BikeRunConfig,
    seed: u64,
) -> Result<Vec<BikeTrace>, BikeError> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = BikeMode::ALL
            .iter()
            .map(|&mode| scope.spawn(move || run_mode(world, mode, cfg, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bike-share run panicked"))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Synthetic grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub side: usize,
    pub spacing_m: f64,
    pub base_supply: u32,
    pub scale: f64,
    /// Mean of the exponential the base rates are drawn from.
    pub rate_mean: f64,
    /// Truncation point of that exponential.
    pub rate_cap: f64,
    /// Flows connect stations at most this far apart.
    pub reach_m: f64,
    /// Checkerboard skew: rates from dark to light squares are multiplied by
    /// `1 + imbalance`, the reverse direction by `1 - imbalance`.
    pub imbalance: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            side: 5,
            spacing_m: 500.0,
            base_supply: 25,
            scale: 2.0,
            rate_mean: 5.0,
            rate_cap: 20.0,
            reach_m: 1000.0,
            imbalance: 0.3,
        }
    }
}

/// Stations on a `side x side` grid with truncated-exponential flow rates.
pub fn synthetic_grid(
    spec: &GridSpec,
    seed: u64,
) -> Result<(Vec<Station>, Vec<FlowDemand>), BikeError> {
    if spec.side == 0
        || !(spec.spacing_m > 0.0)
        || !(spec.rate_mean > 0.0)
        || !(spec.rate_cap > 0.0)
    {
        return Err(BikeError::World(
            "grid side, spacing, rate mean and cap must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.imbalance) {
        return Err(BikeError::World(format!(
            "imbalance {} outside [0, 1]",
            spec.imbalance
        )));
    }
    let mut rng = substream(seed, STREAM_GRID);
    let supply = scaled_supply(spec.base_supply, spec.scale);
    let stations: Vec<Station> = (0..spec.side * spec.side)
        .map(|k| Station {
            id: format!("S{k:02}"),
            coords: Coordinates::Planar {
                x: (k % spec.side) as f64 * spec.spacing_m,
                y: (k / spec.side) as f64 * spec.spacing_m,
            },
            supply,
        })
        .collect();
    let dark = |k: usize| (k % spec.side + k / spec.side) % 2 == 0;
    let tail = 1.0 - (-spec.rate_cap / spec.rate_mean).exp();
    let mut flows = Vec::new();
    for o in 0..stations.len() {
        for d in 0..stations.len() {
            let dist = stations[o]
                .coords
                .distance(&stations[d].coords)
                .unwrap_or(f64::INFINITY);
            if o == d || dist > spec.reach_m + 1e-9 {
                continue;
            }
            let u: f64 = rng.random();
            let base = -spec.rate_mean * (1.0 - u * tail).ln();
            let skew = match (dark(o), dark(d)) {
                (true, false) => 1.0 + spec.imbalance,
                (false, true) => 1.0 - spec.imbalance,
                _ => 1.0,
            };
            flows.push(FlowDemand {
                origin: o,
                dest: d,
                mean_rate: base * skew,
            });
        }
    }
    Ok((stations, flows))
}

pub fn synthetic_world(
    spec: &GridSpec,
    options: WorldOptions,
    seed: u64,
) -> Result<BikeshareWorld, BikeError> {
    let (stations, flows) = synthetic_grid(spec, seed)?;
    BikeshareWorld::new(stations, flows, options, seed)
}

fn scaled_supply(base: u32, scale: f64) -> u32 {
    (f64::from(base) * scale).round().max(0.0) as u32
}

// ---------------------------------------------------------------------------
// Trip ingestion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    /// Inclusive start of the daily window, local time.
    pub window_start: NaiveTime,
    /// Exclusive end of the daily window.
    pub window_end: NaiveTime,
    pub date_from: Option<NaiveDate>,
    pub date_to: Option<NaiveDate>,
    pub base_supply: u32,
    pub scale: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            window_start: NaiveTime::from_hms_opt(12, 0, 0).expect("valid time"),
            window_end: NaiveTime::from_hms_opt(13, 0, 0).expect("valid time"),
            date_from: None,
            date_to: None,
            base_supply: 10,
            scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub stations: Vec<Station>,
    pub flows: Vec<FlowDemand>,
    /// Days the rates are averaged over.
    pub days: usize,
    pub rows_read: usize,
    pub rows_in_window: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TripRow {
    start_station_id: String,
    end_station_id: String,
    start_time: String,
    #[serde(default)]
    start_lat: Option<f64>,
    #[serde(default)]
    start_lon: Option<f64>,
    #[serde(default)]
    end_lat: Option<f64>,
    #[serde(default)]
    end_lon: Option<f64>,
}

/// Parses an ISO-8601 timestamp and returns its local date and time. An
/// explicit offset is kept as written rather than converted.
pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Some(t.naive_local());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
}

/// Reads trips and turns window counts into per-flow daily rates.
///
/// The number of days is the length of the configured date range when both
/// ends are given, otherwise the number of distinct dates seen in range.
/// Stations take coordinates from `station_table` when given, else from the
/// first row mentioning them.
pub fn ingest_trips<R: Read>(
    input: R,
    station_table: Option<&[Station]>,
    opts: &IngestOptions,
) -> Result<IngestReport, BikeError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut coords: BTreeMap<String, Option<Coordinates>> = BTreeMap::new();
    if let Some(table) = station_table {
        for s in table {
            coords.insert(s.id.clone(), Some(s.coords));
        }
    }
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut dates = BTreeSet::new();
    let (mut rows_read, mut rows_in_window) = (0usize, 0usize);
    let headers = reader.headers()?.clone();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader
            .read_record(&mut record)
            .map_err(|e| BikeError::Row {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: TripRow = record
            .deserialize(Some(&headers))
            .map_err(|e| BikeError::Row {
                line,
                message: e.to_string(),
            })?;
        rows_read += 1;
        let Some(at) = parse_timestamp(&row.start_time) else {
            return Err(BikeError::Row {
                line,
                message: format!("unparseable start_time {:?}", row.start_time),
            });
        };
        for (id, lat, lon) in [
            (&row.start_station_id, row.start_lat, row.start_lon),
            (&row.end_station_id, row.end_lat, row.end_lon),
        ] {
            let c = match (lat, lon) {
                (Some(lat), Some(lon)) => Some(Coordinates::LatLon { lat, lon }),
                _ => None,
            };
            let slot = coords.entry(id.clone()).or_insert(None);
            if slot.is_none() {
                *slot = c;
            }
        }
        let date = at.date();
        if opts.date_from.is_some_and(|d| date < d) || opts.date_to.is_some_and(|d| date > d) {
            continue;
        }
        dates.insert(date);
        let time = at.time();
        if time < opts.window_start || time >= opts.window_end {
            continue;
        }
        rows_in_window += 1;
        *counts
            .entry((row.start_station_id, row.end_station_id))
            .or_insert(0) += 1;
    }

    let days = match (opts.date_from, opts.date_to) {
        (Some(a), Some(b)) if b >= a => (b - a).num_days() as usize + 1,
        _ => dates.len(),
    };
    let supply = scaled_supply(opts.base_supply, opts.scale);
    let mut stations = Vec::with_capacity(coords.len());
    let mut index = BTreeMap::new();
    for (id, c) in coords {
        let Some(c) = c else {
            return Err(BikeError::World(format!("station {id} has no coordinates")));
        };
        index.insert(id.clone(), stations.len());
        stations.push(Station {
            id,
            coords: c,
            supply,
        });
    }
    let flows: Vec<FlowDemand> = counts
        .into_iter()
        .map(|((o, d), n)| FlowDemand {
            origin: index[&o],
            dest: index[&d],
            mean_rate: n as f64 / days.max(1) as f64,
        })
        .collect();
    let mut warnings = Vec::new();
    if flows.is_empty() {
        warnings.push("no trips fall inside the configured window and date range".to_string());
    }
    Ok(IngestReport {
        stations,
        flows,
        days,
        rows_read,
        rows_in_window,
        warnings,
    })
}

/// Reads a station table with columns `id,lat,lon`.
pub fn read_station_table<R: Read>(
    input: R,
    base_supply: u32,
    scale: f64,
) -> Result<Vec<Station>, BikeError> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        lat: f64,
        lon: f64,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let supply = scaled_supply(base_supply, scale);
    reader
        .deserialize::<Row>()
        .map(|r| {
            let r = r.map_err(|e| BikeError::Row {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            Ok(Station {
                id: r.id,
                coords: Coordinates::LatLon {
                    lat: r.lat,
                    lon: r.lon,
                },
                supply,
            })
        })
        .collect()
}

/// Writes flows as `origin,dest,mean_rate` using station ids.
pub fn write_flows<W: std::io::Write>(
    out: W,
    stations: &[Station],
    flows: &[FlowDemand],
) -> Result<(), csv::Error> {
    #[derive(Serialize)]
    struct Row<'a> {
        origin: &'a str,
        dest: &'a str,
        mean_rate: f64,
    }
    let mut w = crate::experiment::csv_writer(out);
    for f in flows {
        w.serialize(Row {
            origin: &stations[f.origin].id,
            dest: &stations[f.dest].id,
            mean_rate: f.mean_rate,
        })?;
    }
    w.flush()?;
    Ok(())
}
