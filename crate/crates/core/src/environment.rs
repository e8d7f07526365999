//! The agents-and-incentives world.
//!
//! Each agent carries a hidden state. While agent `a` is matched to incentive
//! `i`, every iteration draws a reward from the distribution attached to
//! `(a, i, state)` and then moves the state with the kernel of edge `(a, i)`.
//! Agents that are not matched keep their state unless an idle kernel is
//! configured for them. Policies only ever see epoch time-averages.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::markov::{self, MarkovError, MixingProfile, TransitionKernel};
use crate::matching::{Edge, InstanceShape, Matching, MatchingError, MatchingInstance};
use crate::rng::{substream, SimRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid reward distribution: {0}")]
    InvalidReward(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("edge {edge}: {source}")]
    Arm { edge: Edge, source: MarkovError },
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("parameter out of range: {0}")]
    Parameter(String),
    #[error("could not sample an ergodic kernel in {0} attempts")]
    KernelSampling(usize),
}

/// Reward law for one `(agent, incentive, state)` triple; supported on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardDistribution {
    Bernoulli { p: f64 },
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
    Deterministic { value: f64 },
}

impl RewardDistribution {
    pub fn validate(&self) -> Result<(), EnvError> {
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        let ok = match *self {
            Self::Bernoulli { p } => unit(p),
            Self::Uniform { lo, hi } => unit(lo) && unit(hi) && lo <= hi,
            Self::Beta { alpha, beta } => {
                alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0
            }
            Self::Deterministic { value } => unit(value),
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidReward(format!("{self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Bernoulli { p } => p,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
            Self::Beta { alpha, beta } => alpha / (alpha + beta),
            Self::Deterministic { value } => value,
        }
    }

    fn sampler(&self) -> RewardSampler {
        match *self {
            Self::Bernoulli { p } => RewardSampler::Bernoulli(p),
            Self::Uniform { lo, hi } => RewardSampler::Uniform(lo, hi - lo),
            Self::Beta { alpha, beta } => {
                RewardSampler::Beta(Beta::new(alpha, beta).expect("validated"))
            }
            Self::Deterministic { value } => RewardSampler::Constant(value),
        }
    }
}

#[derive(Debug, Clone)]
enum RewardSampler {
    Bernoulli(f64),
    Uniform(f64, f64),
    Beta(Beta<f64>),
    Constant(f64),
}

impl RewardSampler {
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Bernoulli(p) => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Uniform(lo, width) => lo + width * rng.random::<f64>(),
            Self::Beta(d) => d.sample(rng),
            Self::Constant(v) => *v,
        }
    }
}

/// Kernel and per-state reward laws of one edge.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ArmFile", into = "ArmFile")]
pub struct ArmModel {
    kernel: TransitionKernel,
    rewards: Vec<RewardDistribution>,
    samplers: Vec<RewardSampler>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmFile {
    pub kernel: TransitionKernel,
    pub rewards: Vec<RewardDistribution>,
}

impl TryFrom<ArmFile> for ArmModel {
    type Error = EnvError;

    fn try_from(f: ArmFile) -> Result<Self, EnvError> {
        ArmModel::new(f.kernel, f.rewards)
    }
}

impl From<ArmModel> for ArmFile {
    fn from(a: ArmModel) -> Self {
        Self {
            kernel: a.kernel,
            rewards: a.rewards,
        }
    }
}

impl PartialEq for ArmModel {
    fn eq(&self, other: &Self) -> bool {
        self.kernel == other.kernel && self.rewards == other.rewards
    }
}

impl ArmModel {
    pub fn new(
        kernel: TransitionKernel,
        rewards: Vec<RewardDistribution>,
    ) -> Result<Self, EnvError> {
        if rewards.len() != kernel.states() {
            return Err(EnvError::Dimension(format!(
                "{} reward laws for {} states",
                rewards.len(),
                kernel.states()
            )));
        }
        for r in &rewards {
            r.validate()?;
        }
        let samplers = rewards.iter().map(RewardDistribution::sampler).collect();
        Ok(Self {
            kernel,
            rewards,
            samplers,
        })
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn rewards(&self) -> &[RewardDistribution] {
        &self.rewards
    }

    pub fn states(&self) -> usize {
        self.kernel.states()
    }

    /// Reward at `state`, then one transition.
    #[inline]
    pub fn pull<R: Rng + ?Sized>(&self, state: &mut usize, rng: &mut R) -> f64 {
        let r = self.samplers[*state].sample(rng);
        *state = self.kernel.sample_next(*state, rng);
        r
    }

    /// Expected reward under the stationary law of the kernel.
    pub fn stationary_mean(&self) -> Result<f64, MarkovError> {
        let pi = markov::stationary(&self.kernel)?;
        Ok(pi.expect(|s| self.rewards[s].mean()))
    }
}

/// Early epoch termination: stop once the time-averaged matching reward has
/// moved by at most `delta` per iteration for `patience` iterations in a row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub delta: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            delta: 5e-4,
            patience: 200,
        }
    }
}

/// Time-averaged rewards of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochResult {
    pub edges: Vec<Edge>,
    /// Per-edge average reward, aligned with `edges`.
    pub means: Vec<f64>,
    pub iterations: usize,
    pub start_time: u64,
}

impl EpochResult {
    pub fn total(&self) -> f64 {
        self.means.iter().sum()
    }

    pub fn mean_of(&self, e: Edge) -> Option<f64> {
        self.edges
            .iter()
            .position(|&x| x == e)
            .map(|k| self.means[k])
    }
}

/// The simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    m_agents: usize,
    m_incentives: usize,
    state_space_sizes: Vec<usize>,
    /// Row-major by `(agent, incentive)`.
    arms: Vec<ArmModel>,
    current_states: Vec<usize>,
    clock: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idle_kernels: Option<Vec<TransitionKernel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl EnvironmentModel {
    /// Builds a world whose arm kernels are all aperiodic and irreducible.
    pub fn new(
        m_agents: usize,
        m_incentives: usize,
        arms: Vec<ArmModel>,
        initial_states: Vec<usize>,
    ) -> Result<Self, EnvError> {
        let env = Self::new_relaxed(m_agents, m_incentives, arms, initial_states)?;
        for (k, arm) in env.arms.iter().enumerate() {
            let s = markov::validate(arm.kernel());
            let edge = Edge::new(k / m_incentives, k % m_incentives);
            if !s.irreducible {
                return Err(EnvError::Arm {
                    edge,
                    source: MarkovError::Reducible,
                });
            }
            if !s.aperiodic {
                return Err(EnvError::Arm {
                    edge,
                    source: MarkovError::Periodic,
                });
            }
        }
        Ok(env)
    }

    /// Like [`EnvironmentModel::new`] but accepts non-ergodic kernels.
    /// Stationary quantities then fail with a Markov error.
    pub fn new_relaxed(
        m_agents: usize,
        m_incentives: usize,
        arms: Vec<ArmModel>,
        initial_states: Vec<usize>,
    ) -> Result<Self, EnvError> {
        if arms.len() != m_agents * m_incentives {
            return Err(EnvError::Dimension(format!(
                "{} arms for a {m_agents}x{m_incentives} world",
                arms.len()
            )));
        }
        if initial_states.len() != m_agents {
            return Err(EnvError::Dimension(format!(
                "{} initial states for {m_agents} agents",
                initial_states.len()
            )));
        }
        let mut sizes = Vec::with_capacity(m_agents);
        for a in 0..m_agents {
            let row = &arms[a * m_incentives..(a + 1) * m_incentives];
            let n = row.first().map_or(1, ArmModel::states);
            if row.iter().any(|arm| arm.states() != n) {
                return Err(EnvError::Dimension(format!(
                    "arms of agent {a} disagree on the state space"
                )));
            }
            if initial_states[a] >= n {
                return Err(EnvError::Markov(MarkovError::InvalidState {
                    state: initial_states[a],
                    states: n,
                }));
            }
            sizes.push(n);
        }
        Ok(Self {
            m_agents,
            m_incentives,
            state_space_sizes: sizes,
            arms,
            current_states: initial_states,
            clock: 0,
            idle_kernels: None,
            seed: None,
        })
    }

    /// Agents not matched in an iteration move with their idle kernel
    /// instead of staying put.
    pub fn with_idle_kernels(mut self, kernels: Vec<TransitionKernel>) -> Result<Self, EnvError> {
        if kernels.len() != self.m_agents
            || kernels
                .iter()
                .zip(&self.state_space_sizes)
                .any(|(k, &n)| k.states() != n)
        {
            return Err(EnvError::Dimension(
                "idle kernels must match agent state spaces".into(),
            ));
        }
        self.idle_kernels = Some(kernels);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn m_agents(&self) -> usize {
        self.m_agents
    }

    pub fn m_incentives(&self) -> usize {
        self.m_incentives
    }

    pub fn state_space_sizes(&self) -> &[usize] {
        &self.state_space_sizes
    }

    pub fn current_states(&self) -> &[usize] {
        &self.current_states
    }

    pub fn set_states(&mut self, states: Vec<usize>) -> Result<(), EnvError> {
        if states.len() != self.m_agents
            || states
                .iter()
                .zip(&self.state_space_sizes)
                .any(|(&s, &n)| s >= n)
        {
            return Err(EnvError::Dimension("invalid agent states".into()));
        }
        self.current_states = states;
        Ok(())
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn arm(&self, e: Edge) -> &ArmModel {
        &self.arms[e.agent * self.m_incentives + e.incentive]
    }

    fn check_matching(
        &self,
        matching: &Matching,
        shape: Option<&InstanceShape>,
    ) -> Result<(), EnvError> {
        for &e in matching.edges() {
            if e.agent >= self.m_agents || e.incentive >= self.m_incentives {
                return Err(EnvError::Dimension(format!("edge {e} outside the world")));
            }
        }
        match shape {
            Some(shape) => matching.check_feasible(shape)?,
            None => matching.check_feasible(&InstanceShape::single_class(
                self.m_agents,
                self.m_incentives,
                self.m_agents.min(self.m_incentives),
            ))?,
        }
        Ok(())
    }

    /// Plays `matching` for `tau` iterations and returns per-edge averages.
    pub fn play_epoch<R: Rng + ?Sized>(
        &mut self,
        matching: &Matching,
        tau: usize,
        rng: &mut R,
    ) -> Result<EpochResult, EnvError> {
        self.play_epoch_with(matching, tau, None, None, rng)
    }

    /// Full form: optional class constraints to check against and optional
    /// early termination. The epoch runs at most `tau` iterations.
    pub fn play_epoch_with<R: Rng + ?Sized>(
        &mut self,
        matching: &Matching,
        tau: usize,
        shape: Option<&InstanceShape>,
        early_stop: Option<&EarlyStop>,
        rng: &mut R,
    ) -> Result<EpochResult, EnvError> {
        if tau == 0 {
            return Err(EnvError::Parameter(
                "epoch length must be at least 1".into(),
            ));
        }
        self.check_matching(matching, shape)?;
        let start_time = self.clock;
        let edges = matching.edges().to_vec();
        let arm_idx: Vec<usize> = edges
            .iter()
            .map(|e| e.agent * self.m_incentives + e.incentive)
            .collect();
        let idle_agents: Vec<usize> = match &self.idle_kernels {
            Some(_) => {
                let mut matched = vec![false; self.m_agents];
                for e in &edges {
                    matched[e.agent] = true;
                }
                (0..self.m_agents).filter(|&a| !matched[a]).collect()
            }
            None => Vec::new(),
        };
        let mut sums = vec![0.0; edges.len()];
        let mut prev_avg = 0.0;
        let mut calm = 0usize;
        let mut iterations = 0;
        let width = edges.len().max(1) as f64;
        for t in 1..=tau {
            let mut step_total = 0.0;
            for ((e, &k), sum) in edges.iter().zip(&arm_idx).zip(sums.iter_mut()) {
                let r = self.arms[k].pull(&mut self.current_states[e.agent], rng);
                *sum += r;
                step_total += r;
            }
            if let Some(kernels) = &self.idle_kernels {
                for &a in &idle_agents {
                    self.current_states[a] = kernels[a].sample_next(self.current_states[a], rng);
                }
            }
            iterations = t;
            if let Some(stop) = early_stop {
                if edges.is_empty() {
                    continue;
                }
                let avg = (prev_avg * (t - 1) as f64 + step_total / width) / t as f64;
                if t > 1 && (avg - prev_avg).abs() <= stop.delta {
                    calm += 1;
                } else {
                    calm = 0;
                }
                prev_avg = avg;
                if calm >= stop.patience && stop.patience > 0 {
                    break;
                }
            }
        }
        self.clock += iterations as u64;
        let means = sums.into_iter().map(|s| s / iterations as f64).collect();
        Ok(EpochResult {
            edges,
            means,
            iterations,
            start_time,
        })
    }

    /// One iteration; rewards aligned with `matching.edges()`. No
    /// feasibility check, used by per-iteration baselines.
    pub fn play_iteration<R: Rng + ?Sized>(
        &mut self,
        matching: &Matching,
        rewards: &mut Vec<f64>,
        rng: &mut R,
    ) {
        rewards.clear();
        for e in matching.edges() {
            let k = e.agent * self.m_incentives + e.incentive;
            rewards.push(self.arms[k].pull(&mut self.current_states[e.agent], rng));
        }
        if let Some(kernels) = &self.idle_kernels {
            for a in 0..self.m_agents {
                if matching.edges().iter().all(|e| e.agent != a) {
                    self.current_states[a] = kernels[a].sample_next(self.current_states[a], rng);
                }
            }
        }
        self.clock += 1;
    }

    /// Expected reward of `edge` under its kernel's stationary law.
    pub fn stationary_mean(&self, edge: Edge) -> Result<f64, EnvError> {
        if edge.agent >= self.m_agents || edge.incentive >= self.m_incentives {
            return Err(EnvError::Dimension(format!(
                "edge {edge} outside the world"
            )));
        }
        self.arm(edge)
            .stationary_mean()
            .map_err(|source| EnvError::Arm { edge, source })
    }

    /// Stationary means of all edges, row-major.
    pub fn stationary_means(&self) -> Result<Vec<f64>, EnvError> {
        (0..self.arms.len())
            .map(|k| self.stationary_mean(Edge::new(k / self.m_incentives, k % self.m_incentives)))
            .collect()
    }

    /// Mixing profiles of all edges, row-major.
    pub fn mixing_profiles(&self) -> Result<Vec<MixingProfile>, EnvError> {
        self.arms
            .iter()
            .enumerate()
            .map(|(k, arm)| {
                markov::mixing_profile(arm.kernel()).map_err(|source| EnvError::Arm {
                    edge: Edge::new(k / self.m_incentives, k % self.m_incentives),
                    source,
                })
            })
            .collect()
    }
}

/// The two-agent, two-incentive, two-state world in which per-iteration UCB
/// locks onto the wrong matching.
///
/// Matching an agent to "its" incentive (`a1-i1`, `a2-i2`) pays 0 in state 0
/// and 1 in state 1, moving 0 -> 1 surely and 1 -> 0 with probability `eps`.
/// The cross edges always pay 0.5 and push the agent back to state 0. Both
/// agents start in state 0. The returned instance carries stationary weights
/// and a single class of capacity 2.
pub fn example1(eps: f64) -> Result<(EnvironmentModel, MatchingInstance), EnvError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(EnvError::Parameter(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    let (env, shape) = example1_world(eps)?;
    let means = env.stationary_means()?;
    Ok((env, shape.with_weights(means)?))
}

/// Example world for any `eps` in `[0, 1)`; `eps = 0` makes the favoured
/// chains reducible, so only `new_relaxed` invariants hold.
pub fn example1_world(eps: f64) -> Result<(EnvironmentModel, InstanceShape), EnvError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(EnvError::Parameter(format!(
            "eps must lie in [0, 1), got {eps}"
        )));
    }
    let favoured = || -> Result<ArmModel, EnvError> {
        ArmModel::new(
            TransitionKernel::new(vec![vec![0.0, 1.0], vec![eps, 1.0 - eps]])?,
            vec![
                RewardDistribution::Deterministic { value: 0.0 },
                RewardDistribution::Deterministic { value: 1.0 },
            ],
        )
    };
    let cross = || -> Result<ArmModel, EnvError> {
        ArmModel::new(
            TransitionKernel::new(vec![vec![1.0 - eps, eps], vec![1.0, 0.0]])?,
            vec![RewardDistribution::Deterministic { value: 0.5 }; 2],
        )
    };
    let arms = vec![favoured()?, cross()?, cross()?, favoured()?];
    let env = if eps > 0.0 {
        EnvironmentModel::new(2, 2, arms, vec![0, 0])?
    } else {
        EnvironmentModel::new_relaxed(2, 2, arms, vec![0, 0])?
    };
    Ok((env, InstanceShape::single_class(2, 2, 2)))
}

/// Reward families for synthetic worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    Bernoulli,
    Uniform,
    Beta,
    /// Each `(edge, state)` picks one of the three families uniformly.
    Mixed,
}

impl std::str::FromStr for RewardFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "uniform" => Ok(Self::Uniform),
            "beta" => Ok(Self::Beta),
            "mixed" => Ok(Self::Mixed),
            _ => Err(format!("unknown reward family {s:?}")),
        }
    }
}

/// Parameters of a random world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub m_agents: usize,
    pub m_incentives: usize,
    pub n_states: usize,
    pub family: RewardFamily,
    /// Class map and capacities; a single class of capacity `min(m_agents,
    /// m_incentives)` when absent.
    pub classes: Option<(Vec<usize>, Vec<usize>)>,
}

impl SyntheticSpec {
    pub fn square(m: usize, n_states: usize, family: RewardFamily) -> Self {
        Self {
            m_agents: m,
            m_incentives: m,
            n_states,
            family,
            classes: None,
        }
    }
}

const KERNEL_ATTEMPTS: usize = 100;
const SYNTHETIC_STREAM: u64 = 0x5157;

/// Random world: row-normalised uniform kernels, reward parameters drawn per
/// family (`p ~ U[0,1]`, ordered `lo, hi ~ U[0,1]`, `alpha, beta ~ U[0.5,
/// 5]`), uniform initial states. Identical seeds give identical worlds.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(EnvironmentModel, MatchingInstance), EnvError> {
    if spec.m_agents == 0 || spec.m_incentives == 0 || spec.n_states == 0 {
        return Err(EnvError::Parameter(
            "agents, incentives and states must be positive".into(),
        ));
    }
    let mut rng = substream(seed, SYNTHETIC_STREAM);
    let n_arms = spec.m_agents * spec.m_incentives;
    let mut arms = Vec::with_capacity(n_arms);
    for _ in 0..n_arms {
        let kernel = random_kernel(spec.n_states, &mut rng)?;
        let rewards = (0..spec.n_states)
            .map(|_| random_reward(spec.family, &mut rng))
            .collect();
        arms.push(ArmModel::new(kernel, rewards)?);
    }
    let states = (0..spec.m_agents)
        .map(|_| rng.random_range(0..spec.n_states))
        .collect();
    let env =
        EnvironmentModel::new(spec.m_agents, spec.m_incentives, arms, states)?.with_seed(seed);
    let shape = match &spec.classes {
        Some((class_of, caps)) => InstanceShape::new(
            spec.m_agents,
            spec.m_incentives,
            class_of.clone(),
            caps.clone(),
        )?,
        None => InstanceShape::single_class(
            spec.m_agents,
            spec.m_incentives,
            spec.m_agents.min(spec.m_incentives),
        ),
    };
    let means = env.stationary_means()?;
    Ok((env, shape.with_weights(means)?))
}

/// Row-normalised matrix of `U(0,1)` entries, resampled until ergodic.
pub fn random_kernel(n_states: usize, rng: &mut SimRng) -> Result<TransitionKernel, EnvError> {
    for _ in 0..KERNEL_ATTEMPTS {
        let weights = (0..n_states)
            .map(|_| (0..n_states).map(|_| rng.random::<f64>()).collect())
            .collect();
        let Ok(kernel) = TransitionKernel::from_weights(weights) else {
            continue;
        };
        let s = markov::validate(&kernel);
        if s.irreducible && s.aperiodic {
            return Ok(kernel);
        }
    }
    Err(EnvError::KernelSampling(KERNEL_ATTEMPTS))
}

fn random_reward(family: RewardFamily, rng: &mut SimRng) -> RewardDistribution {
    let family = match family {
        RewardFamily::Mixed => match rng.random_range(0..3) {
            0 => RewardFamily::Bernoulli,
            1 => RewardFamily::Uniform,
            _ => RewardFamily::Beta,
        },
        f => f,
    };
    match family {
        RewardFamily::Bernoulli => RewardDistribution::Bernoulli { p: rng.random() },
        RewardFamily::Uniform => {
            let (x, y): (f64, f64) = (rng.random(), rng.random());
            RewardDistribution::Uniform {
                lo: x.min(y),
                hi: x.max(y),
            }
        }
        RewardFamily::Beta => RewardDistribution::Beta {
            alpha: rng.random_range(0.5..5.0),
            beta: rng.random_range(0.5..5.0),
        },
        RewardFamily::Mixed => unreachable!(),
    }
}
