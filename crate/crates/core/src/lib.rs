//! Incentive matching for agents whose reward states evolve as Markov chains.
//!
//! The crate is organised bottom-up:
//!
//! - [`matching`]: capacitated greedy matching, an exact oracle, the Hungarian
//!   baseline, infeasibility decompositions and initial edge covers.
//! - [`markov`]: finite Markov chain utilities (stationary laws,
//!   reversibilization, mixing constants, sampling).
//! - [`environment`]: the agents-and-incentives simulator.
//! - [`policy`]: epoch-based greedy UCB (MG-EUCB and variants) plus a
//!   per-iteration classical UCB baseline.
//! - [`regret`]: the stationary greedy benchmark, reward gaps, regret traces
//!   and evaluators for the theoretical bounds.
//! - [`bikeshare`]: a bike-share rebalancing simulation driven by the policies.
//! - [`experiment`]: configuration, orchestration and CSV/JSON output.

pub mod bikeshare;
pub mod environment;
pub mod experiment;
pub mod markov;
pub mod matching;
pub mod policy;
pub mod regret;
pub mod rng;

pub use environment::{EnvironmentModel, EpochResult, RewardDistribution};
pub use markov::{MixingProfile, StationaryDistribution, TransitionKernel};
pub use matching::{Edge, InstanceShape, Matching, MatchingInstance};
pub use policy::{EpochSchedule, PolicyConfig, Variant};
pub use regret::{Benchmark, RegretTrace};
