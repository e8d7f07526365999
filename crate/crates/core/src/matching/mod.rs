//! Capacitated bipartite matching.
//!
//! Agents `A` and incentives `I` form the complete edge set `A x I`. Edges are
//! partitioned into classes, and a matching may use at most `b` edges of a
//! class with capacity `b`, on top of the usual one-edge-per-vertex rule.
//! Finding the best such matching is NP-hard; [`greedy_match`] is a
//! 1/3-approximation, and [`exact_match`] is a small-instance oracle.

mod cover;
mod decompose;
mod exact;
mod greedy;
mod hungarian;
mod instance;

pub use cover::initial_cover;
pub use decompose::{check_lemma1, decompose, InfeasibilityDecomposition, Lemma1Report};
pub use exact::{exact_match, exact_match_with_limit, DEFAULT_EXACT_EDGE_LIMIT};
pub use greedy::{greedy_match, greedy_match_weights, greedy_order};
pub use hungarian::hungarian_match;
pub use instance::{Edge, InstanceFile, InstanceShape, Matching, MatchingInstance, MatchingReport};

pub(crate) use greedy::greedy_unchecked;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchingError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("edge {edge} has invalid weight {weight}; weights must be finite and non-negative")]
    InvalidWeight { edge: Edge, weight: f64 },
    #[error("infeasible matching: {0}")]
    Infeasible(String),
    #[error("exact search limited to {limit} positive-weight edges, instance has {edges}")]
    InstanceTooLarge { edges: usize, limit: usize },
    #[error("class capacities bind; the Hungarian method cannot honour them")]
    BindingCapacities,
    #[error("instances differ in edges, classes or capacities")]
    ShapeMismatch,
    #[error("edge {0} sits in a zero-capacity class and can never be played")]
    UncoverableEdge(Edge),
}
