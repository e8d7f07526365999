use std::cmp::Ordering;

use super::instance::{check_weights, Edge, InstanceShape, Matching, MatchingInstance, Occupancy};
use super::MatchingError;

/// Edge indices ordered by weight, heaviest first; ties go to the
/// lexicographically smaller `(agent, incentive)`.
pub(crate) fn weight_order(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&x, &y| by_weight_desc(weights, x, y));
    order
}

#[inline]
fn by_weight_desc(weights: &[f64], x: usize, y: usize) -> Ordering {
    weights[y].total_cmp(&weights[x]).then(x.cmp(&y))
}

/// Capacitated greedy matching, returning edges in the order they were
/// selected (non-increasing weight).
///
/// Scanning edges heaviest-first and keeping each one that is still feasible
/// is the same procedure as repeatedly taking the arg-max of the remaining
/// set and deleting conflicting edges (on selection) or the edge itself (when
/// its class is saturated).
pub fn greedy_order(shape: &InstanceShape, weights: &[f64]) -> Vec<Edge> {
    debug_assert_eq!(weights.len(), shape.n_edges());
    let mut occupancy = Occupancy::new(shape);
    let limit = shape.m_agents().min(shape.m_incentives());
    let mut selected = Vec::with_capacity(limit);
    for k in weight_order(weights) {
        if selected.len() == limit {
            break;
        }
        let e = shape.edge(k);
        if occupancy.admits(shape, e) {
            occupancy.insert(shape, e);
            selected.push(e);
        }
    }
    selected
}

/// Greedy matching on an instance. Always feasible; empty instances give an
/// empty matching.
pub fn greedy_match(instance: &MatchingInstance) -> Matching {
    Matching::new(greedy_order(instance.shape(), instance.weights()))
}

/// Greedy matching for a shape and a raw weight vector, validating weights.
pub fn greedy_match_weights(
    shape: &InstanceShape,
    weights: &[f64],
) -> Result<Matching, MatchingError> {
    check_weights(shape, weights)?;
    Ok(Matching::new(greedy_order(shape, weights)))
}

/// Greedy on index values that may exceed `[0, 1]` or be very large; only
/// finiteness and ordering matter. Used by the bandit layer.
pub(crate) fn greedy_unchecked(shape: &InstanceShape, weights: &[f64]) -> Matching {
    Matching::new(greedy_order(shape, weights))
}
