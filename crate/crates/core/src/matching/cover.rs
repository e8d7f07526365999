use super::instance::{Edge, InstanceShape, Matching, Occupancy};
use super::MatchingError;

/// Disjoint feasible matchings that together contain every edge exactly once.
///
/// Each round builds a maximal matching out of the still-uncovered edges,
/// scanning them in cyclic-diagonal order: by `(incentive - agent) mod
/// m_incentives`, then by agent. On a square instance whose capacities never
/// bind, this yields the `m` diagonals of a Latin square.
pub fn initial_cover(shape: &InstanceShape) -> Result<Vec<Matching>, MatchingError> {
    for (c, members) in shape.class_members().iter().enumerate() {
        if shape.capacities()[c] == 0 && !members.is_empty() {
            return Err(MatchingError::UncoverableEdge(members[0]));
        }
    }
    let cols = shape.m_incentives();
    let mut uncovered: Vec<Edge> = shape.edges().collect();
    uncovered.sort_by_key(|e| {
        (
            (e.incentive + cols - e.agent % cols.max(1)) % cols.max(1),
            e.agent,
        )
    });

    let mut cover = Vec::new();
    while !uncovered.is_empty() {
        let mut occupancy = Occupancy::new(shape);
        let mut chosen = Vec::new();
        uncovered.retain(|&e| {
            if occupancy.admits(shape, e) {
                occupancy.insert(shape, e);
                chosen.push(e);
                false
            } else {
                true
            }
        });
        debug_assert!(!chosen.is_empty());
        cover.push(Matching::new(chosen));
    }
    Ok(cover)
}
