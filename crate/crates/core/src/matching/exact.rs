use super::greedy::weight_order;
use super::instance::{Edge, InstanceShape, Matching, MatchingInstance, Occupancy};
use super::MatchingError;

/// Default cap on the number of positive-weight edges the exact search accepts.
pub const DEFAULT_EXACT_EDGE_LIMIT: usize = 20;

/// Maximum-weight feasible matching by depth-first branch and bound.
///
/// Only positive-weight edges are branched on. Test oracle; exponential.
pub fn exact_match(instance: &MatchingInstance) -> Result<Matching, MatchingError> {
    exact_match_with_limit(instance, DEFAULT_EXACT_EDGE_LIMIT)
}

pub fn exact_match_with_limit(
    instance: &MatchingInstance,
    max_edges: usize,
) -> Result<Matching, MatchingError> {
    let shape = instance.shape();
    let weights = instance.weights();
    let candidates: Vec<(Edge, f64)> = weight_order(weights)
        .into_iter()
        .filter(|&k| weights[k] > 0.0)
        .map(|k| (shape.edge(k), weights[k]))
        .collect();
    if candidates.len() > max_edges {
        return Err(MatchingError::InstanceTooLarge {
            edges: candidates.len(),
            limit: max_edges,
        });
    }
    let mut search = Search {
        shape,
        candidates: &candidates,
        occupancy: Occupancy::new(shape),
        class_left: shape.capacities().to_vec(),
        free_agents: shape.m_agents(),
        free_incentives: shape.m_incentives(),
        current: Vec::new(),
        current_weight: 0.0,
        best: Vec::new(),
        best_weight: 0.0,
    };
    search.descend(0);
    Ok(Matching::new(search.best))
}

struct Search<'a> {
    shape: &'a InstanceShape,
    candidates: &'a [(Edge, f64)],
    occupancy: Occupancy,
    class_left: Vec<usize>,
    free_agents: usize,
    free_incentives: usize,
    current: Vec<Edge>,
    current_weight: f64,
    best: Vec<Edge>,
    best_weight: f64,
}

impl Search<'_> {
    fn descend(&mut self, from: usize) {
        if self.current_weight > self.best_weight {
            self.best_weight = self.current_weight;
            self.best.clone_from(&self.current);
        }
        if from == self.candidates.len() {
            return;
        }
        if self.current_weight + self.bound(from) <= self.best_weight {
            return;
        }
        let (e, w) = self.candidates[from];
        if self.occupancy.admits(self.shape, e) {
            let saved = self.occupancy.clone();
            self.occupancy.insert(self.shape, e);
            self.class_left[self.shape.class_of(e)] -= 1;
            self.free_agents -= 1;
            self.free_incentives -= 1;
            self.current.push(e);
            self.current_weight += w;

            self.descend(from + 1);

            self.current_weight -= w;
            self.current.pop();
            self.free_incentives += 1;
            self.free_agents += 1;
            self.class_left[self.shape.class_of(e)] += 1;
            self.occupancy = saved;
        }
        self.descend(from + 1);
    }

    /// Relaxation that keeps only the per-class capacities and the overall
    /// cardinality limit, over edges whose endpoints are still free. Edges
    /// arrive heaviest-first, so taking them greedily solves the relaxation.
    fn bound(&self, from: usize) -> f64 {
        let mut left = self.class_left.clone();
        let mut slots = self.free_agents.min(self.free_incentives);
        let mut total = 0.0;
        for &(e, w) in &self.candidates[from..] {
            if slots == 0 {
                break;
            }
            if !self.occupancy.admits(self.shape, e) {
                continue;
            }
            let c = self.shape.class_of(e);
            if left[c] > 0 {
                left[c] -= 1;
                slots -= 1;
                total += w;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominance() {
        let inst = MatchingInstance::from_table(&[vec![2.0, 1.0], vec![1.0, 2.0]], 2).unwrap();
        let m = exact_match(&inst).unwrap();
        assert_eq!(m.weight(&inst), 4.0);
    }

    #[test]
    fn all_zero_weights() {
        let inst = MatchingInstance::from_table(&vec![vec![0.0; 3]; 3], 3).unwrap();
        let m = exact_match(&inst).unwrap();
        assert_eq!(m.weight(&inst), 0.0);
        assert!(m.is_feasible(inst.shape()));
    }

    #[test]
    fn guard_rejects_large_instances() {
        let inst = MatchingInstance::from_table(&vec![vec![1.0; 5]; 5], 5).unwrap();
        assert!(matches!(
            exact_match(&inst),
            Err(MatchingError::InstanceTooLarge {
                edges: 25,
                limit: 20
            })
        ));
        assert!(exact_match_with_limit(&inst, 25).is_ok());
    }

    #[test]
    fn respects_class_capacity() {
        // Both heavy edges share a class with capacity 1.
        let shape = InstanceShape::new(2, 2, vec![0, 1, 1, 0], vec![1, 2]).unwrap();
        let inst = MatchingInstance::new(shape, vec![5.0, 1.0, 1.0, 5.0]).unwrap();
        let m = exact_match(&inst).unwrap();
        assert_eq!(m.weight(&inst), 5.0);
        assert!(m.is_feasible(inst.shape()));
    }
}
