use serde::{Deserialize, Serialize};

use super::greedy::greedy_order;
use super::instance::{Edge, InstanceShape, MatchingInstance};
use super::MatchingError;

/// The greedy edges `g_1..g_m` (heaviest first) and the marginal
/// infeasibility sets `L_1..L_m`: `L_j` holds the edges that first become
/// infeasible once `g_1..g_j` are chosen.
///
/// Edges that are infeasible on their own (class capacity zero) fall into
/// `L_1`. When the greedy matching is empty there are no sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityDecomposition {
    pub greedy_edges: Vec<Edge>,
    pub marginal_sets: Vec<Vec<Edge>>,
}

impl InfeasibilityDecomposition {
    /// Index `j` (0-based) of the set containing `e`, i.e. `L^{-1}(e) = g_j`.
    pub fn owner_of(&self, e: Edge) -> Option<usize> {
        self.marginal_sets.iter().position(|set| set.contains(&e))
    }

    /// Per-edge owner table indexed by dense edge index; `None` for greedy edges.
    pub fn owner_table(&self, shape: &InstanceShape) -> Vec<Option<usize>> {
        let mut owners = vec![None; shape.n_edges()];
        for (j, set) in self.marginal_sets.iter().enumerate() {
            for &e in set {
                owners[shape.index(e)] = Some(j);
            }
        }
        owners
    }
}

pub fn decompose(instance: &MatchingInstance) -> InfeasibilityDecomposition {
    decompose_weights(instance.shape(), instance.weights())
}

pub(crate) fn decompose_weights(
    shape: &InstanceShape,
    weights: &[f64],
) -> InfeasibilityDecomposition {
    let greedy = greedy_order(shape, weights);
    let m = greedy.len();
    if m == 0 {
        return InfeasibilityDecomposition {
            greedy_edges: greedy,
            marginal_sets: Vec::new(),
        };
    }
    // First greedy position that blocks each agent / incentive / class.
    let mut agent_block = vec![usize::MAX; shape.m_agents()];
    let mut incentive_block = vec![usize::MAX; shape.m_incentives()];
    let mut class_block = vec![usize::MAX; shape.n_classes()];
    let mut class_seen = vec![0usize; shape.n_classes()];
    for (c, &cap) in shape.capacities().iter().enumerate() {
        if cap == 0 {
            class_block[c] = 0;
        }
    }
    for (j, &g) in greedy.iter().enumerate() {
        agent_block[g.agent] = agent_block[g.agent].min(j);
        incentive_block[g.incentive] = incentive_block[g.incentive].min(j);
        let c = shape.class_of(g);
        class_seen[c] += 1;
        if class_seen[c] == shape.capacities()[c] {
            class_block[c] = class_block[c].min(j);
        }
    }
    let mut in_greedy = vec![false; shape.n_edges()];
    for &g in &greedy {
        in_greedy[shape.index(g)] = true;
    }
    let mut marginal_sets = vec![Vec::new(); m];
    for e in shape.edges() {
        if in_greedy[shape.index(e)] {
            continue;
        }
        let j = agent_block[e.agent]
            .min(incentive_block[e.incentive])
            .min(class_block[shape.class_of(e)]);
        debug_assert!(j < m, "greedy left feasible edge {e}");
        marginal_sets[j.min(m - 1)].push(e);
    }
    InfeasibilityDecomposition {
        greedy_edges: greedy,
        marginal_sets,
    }
}

/// Outcome of comparing greedy outputs on two weightings of one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lemma1Report {
    /// Both weightings give the same greedy matching.
    Identical,
    /// `g_j` and a later `g_j'` swap order under the second weighting and
    /// `g_j'` is kept.
    Inversion { earlier: Edge, later: Edge },
    /// Some `(a, i)` in `L_j` outranks `g_j` under the second weighting and
    /// is selected.
    Displacement { greedy_edge: Edge, displacing: Edge },
    /// Outputs differ but neither condition holds.
    NoWitness,
}

impl Lemma1Report {
    pub fn has_witness(&self) -> bool {
        matches!(self, Self::Inversion { .. } | Self::Displacement { .. })
    }
}

/// Searches for a witness explaining why greedy outputs differ between two
/// weightings of the same shape.
pub fn check_lemma1(
    first: &MatchingInstance,
    second: &MatchingInstance,
) -> Result<Lemma1Report, MatchingError> {
    if first.shape() != second.shape() {
        return Err(MatchingError::ShapeMismatch);
    }
    let shape = first.shape();
    let base = decompose(first);
    let other = greedy_order(shape, second.weights());
    let mut base_sorted = base.greedy_edges.clone();
    base_sorted.sort_unstable();
    let mut other_sorted = other.clone();
    other_sorted.sort_unstable();
    if base_sorted == other_sorted {
        return Ok(Lemma1Report::Identical);
    }
    let mut selected = vec![false; shape.n_edges()];
    for &e in &other {
        selected[shape.index(e)] = true;
    }
    let w2 = |e: Edge| second.weight(e);
    let g = &base.greedy_edges;
    for (j, &earlier) in g.iter().enumerate() {
        for &later in &g[j + 1..] {
            if w2(earlier) < w2(later) && selected[shape.index(later)] {
                return Ok(Lemma1Report::Inversion { earlier, later });
            }
        }
    }
    for (j, set) in base.marginal_sets.iter().enumerate() {
        for &e in set {
            if w2(g[j]) < w2(e) && selected[shape.index(e)] {
                return Ok(Lemma1Report::Displacement {
                    greedy_edge: g[j],
                    displacing: e,
                });
            }
        }
    }
    Ok(Lemma1Report::NoWitness)
}
