use super::instance::{Edge, Matching, MatchingInstance};
use super::MatchingError;

/// Maximum-weight bipartite matching via the Hungarian method.
///
/// Class constraints are ignored by the algorithm, so the instance must have
/// non-binding capacities; otherwise a `BindingCapacities` error is returned.
pub fn hungarian_match(instance: &MatchingInstance) -> Result<Matching, MatchingError> {
    let shape = instance.shape();
    if !shape.capacities_non_binding() {
        return Err(MatchingError::BindingCapacities);
    }
    let rows = shape.m_agents();
    let cols = shape.m_incentives();
    if rows == 0 || cols == 0 {
        return Ok(Matching::empty());
    }
    let n = rows.max(cols);
    // Square cost matrix; padding rows/columns cost the same as a zero weight.
    let w_max = instance.weights().iter().copied().fold(0.0, f64::max);
    let mut cost = vec![vec![w_max; n]; n];
    for a in 0..rows {
        for i in 0..cols {
            cost[a][i] = w_max - instance.weight(Edge::new(a, i));
        }
    }
    let assignment = min_cost_assignment(&cost);
    Ok(assignment
        .into_iter()
        .enumerate()
        .filter(|&(a, i)| a < rows && i < cols)
        .map(|(a, i)| Edge::new(a, i))
        .collect())
}

/// Shortest augmenting path Kuhn-Munkres on a square cost matrix.
/// Returns `assignment[row] = column`. O(n^3).
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based with column 0 as the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}
