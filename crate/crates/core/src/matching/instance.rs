use serde::{Deserialize, Serialize};

use super::MatchingError;

/// An agent-incentive pairing `(a, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Edge {
    pub agent: usize,
    pub incentive: usize,
}

impl Edge {
    pub const fn new(agent: usize, incentive: usize) -> Self {
        Self { agent, incentive }
    }
}

impl From<[usize; 2]> for Edge {
    fn from([agent, incentive]: [usize; 2]) -> Self {
        Self { agent, incentive }
    }
}

impl From<Edge> for [usize; 2] {
    fn from(e: Edge) -> Self {
        [e.agent, e.incentive]
    }
}

impl std::fmt::Display for Edge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.agent, self.incentive)
    }
}

/// The weight-free part of a capacitated matching instance: the edge set
/// `A x I`, its partition into classes, and one capacity per class.
///
/// Edges are addressed by a dense row-major index `agent * m_incentives +
/// incentive`, which is also the lexicographic `(agent, incentive)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceShape {
    m_agents: usize,
    m_incentives: usize,
    class_of: Vec<usize>,
    capacities: Vec<usize>,
}

impl InstanceShape {
    pub fn new(
        m_agents: usize,
        m_incentives: usize,
        class_of: Vec<usize>,
        capacities: Vec<usize>,
    ) -> Result<Self, MatchingError> {
        let n_edges = m_agents * m_incentives;
        if class_of.len() != n_edges {
            return Err(MatchingError::Dimension(format!(
                "class map covers {} edges, expected {n_edges}",
                class_of.len()
            )));
        }
        if let Some(&bad) = class_of.iter().find(|&&c| c >= capacities.len()) {
            return Err(MatchingError::Dimension(format!(
                "class index {bad} out of range for {} classes",
                capacities.len()
            )));
        }
        Ok(Self {
            m_agents,
            m_incentives,
            class_of,
            capacities,
        })
    }

    /// Every edge in one class with capacity `capacity`.
    pub fn single_class(m_agents: usize, m_incentives: usize, capacity: usize) -> Self {
        Self {
            m_agents,
            m_incentives,
            class_of: vec![0; m_agents * m_incentives],
            capacities: vec![capacity],
        }
    }

    pub fn m_agents(&self) -> usize {
        self.m_agents
    }

    pub fn m_incentives(&self) -> usize {
        self.m_incentives
    }

    pub fn n_edges(&self) -> usize {
        self.m_agents * self.m_incentives
    }

    pub fn n_classes(&self) -> usize {
        self.capacities.len()
    }

    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    pub fn class_map(&self) -> &[usize] {
        &self.class_of
    }

    #[inline]
    pub fn index(&self, e: Edge) -> usize {
        e.agent * self.m_incentives + e.incentive
    }

    #[inline]
    pub fn edge(&self, index: usize) -> Edge {
        Edge::new(index / self.m_incentives, index % self.m_incentives)
    }

    #[inline]
    pub fn class_of(&self, e: Edge) -> usize {
        self.class_of[self.index(e)]
    }

    pub fn contains(&self, e: Edge) -> bool {
        e.agent < self.m_agents && e.incentive < self.m_incentives
    }

    /// All edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.n_edges()).map(|k| self.edge(k))
    }

    /// Members of each class, lexicographically ordered.
    pub fn class_members(&self) -> Vec<Vec<Edge>> {
        let mut members = vec![Vec::new(); self.n_classes()];
        for (k, &c) in self.class_of.iter().enumerate() {
            members[c].push(self.edge(k));
        }
        members
    }

    /// True when no class capacity can ever bind: each class admits at least
    /// as many edges as any matching could place in it.
    pub fn capacities_non_binding(&self) -> bool {
        let max_size = self.m_agents.min(self.m_incentives);
        let mut sizes = vec![0usize; self.n_classes()];
        for &c in &self.class_of {
            sizes[c] += 1;
        }
        sizes
            .iter()
            .zip(&self.capacities)
            .all(|(&size, &cap)| cap >= size.min(max_size))
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<MatchingInstance, MatchingError> {
        MatchingInstance::new(self.clone(), weights)
    }
}

/// A capacitated matching problem: shape plus non-negative edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingInstance {
    shape: InstanceShape,
    weights: Vec<f64>,
}

impl MatchingInstance {
    pub fn new(shape: InstanceShape, weights: Vec<f64>) -> Result<Self, MatchingError> {
        check_weights(&shape, &weights)?;
        Ok(Self { shape, weights })
    }

    /// Build from a dense `m_agents x m_incentives` weight table with a single
    /// class of capacity `capacity`.
    pub fn from_table(table: &[Vec<f64>], capacity: usize) -> Result<Self, MatchingError> {
        let m_agents = table.len();
        let m_incentives = table.first().map_or(0, Vec::len);
        if table.iter().any(|row| row.len() != m_incentives) {
            return Err(MatchingError::Dimension("ragged weight table".into()));
        }
        let shape = InstanceShape::single_class(m_agents, m_incentives, capacity);
        Self::new(shape, table.concat())
    }

    pub fn shape(&self) -> &InstanceShape {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, e: Edge) -> f64 {
        self.weights[self.shape.index(e)]
    }

    /// Same shape, different weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self, MatchingError> {
        Self::new(self.shape.clone(), weights)
    }
}

pub(crate) fn check_weights(shape: &InstanceShape, weights: &[f64]) -> Result<(), MatchingError> {
    if weights.len() != shape.n_edges() {
        return Err(MatchingError::Dimension(format!(
            "{} weights for {} edges",
            weights.len(),
            shape.n_edges()
        )));
    }
    if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(MatchingError::InvalidWeight {
            edge: shape.edge(k),
            weight: weights[k],
        });
    }
    Ok(())
}

/// A set of edges, kept sorted lexicographically.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Matching {
    edges: Vec<Edge>,
}

impl Matching {
    pub fn new(mut edges: Vec<Edge>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        Self { edges }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, e: Edge) -> bool {
        self.edges.binary_search(&e).is_ok()
    }

    pub fn weight(&self, instance: &MatchingInstance) -> f64 {
        self.edges.iter().map(|&e| instance.weight(e)).sum()
    }

    /// Checks the three constraint families: one edge per agent, one edge per
    /// incentive, and at most `b` edges per class.
    pub fn check_feasible(&self, shape: &InstanceShape) -> Result<(), MatchingError> {
        let mut agent_used = vec![false; shape.m_agents()];
        let mut incentive_used = vec![false; shape.m_incentives()];
        let mut class_count = vec![0usize; shape.n_classes()];
        for &e in &self.edges {
            if !shape.contains(e) {
                return Err(MatchingError::Infeasible(format!(
                    "edge {e} outside instance"
                )));
            }
            if std::mem::replace(&mut agent_used[e.agent], true) {
                return Err(MatchingError::Infeasible(format!(
                    "agent {} matched twice",
                    e.agent
                )));
            }
            if std::mem::replace(&mut incentive_used[e.incentive], true) {
                return Err(MatchingError::Infeasible(format!(
                    "incentive {} matched twice",
                    e.incentive
                )));
            }
            let c = shape.class_of(e);
            class_count[c] += 1;
            if class_count[c] > shape.capacities()[c] {
                return Err(MatchingError::Infeasible(format!(
                    "class {c} over capacity"
                )));
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self, shape: &InstanceShape) -> bool {
        self.check_feasible(shape).is_ok()
    }

    /// Edge incident to `agent`, if any.
    pub fn incentive_of(&self, agent: usize) -> Option<usize> {
        self.edges
            .iter()
            .find(|e| e.agent == agent)
            .map(|e| e.incentive)
    }
}

impl FromIterator<Edge> for Matching {
    fn from_iter<T: IntoIterator<Item = Edge>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Incremental feasibility bookkeeping shared by the greedy routines.
#[derive(Debug, Clone)]
pub(crate) struct Occupancy {
    agent_used: Vec<bool>,
    incentive_used: Vec<bool>,
    class_count: Vec<usize>,
}

impl Occupancy {
    pub(crate) fn new(shape: &InstanceShape) -> Self {
        Self {
            agent_used: vec![false; shape.m_agents()],
            incentive_used: vec![false; shape.m_incentives()],
            class_count: vec![0; shape.n_classes()],
        }
    }

    #[inline]
    pub(crate) fn admits(&self, shape: &InstanceShape, e: Edge) -> bool {
        !self.agent_used[e.agent]
            && !self.incentive_used[e.incentive]
            && self.class_count[shape.class_of(e)] < shape.capacities()[shape.class_of(e)]
    }

    #[inline]
    pub(crate) fn insert(&mut self, shape: &InstanceShape, e: Edge) {
        self.agent_used[e.agent] = true;
        self.incentive_used[e.incentive] = true;
        self.class_count[shape.class_of(e)] += 1;
    }
}

/// On-disk instance format.
///
/// ```json
/// {"agents": 2, "incentives": 2,
///  "classes": [[[0,0],[0,1],[1,0],[1,1]]],
///  "capacities": [2],
///  "weights": [[2.0, 1.0], [1.0, 2.0]]}
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub agents: usize,
    pub incentives: usize,
    pub classes: Vec<Vec<Edge>>,
    pub capacities: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl TryFrom<InstanceFile> for MatchingInstance {
    type Error = MatchingError;

    fn try_from(file: InstanceFile) -> Result<Self, Self::Error> {
        let n_edges = file.agents * file.incentives;
        if file.classes.len() != file.capacities.len() {
            return Err(MatchingError::Dimension(format!(
                "{} classes but {} capacities",
                file.classes.len(),
                file.capacities.len()
            )));
        }
        let mut class_of = vec![usize::MAX; n_edges];
        for (c, members) in file.classes.iter().enumerate() {
            for &e in members {
                if e.agent >= file.agents || e.incentive >= file.incentives {
                    return Err(MatchingError::Dimension(format!(
                        "class {c} lists edge {e} outside instance"
                    )));
                }
                let slot = &mut class_of[e.agent * file.incentives + e.incentive];
                if *slot != usize::MAX {
                    return Err(MatchingError::Dimension(format!(
                        "edge {e} appears in two classes"
                    )));
                }
                *slot = c;
            }
        }
        if let Some(k) = class_of.iter().position(|&c| c == usize::MAX) {
            let e = Edge::new(k / file.incentives.max(1), k % file.incentives.max(1));
            return Err(MatchingError::Dimension(format!(
                "edge {e} belongs to no class"
            )));
        }
        if file.weights.len() != file.agents
            || file.weights.iter().any(|r| r.len() != file.incentives)
        {
            return Err(MatchingError::Dimension(format!(
                "weights must be a {}x{} table",
                file.agents, file.incentives
            )));
        }
        let shape = InstanceShape::new(file.agents, file.incentives, class_of, file.capacities)?;
        MatchingInstance::new(shape, file.weights.concat())
    }
}

impl From<&MatchingInstance> for InstanceFile {
    fn from(inst: &MatchingInstance) -> Self {
        let shape = inst.shape();
        Self {
            agents: shape.m_agents(),
            incentives: shape.m_incentives(),
            classes: shape.class_members(),
            capacities: shape.capacities().to_vec(),
            weights: inst
                .weights()
                .chunks(shape.m_incentives().max(1))
                .take(shape.m_agents())
                .map(<[f64]>::to_vec)
                .collect(),
        }
    }
}

/// Output record: sorted pairs plus total weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub edges: Vec<Edge>,
    pub weight: f64,
}

impl MatchingReport {
    pub fn new(matching: &Matching, instance: &MatchingInstance) -> Self {
        Self {
            edges: matching.edges().to_vec(),
            weight: matching.weight(instance),
        }
    }
}
