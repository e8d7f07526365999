//! Benchmarks, reward gaps, regret traces and the theoretical bound
//! evaluators.
//!
//! Regret is measured against the greedy matching `G*` on stationary means,
//! not against the true optimum: a policy that plays `G*` forever has zero
//! expected regret.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::environment::{EnvError, EnvironmentModel};
use crate::matching::{
    decompose, greedy_order, Edge, InfeasibilityDecomposition, InstanceShape, Matching,
    MatchingInstance,
};
use crate::policy::{EpochSchedule, Variant};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegretError {
    #[error("bound needs zeta > 0")]
    ZeroZeta,
    #[error("no edge with a positive gap; the bound is vacuous")]
    NoPositiveGap,
    #[error("{got} values for {expected} edges")]
    Length { got: usize, expected: usize },
}

/// Greedy matching on stationary means and everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    /// Instance weighted by stationary means.
    pub instance: MatchingInstance,
    pub g_star: Matching,
    /// `G*` in selection order, `g_1` first.
    pub g_star_order: Vec<Edge>,
    /// Incentive of each agent in `G*`; `None` means matched to a dummy of mean 0.
    pub i_star: Vec<Option<usize>>,
    pub decomposition: InfeasibilityDecomposition,
    /// Stationary reward of `G*` per epoch.
    pub value: f64,
}

impl Benchmark {
    pub fn from_instance(instance: MatchingInstance) -> Self {
        let order = greedy_order(instance.shape(), instance.weights());
        let mut i_star = vec![None; instance.shape().m_agents()];
        for e in &order {
            i_star[e.agent] = Some(e.incentive);
        }
        let value = order.iter().map(|&e| instance.weight(e)).sum();
        let decomposition = decompose(&instance);
        Self {
            g_star: Matching::new(order.clone()),
            g_star_order: order,
            i_star,
            decomposition,
            value,
            instance,
        }
    }

    pub fn mu(&self) -> &[f64] {
        self.instance.weights()
    }

    pub fn shape(&self) -> &InstanceShape {
        self.instance.shape()
    }

    /// `mu(a, i*(a))`, zero for agents left unmatched.
    pub fn mu_star(&self, agent: usize) -> f64 {
        self.i_star[agent].map_or(0.0, |i| self.instance.weight(Edge::new(agent, i)))
    }
}

/// Stationary means from the environment, then greedy.
pub fn build_benchmark(
    env: &EnvironmentModel,
    shape: &InstanceShape,
) -> Result<Benchmark, EnvError> {
    let mu = env.stationary_means()?;
    Ok(Benchmark::from_instance(shape.with_weights(mu)?))
}

/// Per-edge gaps and membership in the sub-optimal set `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    m_incentives: usize,
    /// `None` for `g_1`.
    pub delta: Vec<Option<f64>>,
    /// `mu(a, i*(a)) >= mu(a, i)`.
    pub in_s: Vec<bool>,
    pub in_g_star: Vec<bool>,
}

impl GapTable {
    fn k(&self, e: Edge) -> usize {
        e.agent * self.m_incentives + e.incentive
    }

    pub fn delta(&self, e: Edge) -> Option<f64> {
        self.delta[self.k(e)]
    }

    pub fn in_s(&self, e: Edge) -> bool {
        self.in_s[self.k(e)]
    }

    pub fn in_g_star(&self, e: Edge) -> bool {
        self.in_g_star[self.k(e)]
    }

    /// Dense indices of `S` minus `G*`: the edges whose plays cost regret.
    pub fn suboptimal(&self) -> Vec<usize> {
        (0..self.delta.len())
            .filter(|&k| self.in_s[k] && !self.in_g_star[k])
            .collect()
    }
}

/// Gap of every edge.
///
/// `G*` edges take the third case, `g_j` against `g_{j-1}`, which leaves
/// `g_1` undefined. Other edges in `S` are measured against their agent's
/// `G*` edge, and the remaining edges against the `G*` edge that made them
/// infeasible.
pub fn gaps(benchmark: &Benchmark) -> GapTable {
    let shape = benchmark.shape();
    let mu = benchmark.mu();
    let n = shape.n_edges();
    let mut delta = vec![None; n];
    let mut in_s = vec![false; n];
    let mut in_g_star = vec![false; n];
    let owners = benchmark.decomposition.owner_table(shape);
    for (j, &g) in benchmark.g_star_order.iter().enumerate() {
        let k = shape.index(g);
        in_g_star[k] = true;
        if j >= 1 {
            delta[k] = Some(mu[shape.index(benchmark.g_star_order[j - 1])] - mu[k]);
        }
    }
    for k in 0..n {
        let e = shape.edge(k);
        let star = benchmark.mu_star(e.agent);
        in_s[k] = star >= mu[k];
        if in_g_star[k] {
            continue;
        }
        delta[k] = if in_s[k] {
            Some(star - mu[k])
        } else {
            owners[k].map(|j| mu[shape.index(benchmark.g_star_order[j])] - mu[k])
        };
    }
    GapTable {
        m_incentives: shape.m_incentives(),
        delta,
        in_s,
        in_g_star,
    }
}

/// One (pseudo-)epoch of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Environment clock when the epoch started.
    pub clock: u64,
    pub length: usize,
    /// Sum over matched edges of their epoch time-averages.
    pub realized: f64,
    pub benchmark: f64,
    /// Share of the epoch's iterations spent on the reference matching.
    pub optimal_fraction: f64,
    pub from_cover: bool,
    /// Played matching; the most frequent one for per-iteration policies.
    pub matching: Matching,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<f64>>,
    /// Iterations spent on each matching, for per-iteration policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<(Matching, usize)>>,
}

impl EpochRecord {
    pub fn regret(&self) -> f64 {
        self.benchmark - self.realized
    }

    /// Share of iterations spent on `m`.
    pub fn fraction_on(&self, m: &Matching) -> f64 {
        match &self.mix {
            Some(mix) => {
                let hits: usize = mix.iter().filter(|(x, _)| x == m).map(|(_, c)| c).sum();
                hits as f64 / self.length.max(1) as f64
            }
            None => (self.matching == *m) as u8 as f64,
        }
    }
}

/// Epoch-by-epoch outcome of one policy run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub variant: Variant,
    pub benchmark_value: f64,
    /// Matching that counts as optimal for this policy.
    pub reference: Matching,
    shape: InstanceShape,
    records: Vec<EpochRecord>,
}

impl RegretTrace {
    pub fn new(
        variant: Variant,
        benchmark_value: f64,
        reference: Matching,
        shape: InstanceShape,
    ) -> Self {
        Self {
            variant,
            benchmark_value,
            reference,
            shape,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn shape(&self) -> &InstanceShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cumulative_regret(&self) -> Vec<f64> {
        regret_of(self, self.benchmark_value).cumulative
    }

    /// Mean optimal fraction over the epochs in `range`.
    pub fn optimal_frequency(&self, range: Range<usize>) -> f64 {
        mean(self.records[range].iter().map(|r| r.optimal_fraction))
    }

    /// Mean share of iterations spent on `m` over the epochs in `range`.
    pub fn frequency_of(&self, m: &Matching, range: Range<usize>) -> f64 {
        mean(self.records[range].iter().map(|r| r.fraction_on(m)))
    }

    /// Writes the per-epoch CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = crate::experiment::csv_writer(out);
        let with_indices = self.records.iter().any(|r| r.indices.is_some());
        let mut header = vec![
            "epoch",
            "clock",
            "length",
            "matching",
            "realized",
            "benchmark",
            "regret",
            "cumulative",
            "optimal_fraction",
            "optimal_flag",
            "from_cover",
        ];
        if with_indices {
            header.push("indices");
        }
        w.write_record(&header)?;
        let mut cumulative = 0.0;
        for r in &self.records {
            cumulative += r.regret();
            let mut row = vec![
                r.epoch.to_string(),
                r.clock.to_string(),
                r.length.to_string(),
                format_matching(&r.matching),
                r.realized.to_string(),
                r.benchmark.to_string(),
                r.regret().to_string(),
                cumulative.to_string(),
                r.optimal_fraction.to_string(),
                ((r.matching == self.reference) as u8).to_string(),
                (r.from_cover as u8).to_string(),
            ];
            if with_indices {
                row.push(r.indices.as_ref().map_or(String::new(), |u| {
                    u.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
                }));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of the per-epoch regret CSV, as read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub clock: u64,
    pub length: usize,
    pub matching: String,
    pub realized: f64,
    pub benchmark: f64,
    pub regret: f64,
    pub cumulative: f64,
    pub optimal_fraction: f64,
    pub optimal_flag: u8,
    pub from_cover: u8,
    #[serde(default)]
    pub indices: Option<String>,
}

impl TraceRow {
    pub fn matching(&self) -> Option<Matching> {
        parse_matching(&self.matching)
    }
}

/// Reads a file written by [`RegretTrace::write_csv`].
pub fn read_trace_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `(0,1);(1,0)` style rendering used in CSV cells.
pub fn format_matching(m: &Matching) -> String {
    m.edges()
        .iter()
        .map(Edge::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Parses [`format_matching`] output.
pub fn parse_matching(s: &str) -> Option<Matching> {
    if s.is_empty() {
        return Some(Matching::empty());
    }
    s.split(';')
        .map(|cell| {
            let inner = cell.trim().strip_prefix('(')?.strip_suffix(')')?;
            let (a, i) = inner.split_once(',')?;
            Some(Edge::new(a.trim().parse().ok()?, i.trim().parse().ok()?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSeries {
    pub per_epoch: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Signed regret of each epoch against `benchmark_value`, and its running sum.
pub fn regret_of(trace: &RegretTrace, benchmark_value: f64) -> RegretSeries {
    let per_epoch: Vec<f64> = trace
        .records
        .iter()
        .map(|r| benchmark_value - r.realized)
        .collect();
    let cumulative = per_epoch
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    RegretSeries {
        per_epoch,
        cumulative,
    }
}

/// Edge constant `rho = (zeta / (zeta + tau0) + 1) C / (2 sqrt(zeta))`.
pub fn rho(c_mix: f64, schedule: &EpochSchedule) -> Result<f64, RegretError> {
    if schedule.zeta == 0 {
        return Err(RegretError::ZeroZeta);
    }
    let zeta = schedule.zeta as f64;
    Ok((zeta / (zeta + schedule.tau0 as f64) + 1.0) * c_mix / (2.0 * zeta.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Bound {
    /// Edge maximising the per-edge play threshold.
    pub argmax: Edge,
    /// Bound on the expected epoch plays of each sub-optimal edge.
    pub value: f64,
}

fn threshold(delta: f64, rho: f64, tau0: f64, log_n: f64, log_m: f64) -> f64 {
    let w = rho / tau0.sqrt() + (6.0 * log_n + 4.0 * log_m).sqrt();
    4.0 / (delta * delta) * w * w
}

/// Bound on `E[T]` for every sub-optimal edge after `n` epochs:
/// `(4 m^2 / D^2)(rho / sqrt(tau0) + sqrt(6 ln n + 4 ln m))^2 + 2 (1 + ln n)`
/// at the edge `(a*, i*)` outside `g_1` with the largest threshold. Edges with
/// zero gap are skipped.
pub fn thm2_bound(
    gaps: &GapTable,
    mixing_constants: &[f64],
    schedule: &EpochSchedule,
    n: u64,
    m: usize,
) -> Result<Thm2Bound, RegretError> {
    check_len(mixing_constants.len(), gaps.delta.len())?;
    let tau0 = schedule.tau0 as f64;
    let log_n = (n.max(1) as f64).ln();
    let log_m = (m.max(1) as f64).ln();
    let mut best: Option<(usize, f64)> = None;
    for (k, d) in gaps.delta.iter().enumerate() {
        let Some(d) = *d else { continue };
        if d <= 0.0 {
            continue;
        }
        let t = threshold(d, rho(mixing_constants[k], schedule)?, tau0, log_n, log_m);
        if best.is_none_or(|(_, b)| t > b) {
            best = Some((k, t));
        }
    }
    let (k, t) = best.ok_or(RegretError::NoPositiveGap)?;
    let m2 = (m * m) as f64;
    Ok(Thm2Bound {
        argmax: Edge::new(k / gaps.m_incentives, k % gaps.m_incentives),
        value: m2 * t + 2.0 * (1.0 + log_n),
    })
}

fn check_len(got: usize, expected: usize) -> Result<(), RegretError> {
    if got == expected {
        Ok(())
    } else {
        Err(RegretError::Length { got, expected })
    }
}

/// Upper bound on `sum_{k < n} 1 / tau_k`.
fn harmonic_bound(schedule: &EpochSchedule, n: u64) -> f64 {
    let tau0 = schedule.tau0 as f64;
    if schedule.zeta == 0 {
        return n as f64 / tau0;
    }
    let zeta = schedule.zeta as f64;
    let n = n.max(1) as f64;
    (1.0 / zeta) * (1.0 + (zeta * (n - 1.0) / tau0 + 1.0).ln())
}

/// Regret decomposition bound after `n` epochs, given expected plays per edge:
/// `sum_{S \ G*} E[T](D + C / tau0) + m C* H(n)`, where `H(n)` bounds the
/// harmonic sum of epoch lengths and `C*` is the largest mixing constant
/// outside `S \ G*`.
pub fn prop1_bound(
    gaps: &GapTable,
    expected_pulls: &[f64],
    mixing_constants: &[f64],
    schedule: &EpochSchedule,
    n: u64,
    m: usize,
) -> Result<f64, RegretError> {
    check_len(expected_pulls.len(), gaps.delta.len())?;
    check_len(mixing_constants.len(), gaps.delta.len())?;
    let tau0 = schedule.tau0 as f64;
    let sub = gaps.suboptimal();
    let first: f64 = sub
        .iter()
        .map(|&k| expected_pulls[k] * (gaps.delta[k].unwrap_or(0.0) + mixing_constants[k] / tau0))
        .sum();
    let c_star = (0..gaps.delta.len())
        .filter(|k| !sub.contains(k))
        .map(|k| mixing_constants[k])
        .fold(0.0, f64::max);
    Ok(first + m as f64 * c_star * harmonic_bound(schedule, n))
}

/// [`prop1_bound`] with every expected play count replaced by
/// [`thm2_bound`].
pub fn corollary1_bound(
    gaps: &GapTable,
    mixing_constants: &[f64],
    schedule: &EpochSchedule,
    n: u64,
    m: usize,
) -> Result<f64, RegretError> {
    let pulls = match thm2_bound(gaps, mixing_constants, schedule, n, m) {
        Ok(b) => vec![b.value; gaps.delta.len()],
        // Nothing sub-optimal to pay for.
        Err(RegretError::NoPositiveGap)
            if gaps
                .suboptimal()
                .iter()
                .all(|&k| gaps.delta[k] == Some(0.0)) =>
        {
            vec![0.0; gaps.delta.len()]
        }
        Err(e) => return Err(e),
    };
    prop1_bound(gaps, &pulls, mixing_constants, schedule, n, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeBound {
    pub edge: Edge,
    pub mu: f64,
    pub c_mix: f64,
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub in_s: bool,
    pub in_g_star: bool,
}

/// Everything the bounds JSON carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n: u64,
    pub m: usize,
    pub schedule: EpochSchedule,
    pub edges: Vec<EdgeBound>,
    pub thm2: Option<Thm2Bound>,
    pub prop1_measured: Option<f64>,
    pub corollary1: Option<f64>,
}

impl BoundsReport {
    /// `measured_pulls`, when given, feeds the decomposition bound.
    pub fn new(
        benchmark: &Benchmark,
        mixing_constants: &[f64],
        schedule: &EpochSchedule,
        n: u64,
        measured_pulls: Option<&[f64]>,
    ) -> Result<Self, RegretError> {
        let table = gaps(benchmark);
        check_len(mixing_constants.len(), table.delta.len())?;
        let shape = benchmark.shape();
        let m = shape.m_agents().max(shape.m_incentives());
        let edges = (0..shape.n_edges())
            .map(|k| EdgeBound {
                edge: shape.edge(k),
                mu: benchmark.mu()[k],
                c_mix: mixing_constants[k],
                rho: rho(mixing_constants[k], schedule).ok(),
                delta: table.delta[k],
                in_s: table.in_s[k],
                in_g_star: table.in_g_star[k],
            })
            .collect();
        Ok(Self {
            n,
            m,
            schedule: *schedule,
            edges,
            thm2: thm2_bound(&table, mixing_constants, schedule, n, m).ok(),
            prop1_measured: measured_pulls
                .map(|p| prop1_bound(&table, p, mixing_constants, schedule, n, m))
                .transpose()?,
            corollary1: corollary1_bound(&table, mixing_constants, schedule, n, m).ok(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::example1;

    fn ex1() -> Benchmark {
        let (env, inst) = example1(0.1).unwrap();
        build_benchmark(&env, inst.shape()).unwrap()
    }

    #[test]
    fn example1_benchmark() {
        let b = ex1();
        assert_eq!(b.g_star.edges(), &[Edge::new(0, 0), Edge::new(1, 1)]);
        assert!((b.value - 2.0 / 1.1).abs() < 1e-12);
        assert_eq!(b.i_star, vec![Some(0), Some(1)]);
    }

    #[test]
    fn example1_gaps() {
        let b = ex1();
        let g = gaps(&b);
        let cross: f64 = 10.0 / 11.0 - 0.5;
        assert!((cross - 9.0 / 22.0).abs() < 1e-15);
        assert!((g.delta(Edge::new(0, 1)).unwrap() - cross).abs() < 1e-12);
        assert!((g.delta(Edge::new(1, 0)).unwrap() - cross).abs() < 1e-12);
        assert_eq!(g.delta(Edge::new(0, 0)), None);
        assert!(g.delta(Edge::new(1, 1)).unwrap().abs() < 1e-12);
        assert!(g.in_s(Edge::new(0, 1)) && g.in_s(Edge::new(0, 0)));
        assert_eq!(g.suboptimal(), vec![1, 2]);
    }

    #[test]
    fn non_s_edges_use_their_blocker() {
        // Agent 0 takes incentive 0 (0.9); agent 1 would prefer incentive 0
        // (0.8) but gets incentive 1 (0.1), so (1,0) is outside S and is
        // blocked by g_1.
        let inst = MatchingInstance::from_table(&[vec![0.9, 0.2], vec![0.8, 0.1]], 2).unwrap();
        let b = Benchmark::from_instance(inst);
        let g = gaps(&b);
        assert!(!g.in_s(Edge::new(1, 0)));
        assert!((g.delta(Edge::new(1, 0)).unwrap() - 0.1).abs() < 1e-12);
        assert!((g.delta(Edge::new(0, 1)).unwrap() - 0.7).abs() < 1e-12);
        assert!((g.delta(Edge::new(1, 1)).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn thm2_classical_shape() {
        let inst = MatchingInstance::from_table(&[vec![0.9, 0.4]], 1).unwrap();
        let b = Benchmark::from_instance(inst);
        let g = gaps(&b);
        let s = EpochSchedule::new(1, 1).unwrap();
        let n = 1000u64;
        let bound = thm2_bound(&g, &[0.0, 0.0], &s, n, 1).unwrap();
        let ln = (n as f64).ln();
        let expect = 4.0 / 0.25 * 6.0 * ln + 2.0 * (1.0 + ln);
        assert!((bound.value - expect).abs() < 1e-9);
        assert_eq!(bound.argmax, Edge::new(0, 1));
        let mut prev = 0.0;
        for n in [2u64, 10, 100, 1000, 10_000] {
            let v = thm2_bound(&g, &[0.5, 0.5], &s, n, 1).unwrap().value;
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn prop1_reduces_to_classical() {
        let inst = MatchingInstance::from_table(&[vec![0.9, 0.4]], 1).unwrap();
        let g = gaps(&Benchmark::from_instance(inst));
        let s = EpochSchedule::new(3, 2).unwrap();
        let v = prop1_bound(&g, &[100.0, 7.0], &[0.0, 0.0], &s, 500, 1).unwrap();
        assert!((v - 7.0 * 0.5).abs() < 1e-12);
        let v = prop1_bound(&g, &[0.0, 0.0], &[0.0, 0.0], &s, 1, 1).unwrap();
        assert_eq!(v, 0.0);
        let v = prop1_bound(&g, &[0.0, 0.0], &[4.0, 0.0], &s, 1, 1).unwrap();
        assert!((v - 4.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn corollary_is_composition() {
        let b = ex1();
        let g = gaps(&b);
        let c = vec![2.0, 1.5, 1.5, 2.0];
        let s = EpochSchedule::new(50, 1).unwrap();
        for n in [100u64, 1000, 10_000] {
            let t = thm2_bound(&g, &c, &s, n, 2).unwrap().value;
            let p = prop1_bound(&g, &[t; 4], &c, &s, n, 2).unwrap();
            assert_eq!(corollary1_bound(&g, &c, &s, n, 2).unwrap(), p);
        }
        let r = corollary1_bound(&g, &c, &s, 1_000_000_000_000, 2).unwrap()
            / corollary1_bound(&g, &c, &s, 1_000_000, 2).unwrap();
        assert!(r > 1.5 && r < 2.1, "ratio {r}");
    }

    #[test]
    fn rho_value() {
        let s = EpochSchedule::new(50, 1).unwrap();
        assert!((rho(2.0, &s).unwrap() - (1.0 / 51.0 + 1.0)).abs() < 1e-12);
        assert_eq!(
            rho(2.0, &EpochSchedule::new(5, 0).unwrap()),
            Err(RegretError::ZeroZeta)
        );
    }

    #[test]
    fn matching_cells_roundtrip() {
        let m = Matching::new(vec![Edge::new(1, 0), Edge::new(0, 3)]);
        assert_eq!(format_matching(&m), "(0,3);(1,0)");
        assert_eq!(parse_matching(&format_matching(&m)), Some(m));
        assert_eq!(parse_matching(""), Some(Matching::empty()));
        assert_eq!(parse_matching("(0,x)"), None);
    }

    #[test]
    fn bounds_report_serialises() {
        let b = ex1();
        let s = EpochSchedule::new(50, 1).unwrap();
        let r = BoundsReport::new(
            &b,
            &[2.0, 1.5, 1.5, 2.0],
            &s,
            1000,
            Some(&[900.0, 50.0, 50.0, 900.0]),
        )
        .unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: BoundsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.thm2.is_some() && r.corollary1.is_some());
    }

    #[test]
    fn trace_csv_round_trips() {
        use crate::policy::{run, EpochSchedule, PolicyConfig};
        use crate::rng::seeded;
        let (mut env, inst) = example1(0.1).unwrap();
        let cfg = PolicyConfig::for_env(Variant::MgEucb, &env).unwrap();
        let sched = EpochSchedule::new(5, 1).unwrap();
        let trace = run(&mut env, inst.shape(), &cfg, &sched, 30, &mut seeded(3)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,clock,length,matching,"));
        // Matching cells contain commas and must be quoted.
        assert!(text.contains("\"(0,"));
        let rows = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), trace.len());
        let cum = trace.cumulative_regret();
        for (row, (rec, c)) in rows.iter().zip(trace.records().iter().zip(cum)) {
            assert_eq!(row.matching().unwrap(), rec.matching);
            assert_eq!(row.realized, rec.realized);
            assert_eq!(row.cumulative, c);
            assert_eq!(row.indices, None);
        }
    }
}
