//! Finite-state Markov chains: validation, stationary laws, multiplicative
//! reversibilization and the mixing constants used by the confidence index.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-sum tolerance for a stochastic matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Smallest pivot accepted by the stationary solve.
pub const PIVOT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MarkovError {
    #[error("not a stochastic matrix: {0}")]
    NotStochastic(String),
    #[error("chain is reducible")]
    Reducible,
    #[error("chain is periodic")]
    Periodic,
    #[error("reversibilization has second eigenvalue {0}; the chain does not contract")]
    NotContracting(f64),
    #[error("state {state} out of range for {states} states")]
    InvalidState { state: usize, states: usize },
    #[error("stationary mass is zero at state {0}")]
    ZeroStationaryMass(usize),
    #[error("distribution length {got} does not match {expected} states")]
    LengthMismatch { got: usize, expected: usize },
}

/// A row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelFile", into = "KernelFile")]
pub struct TransitionKernel {
    rows: Vec<Vec<f64>>,
    // Row-wise cumulative sums for sampling; last entry forced to 1.
    cdf: Vec<Vec<f64>>,
}

/// Kernel JSON: `{"states": n, "rows": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelFile {
    pub states: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TryFrom<KernelFile> for TransitionKernel {
    type Error = MarkovError;

    fn try_from(file: KernelFile) -> Result<Self, Self::Error> {
        if file.rows.len() != file.states {
            return Err(MarkovError::NotStochastic(format!(
                "declared {} states but {} rows",
                file.states,
                file.rows.len()
            )));
        }
        TransitionKernel::new(file.rows)
    }
}

impl From<TransitionKernel> for KernelFile {
    fn from(k: TransitionKernel) -> Self {
        Self {
            states: k.states(),
            rows: k.rows,
        }
    }
}

impl TransitionKernel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MarkovError> {
        let n = rows.len();
        if n == 0 {
            return Err(MarkovError::NotStochastic("no states".into()));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MarkovError::NotStochastic(format!(
                    "row {r} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(MarkovError::NotStochastic(format!("row {r} has entry {p}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::NotStochastic(format!("row {r} sums to {sum}")));
            }
        }
        let cdf = rows
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                let mut c: Vec<f64> = row
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                // Guard against a uniform draw landing past the last bucket.
                if let Some(pos) = row.iter().rposition(|&p| p > 0.0) {
                    for v in &mut c[pos..] {
                        *v = 1.0;
                    }
                }
                c
            })
            .collect();
        Ok(Self { rows, cdf })
    }

    /// Normalises each row of a non-negative matrix.
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self, MarkovError> {
        let rows = weights
            .into_iter()
            .enumerate()
            .map(|(r, row)| {
                let sum: f64 = row.iter().sum();
                if !(sum > 0.0) || row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                    return Err(MarkovError::NotStochastic(format!(
                        "row {r} cannot be normalised"
                    )));
                }
                Ok(row.into_iter().map(|w| w / sum).collect())
            })
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        Self::new(rows)
    }

    pub fn identity(states: usize) -> Self {
        let rows = (0..states)
            .map(|r| {
                (0..states)
                    .map(|c| if r == c { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(rows).expect("identity is stochastic")
    }

    pub fn states(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    /// Samples a successor without range checks; hot loop helper.
    #[inline]
    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let cdf = &self.cdf[state];
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
    }

    /// `dist * P`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let n = self.states();
        let mut out = vec![0.0; n];
        for (from, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (to, p) in self.rows[from].iter().enumerate() {
                out[to] += mass * p;
            }
        }
        out
    }

    fn successors(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[state]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, _)| j)
    }
}

/// Structural properties of the positive-entry transition digraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStructure {
    pub irreducible: bool,
    pub aperiodic: bool,
}

/// Irreducibility via strong connectivity; aperiodicity via the gcd of
/// `level(u) + 1 - level(v)` over edges reachable from state 0, where `level`
/// is BFS depth. The period is only meaningful for irreducible chains.
pub fn validate(kernel: &TransitionKernel) -> ChainStructure {
    let n = kernel.states();
    let levels = bfs_levels(n, |s| kernel.successors(s).collect());
    let forward_all = levels.iter().all(Option::is_some);
    let backward = bfs_levels(n, |s| (0..n).filter(|&u| kernel.prob(u, s) > 0.0).collect());
    let irreducible = forward_all && backward.iter().all(Option::is_some);

    let mut period = 0usize;
    for u in 0..n {
        let Some(lu) = levels[u] else { continue };
        for v in kernel.successors(u) {
            if let Some(lv) = levels[v] {
                let diff = (lu + 1).abs_diff(lv);
                period = gcd(period, diff);
            }
        }
    }
    ChainStructure {
        irreducible,
        aperiodic: period == 1,
    }
}

fn bfs_levels(n: usize, next: impl Fn(usize) -> Vec<usize>) -> Vec<Option<usize>> {
    let mut level = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    level[0] = Some(0);
    queue.push_back(0);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap();
        for v in next(u) {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A probability vector `pi` with `pi P = pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationaryDistribution {
    probabilities: Vec<f64>,
}

impl StationaryDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn min(&self) -> f64 {
        self.probabilities
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `sum_theta f(theta) pi(theta)`.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(s, p)| p * f(s))
            .sum()
    }
}

/// Solves the balance equations with one row swapped for `sum pi = 1`.
pub fn stationary(kernel: &TransitionKernel) -> Result<StationaryDistribution, MarkovError> {
    if !validate(kernel).irreducible {
        return Err(MarkovError::Reducible);
    }
    let n = kernel.states();
    // (P^T - I) pi = 0, last equation replaced by the normalisation.
    let mut a = vec![vec![0.0; n + 1]; n];
    for (r, row) in a.iter_mut().enumerate().take(n - 1) {
        for (c, entry) in row.iter_mut().enumerate().take(n) {
            *entry = kernel.prob(c, r) - if r == c { 1.0 } else { 0.0 };
        }
    }
    for entry in a[n - 1].iter_mut() {
        *entry = 1.0;
    }
    let mut pi = solve_augmented(a).ok_or(MarkovError::Reducible)?;
    for p in &mut pi {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    Ok(StationaryDistribution { probabilities: pi })
}

/// Gaussian elimination with partial pivoting on an `n x (n+1)` system.
fn solve_augmented(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < PIVOT_TOL {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[r][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..=n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    Some((0..n).map(|r| a[r][n] / a[r][r]).collect())
}

/// Multiplicative reversibilization `M = P P~` with the time reversal
/// `P~(x, y) = pi(y) P(y, x) / pi(x)`.
pub fn reversiblization(kernel: &TransitionKernel) -> Result<TransitionKernel, MarkovError> {
    let pi = stationary(kernel)?;
    reversiblization_with(kernel, &pi)
}

fn reversiblization_with(
    kernel: &TransitionKernel,
    pi: &StationaryDistribution,
) -> Result<TransitionKernel, MarkovError> {
    let n = kernel.states();
    let p = pi.probabilities();
    if let Some(s) = p.iter().position(|&x| x <= 0.0) {
        return Err(MarkovError::ZeroStationaryMass(s));
    }
    let reversal: Vec<Vec<f64>> = (0..n)
        .map(|x| (0..n).map(|y| p[y] * kernel.prob(y, x) / p[x]).collect())
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for x in 0..n {
        for k in 0..n {
            let pxk = kernel.prob(x, k);
            if pxk == 0.0 {
                continue;
            }
            for y in 0..n {
                m[x][y] += pxk * reversal[k][y];
            }
        }
    }
    for row in &mut m {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v = (*v / sum).clamp(0.0, 1.0));
    }
    TransitionKernel::new(m)
}

/// Eigenvalues of a pi-reversible kernel, computed on the symmetric matrix
/// `D^{1/2} M D^{-1/2}`; sorted descending.
pub fn reversible_spectrum(m: &TransitionKernel, pi: &StationaryDistribution) -> Vec<f64> {
    let n = m.states();
    let p = pi.probabilities();
    let sym = DMatrix::from_fn(n, n, |x, y| {
        let a = p[x].sqrt() * m.prob(x, y) / p[y].sqrt();
        let b = p[y].sqrt() * m.prob(y, x) / p[x].sqrt();
        0.5 * (a + b)
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Mixing summary for an ergodic kernel.
///
/// `lambda` is the square root of the second eigenvalue of the
/// reversibilization, so the distance to stationarity decays like
/// `lambda^n`. `c_mix` bounds the bias of an epoch average reward:
/// `|E[mu - r_bar(tau)]| <= c_mix / tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    pub lambda: f64,
    pub c_mix: f64,
    pub pi_min: f64,
}

impl MixingProfile {
    /// Bias bound for an epoch of `tau` iterations.
    pub fn bias_bound(&self, tau: usize) -> f64 {
        self.c_mix / tau as f64
    }
}

pub fn mixing_profile(kernel: &TransitionKernel) -> Result<MixingProfile, MarkovError> {
    let structure = validate(kernel);
    if !structure.irreducible {
        return Err(MarkovError::Reducible);
    }
    if !structure.aperiodic {
        return Err(MarkovError::Periodic);
    }
    let pi = stationary(kernel)?;
    let m = reversiblization_with(kernel, &pi)?;
    let spectrum = reversible_spectrum(&m, &pi);
    let second = spectrum.get(1).copied().unwrap_or(0.0).clamp(0.0, 1.0);
    let lambda = second.sqrt();
    if lambda >= 1.0 - 1e-12 {
        return Err(MarkovError::NotContracting(second));
    }
    let pi_min = pi.min();
    let n = kernel.states() as f64;
    let c_mix = n.sqrt() * (1.0 - pi_min) / (2.0 * pi_min.sqrt()) / (1.0 - lambda);
    Ok(MixingProfile {
        lambda,
        c_mix,
        pi_min,
    })
}

/// One transition from `state`.
pub fn step<R: Rng + ?Sized>(
    kernel: &TransitionKernel,
    state: usize,
    rng: &mut R,
) -> Result<usize, MarkovError> {
    if state >= kernel.states() {
        return Err(MarkovError::InvalidState {
            state,
            states: kernel.states(),
        });
    }
    Ok(kernel.sample_next(state, rng))
}

/// `sum (dist - pi)^2 / pi`.
pub fn chi_squared(dist: &[f64], pi: &StationaryDistribution) -> Result<f64, MarkovError> {
    let p = pi.probabilities();
    if dist.len() != p.len() {
        return Err(MarkovError::LengthMismatch {
            got: dist.len(),
            expected: p.len(),
        });
    }
    let mut total = 0.0;
    for (s, (&d, &q)) in dist.iter().zip(p).enumerate() {
        if q <= 0.0 {
            return Err(MarkovError::ZeroStationaryMass(s));
        }
        total += (d - q) * (d - q) / q;
    }
    Ok(total)
}
