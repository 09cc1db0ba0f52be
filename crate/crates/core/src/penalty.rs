//! Penalty mathematics: the exclusive penalty and its adaptation factor,
//! the prioritized behavior distribution with its importance weights
//! (exact and cluster-estimated), weight clipping, and the per-state
//! average penalties that drive underestimation.
//!
//! Everything here is a pure function of a policy row, a behavior estimate
//! and a threshold. Exponentials are always evaluated after subtracting the
//! largest exponent in the ratio they appear in.

use crate::dataset::{BehaviorEstimate, OfflineDataset};
use crate::error::{Error, Result};
use crate::mdp::{QFunction, TabularPolicy};

/// Penalty threshold `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// `τ = c·ρ` with `ρ = log(1/|A|)`.
    RhoMultiple(f64),
    /// Raw log-probability threshold; `+∞` disables adaptation (`f_τ ≡ 1`).
    Absolute(f64),
}

impl Threshold {
    pub fn resolve(&self, n_actions: usize) -> f64 {
        match *self {
            Threshold::RhoMultiple(0.0) => 0.0,
            Threshold::RhoMultiple(c) => c * rho(n_actions),
            Threshold::Absolute(t) => t,
        }
    }

    /// `τ/ρ`, when it is defined.
    pub fn over_rho(&self, n_actions: usize) -> f64 {
        match *self {
            Threshold::RhoMultiple(c) => c,
            Threshold::Absolute(t) => t / rho(n_actions),
        }
    }
}

/// Log-density of the uniform distribution over `n_actions` actions.
pub fn rho(n_actions: usize) -> f64 {
    -(n_actions as f64).ln()
}

/// Hyperparameters of the exclusive penalty and the prioritized dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub threshold: Threshold,
    /// Penalizing constant `α ≥ 0`.
    pub alpha: f64,
    /// IS clipping constant in `(0, 1]`.
    pub c_min: f64,
    /// Cluster radius multiplier `ε > 0`.
    pub epsilon: f64,
    /// Return temperature `ζ > 0`.
    pub zeta: f64,
    /// Penalize against the prioritized distribution instead of `β̂`.
    pub use_pd: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::RhoMultiple(2.0),
            alpha: 20.0,
            c_min: 0.2,
            epsilon: 2.0,
            zeta: 2.0,
            use_pd: true,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.c_min > 0.0 && self.c_min <= 1.0) {
            return Err(Error::Config(format!("c_min must lie in (0, 1], got {}", self.c_min)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::Config(format!("zeta must be > 0, got {}", self.zeta)));
        }
        if self.threshold.resolve(2).is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(())
    }

    pub fn tau(&self, n_actions: usize) -> f64 {
        self.threshold.resolve(n_actions)
    }
}

/// `x_τ = min(1, exp(−(log β̂ − τ)))`.
pub fn adaptive_amount(log_beta: f64, tau: f64) -> f64 {
    if log_beta <= tau {
        1.0
    } else {
        (tau - log_beta).exp()
    }
}

/// `f_τ(s) = E_{a∼π}[x_τ(β̂(a|s))]`, summed exactly over the action set.
pub fn adaptation_factor(policy: &TabularPolicy, behavior: &BehaviorEstimate, state: usize, tau: f64) -> Result<f64> {
    let mut f = 0.0;
    for (a, &p) in policy.row(state).iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        f += p * adaptive_amount(behavior.log_prob(state, a)?, tau);
    }
    Ok(f)
}

/// `π(a|s)/β̂(a|s) − 1`.
pub fn penalty_term(policy: &TabularPolicy, behavior: &BehaviorEstimate, state: usize, action: usize) -> Result<f64> {
    Ok(policy.prob(state, action) / behavior.prob(state, action)? - 1.0)
}

/// `P_τ = f_τ(s)·(π/β̂ − 1)`.
pub fn exclusive_penalty(
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    state: usize,
    action: usize,
    tau: f64,
) -> Result<f64> {
    Ok(adaptation_factor(policy, behavior, state, tau)? * penalty_term(policy, behavior, state, action)?)
}

/// `Δ_CQL(s) = E_{a∼π}[π/β̂ − 1]`.
pub fn average_penalty_cql(policy: &TabularPolicy, behavior: &BehaviorEstimate, state: usize) -> Result<f64> {
    let mut total = 0.0;
    for (a, &p) in policy.row(state).iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        total += p * (p / behavior.prob(state, a)? - 1.0);
    }
    Ok(total)
}

/// `Δ_EPQ(s) = f_τ(s)·Δ_CQL(s)`.
pub fn average_penalty_epq(policy: &TabularPolicy, behavior: &BehaviorEstimate, state: usize, tau: f64) -> Result<f64> {
    Ok(adaptation_factor(policy, behavior, state, tau)? * average_penalty_cql(policy, behavior, state)?)
}

/// `max(c_min, w)`.
pub fn clip_weight(w: f64, c_min: f64) -> f64 {
    w.max(c_min)
}

/// Per-pair log-priority from empirical returns: `log mean_t exp(G_t/ζ)`
/// over the transitions of `(s, a)`, `−∞` where the pair is unseen.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnScores {
    n_actions: usize,
    zeta: f64,
    log_mass: Vec<f64>,
}

impl ReturnScores {
    pub fn from_dataset(dataset: &OfflineDataset, zeta: f64) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::Config(format!("zeta must be > 0, got {zeta}")));
        }
        let returns = dataset
            .returns()
            .ok_or_else(|| Error::Config("returns must be computed before scoring".into()))?;
        let (ns, na) = (dataset.n_states(), dataset.n_actions());
        let mut max = vec![f64::NEG_INFINITY; ns * na];
        for (t, &g) in dataset.transitions().iter().zip(returns) {
            let idx = t.state * na + t.action;
            max[idx] = max[idx].max(g / zeta);
        }
        let mut sum = vec![0.0; ns * na];
        let mut count = vec![0usize; ns * na];
        for (t, &g) in dataset.transitions().iter().zip(returns) {
            let idx = t.state * na + t.action;
            sum[idx] += (g / zeta - max[idx]).exp();
            count[idx] += 1;
        }
        let log_mass = (0..ns * na)
            .map(|i| {
                if count[i] == 0 {
                    f64::NEG_INFINITY
                } else {
                    max[i] + (sum[i] / count[i] as f64).ln()
                }
            })
            .collect();
        Ok(Self { n_actions: na, zeta, log_mass })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn log_mass(&self, s: usize, a: usize) -> f64 {
        self.log_mass[s * self.n_actions + a]
    }
}

/// Where the prioritization scores come from.
#[derive(Debug, Clone, Copy)]
pub enum PriorityScore<'a> {
    /// `exp(Q(s,a)/temperature)`; temperature 1 is the plain `exp(Q)` weighting.
    Q { q: &'a QFunction, temperature: f64 },
    /// Regularized empirical returns `exp(G/ζ)`.
    Returns(&'a ReturnScores),
}

impl PriorityScore<'_> {
    fn log_mass(&self, s: usize, a: usize) -> f64 {
        match self {
            PriorityScore::Q { q, temperature } => q.get(s, a) / temperature,
            PriorityScore::Returns(r) => r.log_mass(s, a),
        }
    }
}

/// Exact behavior row plus the log-priorities of its supported actions.
fn scored_row(behavior: &BehaviorEstimate, score: &PriorityScore, state: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let beta = behavior.row(state)?;
    let logs: Vec<f64> = (0..beta.len()).map(|a| score.log_mass(state, a)).collect();
    let shift = beta
        .iter()
        .zip(&logs)
        .filter(|(b, _)| **b > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Support { state, action: None });
    }
    Ok((beta, logs, shift))
}

/// `β̂^Q(·|s) ∝ β̂(·|s)·exp(score)`, same support as `β̂`.
pub fn prioritized_behavior(behavior: &BehaviorEstimate, score: &PriorityScore, state: usize) -> Result<Vec<f64>> {
    let (beta, logs, shift) = scored_row(behavior, score, state)?;
    let mut row: Vec<f64> = beta
        .iter()
        .zip(&logs)
        .map(|(&b, &l)| if b > 0.0 { b * (l - shift).exp() } else { 0.0 })
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    Ok(row)
}

/// `w(s,·) = exp(score(s,·)) / E_{a'∼β̂}[exp(score(s,a'))]` for every action.
///
/// Unseen actions get the same formula (zero under return scores); only
/// supported entries are ever multiplied into a loss.
pub fn is_weight_row(behavior: &BehaviorEstimate, score: &PriorityScore, state: usize) -> Result<Vec<f64>> {
    let (beta, logs, shift) = scored_row(behavior, score, state)?;
    let norm: f64 = beta
        .iter()
        .zip(&logs)
        .filter(|(b, _)| **b > 0.0)
        .map(|(b, l)| b * (l - shift).exp())
        .sum();
    Ok(logs.iter().map(|l| (l - shift).exp() / norm).collect())
}

/// Exact IS weight `w^Q_{s,a} = β̂^Q(a|s)/β̂(a|s)` at a supported pair.
pub fn is_weight_exact(behavior: &BehaviorEstimate, score: &PriorityScore, state: usize, action: usize) -> Result<f64> {
    if !behavior.supports(state, action) {
        return Err(Error::Support { state, action: Some(action) });
    }
    Ok(is_weight_row(behavior, score, state)?[action])
}

/// How distances between dataset states are measured for clustering.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMetric {
    /// 0 for the same state index, 1 otherwise.
    DiscreteMatch,
    /// Euclidean distance between per-state coordinate vectors.
    Euclidean(Vec<Vec<f64>>),
}

impl StateMetric {
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        match self {
            StateMetric::DiscreteMatch => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            StateMetric::Euclidean(coords) => coords[a]
                .iter()
                .zip(&coords[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// Radius neighborhoods `C_{s,a} = {(s',a') ∈ D : d(s, s') ≤ ε·d̄_closest}`.
///
/// Membership depends only on the state, so neighborhoods are stored per
/// distinct dataset state and expanded to transitions on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    radius: f64,
    d_bar_closest: f64,
    /// Dataset state of each transition.
    transition_state: Vec<usize>,
    /// Transitions recorded at each state.
    by_state: Vec<Vec<usize>>,
    /// For each state present in the data, the present states within the radius.
    neighbors: Vec<Vec<usize>>,
}

impl ClusterIndex {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn d_bar_closest(&self) -> f64 {
        self.d_bar_closest
    }

    /// Transition indices in the cluster of transition `i` (ascending).
    pub fn members(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.neighbors[self.transition_state[i]]
            .iter()
            .flat_map(|&s| self.by_state[s].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.neighbors[self.transition_state[i]]
            .iter()
            .map(|&s| self.by_state[s].len())
            .sum()
    }
}

pub fn build_cluster_index(dataset: &OfflineDataset, epsilon: f64, metric: &StateMetric) -> Result<ClusterIndex> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    if let StateMetric::Euclidean(coords) = metric {
        if coords.len() != dataset.n_states() {
            return Err(Error::Config("state coordinates do not match the dataset".into()));
        }
    }
    let ns = dataset.n_states();
    let mut by_state = vec![Vec::new(); ns];
    for (i, t) in dataset.transitions().iter().enumerate() {
        by_state[t.state].push(i);
    }
    let present: Vec<usize> = (0..ns).filter(|&s| !by_state[s].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::DegenerateGeometry("need at least two distinct dataset states".into()));
    }
    let closest: Vec<f64> = present
        .iter()
        .map(|&s| {
            present
                .iter()
                .filter(|&&o| o != s)
                .map(|&o| metric.distance(s, o))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let d_bar_closest = closest.iter().sum::<f64>() / closest.len() as f64;
    if !(d_bar_closest > 0.0) || !d_bar_closest.is_finite() {
        return Err(Error::DegenerateGeometry("all dataset states coincide".into()));
    }
    let radius = epsilon * d_bar_closest;
    let mut neighbors = vec![Vec::new(); ns];
    for &s in &present {
        neighbors[s] = present.iter().copied().filter(|&o| metric.distance(s, o) <= radius).collect();
    }
    Ok(ClusterIndex {
        radius,
        d_bar_closest,
        transition_state: dataset.transitions().iter().map(|t| t.state).collect(),
        by_state,
        neighbors,
    })
}

/// Per-transition `exp(G_i/ζ) / mean_{j∈C_i} exp(G_j/ζ)`.
pub fn is_weight_clustered(dataset: &OfflineDataset, index: &ClusterIndex, zeta: f64) -> Result<Vec<f64>> {
    if !(zeta > 0.0) {
        return Err(Error::Config(format!("zeta must be > 0, got {zeta}")));
    }
    let returns = dataset
        .returns()
        .ok_or_else(|| Error::Config("returns must be computed before weighting".into()))?;
    if index.transition_state.len() != returns.len() {
        return Err(Error::Config("cluster index was built for another dataset".into()));
    }
    let ns = index.by_state.len();
    // Per state: max scaled return and the shifted exp-sum under it.
    let mut state_max = vec![f64::NEG_INFINITY; ns];
    for (s, members) in index.by_state.iter().enumerate() {
        for &i in members {
            state_max[s] = state_max[s].max(returns[i] / zeta);
        }
    }
    let state_sum: Vec<f64> = index
        .by_state
        .iter()
        .enumerate()
        .map(|(s, members)| members.iter().map(|&i| (returns[i] / zeta - state_max[s]).exp()).sum())
        .collect();
    // Per state: cluster max, then cluster mean of exp(G/ζ − cluster max).
    let mut cluster: Vec<Option<(f64, f64)>> = vec![None; ns];
    for s in 0..ns {
        if index.by_state[s].is_empty() {
            continue;
        }
        let nbrs = &index.neighbors[s];
        let cmax = nbrs.iter().map(|&o| state_max[o]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = nbrs.iter().map(|&o| (state_max[o] - cmax).exp() * state_sum[o]).sum();
        let count: usize = nbrs.iter().map(|&o| index.by_state[o].len()).sum();
        cluster[s] = Some((cmax, total / count as f64));
    }
    Ok(index
        .transition_state
        .iter()
        .zip(returns)
        .map(|(&s, &g)| {
            let (cmax, mean) = cluster[s].expect("every transition state has a cluster");
            (g / zeta - cmax).exp() / mean
        })
        .collect())
}

/// Per-pair penalties and per-state adaptation factors for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTable {
    n_actions: usize,
    values: Vec<f64>,
    factors: Vec<f64>,
}

impl PenaltyTable {
    /// Table from explicit row-major penalties and per-state factors.
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>, factors: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(crate::error::shape(n_states * n_actions, values.len()));
        }
        if factors.len() != n_states {
            return Err(crate::error::shape(n_states, factors.len()));
        }
        Ok(Self { n_actions, values, factors })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `f_τ(s)`; zero at states without data (no penalty is applied there).
    pub fn factor(&self, s: usize) -> f64 {
        self.factors[s]
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }
}

fn ratio_term(pi: f64, beta: Result<f64>) -> Result<f64> {
    match beta {
        Ok(b) => Ok(pi / b - 1.0),
        // Pairs the policy never takes carry no penalty when β̂ is undefined.
        Err(_) if pi == 0.0 => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Table of `α`-free penalties `f_τ(s)·(π/β̂ − 1)` over visited states.
///
/// With `prioritized` set, the penalty term uses `β̂^Q` in the denominator
/// while `f_τ` keeps using `β̂`.
pub fn exclusive_penalty_table(
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    tau: f64,
    prioritized: Option<&PriorityScore>,
) -> Result<PenaltyTable> {
    let (ns, na) = (behavior.n_states(), behavior.n_actions());
    let mut values = vec![0.0; ns * na];
    let mut factors = vec![0.0; ns];
    for s in behavior.visited_states() {
        let f = adaptation_factor(policy, behavior, s, tau)?;
        factors[s] = f;
        let denom: Option<Vec<f64>> = match prioritized {
            Some(score) => Some(prioritized_behavior(behavior, score, s)?),
            None => None,
        };
        for a in 0..na {
            let pi = policy.prob(s, a);
            let beta = match &denom {
                Some(row) if row[a] > 0.0 => Ok(row[a]),
                Some(_) => behavior.floor().ok_or(Error::Support { state: s, action: Some(a) }),
                None => behavior.prob(s, a),
            };
            values[s * na + a] = f * ratio_term(pi, beta)?;
        }
    }
    Ok(PenaltyTable { n_actions: na, values, factors })
}

/// CQL's per-pair penalty `π/β̂ − 1` (adaptation factor fixed at one).
pub fn conservative_penalty_table(policy: &TabularPolicy, behavior: &BehaviorEstimate) -> Result<PenaltyTable> {
    let (ns, na) = (behavior.n_states(), behavior.n_actions());
    let mut values = vec![0.0; ns * na];
    let mut factors = vec![0.0; ns];
    for s in behavior.visited_states() {
        factors[s] = 1.0;
        for a in 0..na {
            values[s * na + a] = ratio_term(policy.prob(s, a), behavior.prob(s, a))?;
        }
    }
    Ok(PenaltyTable { n_actions: na, values, factors })
}
