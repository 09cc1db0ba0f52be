//! Training engines: exact penalized iteration, the sampled value loss with
//! clipped importance weights and the log-sum-exp estimator, Boltzmann
//! policy improvement, EMA targets, and the alternating training loop for
//! both EPQ and CQL.

mod exact;
mod loss;
mod ops;

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::dataset::{compute_returns, empirical_mdp, estimate_behavior, BehaviorEstimate, OfflineDataset};
use crate::error::{Error, Result};
use crate::mdp::{seeded_rng, Mdp, QFunction, TabularPolicy};
use crate::penalty::{
    adaptation_factor, build_cluster_index, conservative_penalty_table, exclusive_penalty_table, is_weight_clustered,
    is_weight_row, PenaltyConfig, PenaltyTable, PriorityScore, ReturnScores, StateMetric,
};

pub use exact::{cql_exact_iterate, epq_exact_iterate, penalized_sweep};
pub use loss::{compact_loss, epq_sampled_loss, expanded_loss, LossEval, LossInputs, PenaltyExpectation};
pub use ops::{ema_update, log_sum_exp_estimate, policy_improve, policy_improve_masked};

/// Which penalty and which update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    EpqExact,
    EpqSampled,
    CqlExact,
    CqlSampled,
}

impl Mode {
    pub fn is_exact(self) -> bool {
        matches!(self, Mode::EpqExact | Mode::CqlExact)
    }

    pub fn is_epq(self) -> bool {
        matches!(self, Mode::EpqExact | Mode::EpqSampled)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::EpqExact => "epq-exact",
            Mode::EpqSampled => "epq-sampled",
            Mode::CqlExact => "cql-exact",
            Mode::CqlSampled => "cql-sampled",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epq-exact" => Ok(Mode::EpqExact),
            "epq-sampled" => Ok(Mode::EpqSampled),
            "cql-exact" => Ok(Mode::CqlExact),
            "cql-sampled" => Ok(Mode::CqlSampled),
            other => Err(Error::Config(format!("unknown learner mode {other:?}"))),
        }
    }
}

/// Whether the policy is improved during training or held fixed
/// (policy evaluation).
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySchedule {
    Improve,
    Fixed(TabularPolicy),
}

/// Which actions the learned policy may put mass on at visited states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicySupport {
    /// Only actions present in the data; `β̂` never needs a floor.
    DataSupport,
    /// Every action; `β̂` is floored at the given value off-support.
    FullWithFloor(f64),
}

/// Source of the per-transition IS weights in sampled EPQ.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    /// Radius clusters over dataset returns.
    Clustered(StateMetric),
    /// Exact per-pair ratios from the empirical returns.
    ExactReturns,
    /// `exp(Q/ζ)` ratios from the live Q table, refreshed every step.
    LiveQ,
    /// No prioritization (`w ≡ 1`).
    Uniform,
}

/// Parameterization of the Q-function in sampled mode.
#[derive(Debug, Clone, PartialEq)]
pub enum QModel {
    /// One free parameter per `(s, a)`.
    Tabular,
    /// `Q(s,a) = θ_s · (1, u_a, u_a²)` over scaled action coordinates `u`;
    /// values at one action generalize to the others.
    ActionQuadratic { action_values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub mode: Mode,
    pub penalty: PenaltyConfig,
    pub q_step_size: f64,
    /// Entropy coefficient `T` of the Boltzmann policy.
    pub policy_temperature: f64,
    pub ema_rate: f64,
    pub batch_size: usize,
    /// `N_a`; zero selects the exact log-sum-exp.
    pub n_action_samples: usize,
    /// Sampled sweeps count gradient steps, exact modes count sweeps.
    pub max_gradient_steps: usize,
    pub convergence_tol: f64,
    pub seed: u64,
    pub policy: PolicySchedule,
    pub q_steps_per_policy_step: usize,
    pub weights: WeightSource,
    pub q_model: QModel,
    pub support: PolicySupport,
    /// Guard multiplier on the penalized reward bound over `1 − γ`.
    pub divergence_factor: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EpqExact,
            penalty: PenaltyConfig::default(),
            q_step_size: 1.0,
            policy_temperature: 0.5,
            ema_rate: 0.005,
            batch_size: 256,
            n_action_samples: 10,
            max_gradient_steps: 20_000,
            convergence_tol: 1e-10,
            seed: 0,
            policy: PolicySchedule::Improve,
            q_steps_per_policy_step: 1,
            weights: WeightSource::Clustered(StateMetric::DiscreteMatch),
            q_model: QModel::Tabular,
            support: PolicySupport::DataSupport,
            divergence_factor: 10.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        let positive = [
            ("q_step_size", self.q_step_size),
            ("policy_temperature", self.policy_temperature),
            ("divergence_factor", self.divergence_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::Config(format!("ema_rate must lie in (0, 1], got {}", self.ema_rate)));
        }
        if self.batch_size == 0 || self.q_steps_per_policy_step == 0 {
            return Err(Error::Config("batch_size and q_steps_per_policy_step must be >= 1".into()));
        }
        if self.n_action_samples == 1 {
            return Err(Error::Config("n_action_samples must be 0 (exact) or >= 2".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be >= 0".into()));
        }
        if let PolicySupport::FullWithFloor(f) = self.support {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("support floor must lie in (0, 1), got {f}")));
            }
        }
        if self.mode.is_exact() && self.q_model != QModel::Tabular {
            return Err(Error::Config("exact modes need the tabular Q model".into()));
        }
        Ok(())
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Converged { step: usize },
    BudgetExhausted,
    Diverged { step: usize, q_norm: f64, bound: f64 },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Converged { .. } => "converged",
            RunStatus::BudgetExhausted => "budget-exhausted",
            RunStatus::Diverged { .. } => "diverged",
        }
    }
}

/// One row of the per-step metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_abs_penalty: f64,
    pub mean_f: f64,
    pub mean_w: f64,
    pub dq_sup: f64,
}

pub const HISTORY_COLUMNS: [&str; 6] = ["step", "loss", "mean_abs_penalty", "mean_f", "mean_w", "dq_sup"];

pub fn write_history_csv<W: Write>(history: &[HistoryRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if history.is_empty() {
        out.write_record(HISTORY_COLUMNS)?;
    }
    for row in history {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub q: QFunction,
    pub target_q: QFunction,
    pub policy: TabularPolicy,
    pub behavior: BehaviorEstimate,
    pub history: Vec<HistoryRecord>,
    pub status: RunStatus,
    pub mode: Mode,
    pub alpha: f64,
    pub tau: f64,
}

impl TrainedAgent {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Algorithm loop on the dataset alone; exact modes iterate on the count-based
/// model of the data.
pub fn train(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<TrainedAgent> {
    if config.mode.is_exact() {
        let model = empirical_mdp(dataset)?;
        run(dataset, Some(&model), config)
    } else {
        run(dataset, None, config)
    }
}

/// Exact-mode training against a supplied model (typically the true MDP,
/// i.e. Bellman backups without sampling error). Sampled modes ignore it.
pub fn train_with_model(dataset: &OfflineDataset, model: &Mdp, config: &LearnerConfig) -> Result<TrainedAgent> {
    if model.n_states() != dataset.n_states() || model.n_actions() != dataset.n_actions() {
        return Err(crate::error::shape(
            format!("{}x{}", dataset.n_states(), dataset.n_actions()),
            format!("{}x{}", model.n_states(), model.n_actions()),
        ));
    }
    run(dataset, if config.mode.is_exact() { Some(model) } else { None }, config)
}

/// Allowed-action mask for the policy, row-major.
fn action_mask(behavior: &BehaviorEstimate, support: PolicySupport) -> Option<Vec<bool>> {
    match support {
        PolicySupport::DataSupport => Some(behavior.support_mask()),
        PolicySupport::FullWithFloor(_) => None,
    }
}

fn check_fixed_policy(policy: &TabularPolicy, behavior: &BehaviorEstimate) -> Result<()> {
    if policy.n_states() != behavior.n_states() || policy.n_actions() != behavior.n_actions() {
        return Err(crate::error::shape(behavior.n_states(), policy.n_states()));
    }
    for s in behavior.visited_states() {
        for a in 0..behavior.n_actions() {
            if policy.prob(s, a) > 0.0 {
                behavior.prob(s, a)?;
            }
        }
    }
    Ok(())
}

struct PolicyState {
    policy: TabularPolicy,
    table: PenaltyTable,
    factors: Vec<f64>,
}

fn penalty_state(
    policy: TabularPolicy,
    behavior: &BehaviorEstimate,
    config: &LearnerConfig,
    tau: f64,
) -> Result<PolicyState> {
    let table = if config.mode.is_epq() {
        exclusive_penalty_table(&policy, behavior, tau, None)?
    } else {
        conservative_penalty_table(&policy, behavior)?
    };
    let factors = table.factors().to_vec();
    Ok(PolicyState { policy, table, factors })
}

fn dataset_means(ds: &OfflineDataset, state: &PolicyState, alpha: f64) -> (f64, f64) {
    let n = ds.len() as f64;
    let (mut p, mut f) = (0.0, 0.0);
    for t in ds.transitions() {
        p += (alpha * state.table.get(t.state, t.action)).abs();
        f += state.factors[t.state];
    }
    (p / n, f / n)
}

/// Static per-transition weights, or `None` when they follow the live Q.
fn static_weights(ds: &OfflineDataset, behavior: &BehaviorEstimate, config: &LearnerConfig) -> Result<Option<Vec<f64>>> {
    let ones = || Some(vec![1.0; ds.len()]);
    if !config.mode.is_epq() || !config.penalty.use_pd {
        return Ok(ones());
    }
    let with_returns;
    let ds = if ds.returns().is_some() {
        ds
    } else {
        with_returns = compute_returns(ds.clone());
        &with_returns
    };
    match &config.weights {
        WeightSource::Uniform => Ok(ones()),
        WeightSource::LiveQ => Ok(None),
        WeightSource::Clustered(metric) => {
            let index = build_cluster_index(ds, config.penalty.epsilon, metric)?;
            Ok(Some(is_weight_clustered(ds, &index, config.penalty.zeta)?))
        }
        WeightSource::ExactReturns => {
            let scores = ReturnScores::from_dataset(ds, config.penalty.zeta)?;
            let score = PriorityScore::Returns(&scores);
            let mut rows = vec![Vec::new(); ds.n_states()];
            for s in behavior.visited_states() {
                rows[s] = is_weight_row(behavior, &score, s)?;
            }
            Ok(Some(ds.transitions().iter().map(|t| rows[t.state][t.action]).collect()))
        }
    }
}

fn live_weights(ds: &OfflineDataset, behavior: &BehaviorEstimate, q: &QFunction, zeta: f64) -> Result<Vec<f64>> {
    let score = PriorityScore::Q { q, temperature: zeta };
    let mut rows = vec![Vec::new(); ds.n_states()];
    for s in behavior.visited_states() {
        rows[s] = is_weight_row(behavior, &score, s)?;
    }
    Ok(ds.transitions().iter().map(|t| rows[t.state][t.action]).collect())
}

/// Reward bound of the penalized problem: `r_max + α·κ`, where `κ` bounds
/// the per-pair shift the penalty can induce at a fixed point.
fn guard_bound(
    ds: &OfflineDataset,
    behavior: &BehaviorEstimate,
    state: &PolicyState,
    weights: &[f64],
    config: &LearnerConfig,
) -> f64 {
    let gamma = ds.gamma();
    let alpha = config.penalty.alpha;
    let kappa = if alpha == 0.0 {
        0.0
    } else if config.mode.is_exact() {
        state.table.values().iter().fold(0.0f64, |m, p| m.max(p.abs()))
    } else {
        ds.transitions()
            .iter()
            .zip(weights)
            .map(|(t, &w)| {
                let beta = behavior.count(t.state, t.action) as f64 / behavior.state_count(t.state) as f64;
                state.factors[t.state] * (1.0 / beta + w) * w.max(1.0) / w.max(config.penalty.c_min)
            })
            .fold(0.0f64, f64::max)
    };
    config.divergence_factor * (ds.reward_bound() + alpha * kappa) / (1.0 - gamma)
}

fn check_divergence(q: &QFunction, bound: f64, step: usize) -> Option<RunStatus> {
    let norm = q.values().iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    (norm > bound).then_some(RunStatus::Diverged { step, q_norm: norm, bound })
}

fn run(dataset: &OfflineDataset, model: Option<&Mdp>, config: &LearnerConfig) -> Result<TrainedAgent> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let mut behavior = estimate_behavior(dataset, ns, na)?;
    if let PolicySupport::FullWithFloor(floor) = config.support {
        behavior = behavior.with_floor(floor)?;
    }
    let mask = action_mask(&behavior, config.support);
    let tau = config.penalty.tau(na);
    let q = QFunction::zeros(ns, na);

    let initial = match &config.policy {
        PolicySchedule::Fixed(pi) => {
            check_fixed_policy(pi, &behavior)?;
            pi.clone()
        }
        PolicySchedule::Improve => policy_improve_masked(&q, config.policy_temperature, mask.as_deref())?,
    };
    let state = penalty_state(initial, &behavior, config, tau)?;
    match model {
        Some(m) => run_exact(dataset, m, config, behavior, mask, state, tau, q),
        None => run_sampled(dataset, config, behavior, mask, state, tau, q),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_exact(
    ds: &OfflineDataset,
    model: &Mdp,
    config: &LearnerConfig,
    behavior: BehaviorEstimate,
    mask: Option<Vec<bool>>,
    mut state: PolicyState,
    tau: f64,
    mut q: QFunction,
) -> Result<TrainedAgent> {
    let alpha = config.penalty.alpha;
    let improve = matches!(config.policy, PolicySchedule::Improve);
    let mut history = Vec::new();
    let mut status = RunStatus::BudgetExhausted;
    let n = ds.len() as f64;
    for step in 0..config.max_gradient_steps {
        if improve {
            let pi = policy_improve_masked(&q, config.policy_temperature, mask.as_deref())?;
            state = penalty_state(pi, &behavior, config, tau)?;
        }
        let next = penalized_sweep(&q, model, &state.policy, &behavior, alpha, &state.table)?;
        let dq = next.sup_distance(&q);
        let loss = ds
            .transitions()
            .iter()
            .map(|t| (next.get(t.state, t.action) - q.get(t.state, t.action)).powi(2))
            .sum::<f64>()
            / (2.0 * n);
        let (mean_abs_penalty, mean_f) = dataset_means(ds, &state, alpha);
        history.push(HistoryRecord { step, loss, mean_abs_penalty, mean_f, mean_w: 1.0, dq_sup: dq });
        q = next;
        let bound = guard_bound(ds, &behavior, &state, &[], config);
        if let Some(diverged) = check_divergence(&q, bound, step) {
            status = diverged;
            break;
        }
        if dq < config.convergence_tol {
            status = RunStatus::Converged { step };
            break;
        }
    }
    if improve {
        state.policy = policy_improve_masked(&q, config.policy_temperature, mask.as_deref())?;
    }
    Ok(TrainedAgent {
        target_q: q.clone(),
        q,
        policy: state.policy,
        behavior,
        history,
        status,
        mode: config.mode,
        alpha,
        tau,
    })
}

/// Parameter storage behind the Q table in sampled mode.
enum Params {
    Tabular,
    Quadratic { theta: Vec<f64>, features: Vec<[f64; 3]> },
}

impl Params {
    fn new(model: &QModel, ns: usize, na: usize) -> Result<Self> {
        match model {
            QModel::Tabular => Ok(Params::Tabular),
            QModel::ActionQuadratic { action_values } => {
                if action_values.len() != na {
                    return Err(crate::error::shape(na, action_values.len()));
                }
                let scale = action_values.iter().fold(0.0f64, |m, u| m.max(u.abs()));
                let scale = if scale > 0.0 { scale } else { 1.0 };
                let features = action_values
                    .iter()
                    .map(|u| {
                        let x = u / scale;
                        [1.0, x, x * x]
                    })
                    .collect();
                Ok(Params::Quadratic { theta: vec![0.0; ns * 3], features })
            }
        }
    }

    /// `θ ← θ − η·∇_θ L` and refresh the table.
    fn step(&mut self, q: &mut QFunction, grad: &[f64], eta: f64) {
        match self {
            Params::Tabular => {
                for (v, g) in q.values_mut().iter_mut().zip(grad) {
                    *v -= eta * g;
                }
            }
            Params::Quadratic { theta, features } => {
                let na = features.len();
                for s in 0..q.n_states() {
                    let mut g = [0.0; 3];
                    for (a, phi) in features.iter().enumerate() {
                        let ga = grad[s * na + a];
                        if ga != 0.0 {
                            for k in 0..3 {
                                g[k] += ga * phi[k];
                            }
                        }
                    }
                    if g == [0.0; 3] {
                        continue;
                    }
                    for k in 0..3 {
                        theta[s * 3 + k] -= eta * g[k];
                    }
                    for (a, phi) in features.iter().enumerate() {
                        let v = (0..3).map(|k| theta[s * 3 + k] * phi[k]).sum();
                        q.set(s, a, v);
                    }
                }
            }
        }
    }
}

fn run_sampled(
    ds: &OfflineDataset,
    config: &LearnerConfig,
    behavior: BehaviorEstimate,
    mask: Option<Vec<bool>>,
    mut state: PolicyState,
    tau: f64,
    mut q: QFunction,
) -> Result<TrainedAgent> {
    let (ns, na) = (ds.n_states(), ds.n_actions());
    let alpha = config.penalty.alpha;
    let improve = matches!(config.policy, PolicySchedule::Improve);
    let mut rng = seeded_rng(config.seed);
    let mut params = Params::new(&config.q_model, ns, na)?;
    let mut target = q.clone();
    let fixed_weights = static_weights(ds, &behavior, config)?;
    let expectation = match (&config.policy, config.n_action_samples) {
        (PolicySchedule::Fixed(_), _) => PenaltyExpectation::Policy,
        (PolicySchedule::Improve, 0) => PenaltyExpectation::LogSumExp,
        (PolicySchedule::Improve, n) => PenaltyExpectation::SampledLogSumExp(n),
    };
    let c_min = if config.mode.is_epq() { config.penalty.c_min } else { 1.0 };
    let mut history = Vec::with_capacity(config.max_gradient_steps);
    let mut status = RunStatus::BudgetExhausted;
    let mut batch = vec![0usize; config.batch_size];
    let mut means = dataset_means(ds, &state, alpha);
    let mut weights = match &fixed_weights {
        Some(w) => w.clone(),
        None => live_weights(ds, &behavior, &q, config.penalty.zeta)?,
    };
    let mut bound = guard_bound(ds, &behavior, &state, &weights, config);

    for step in 0..config.max_gradient_steps {
        if improve && step % config.q_steps_per_policy_step == 0 {
            let pi = policy_improve_masked(&q, config.policy_temperature, mask.as_deref())?;
            state = penalty_state(pi, &behavior, config, tau)?;
            means = dataset_means(ds, &state, alpha);
        }
        if fixed_weights.is_none() {
            weights = live_weights(ds, &behavior, &q, config.penalty.zeta)?;
        }
        if improve || fixed_weights.is_none() {
            bound = guard_bound(ds, &behavior, &state, &weights, config);
        }
        for slot in batch.iter_mut() {
            *slot = rng.random_range(0..ds.len());
        }
        let inputs = LossInputs {
            dataset: ds,
            policy: &state.policy,
            factors: &state.factors,
            weights: &weights,
            alpha,
            c_min,
            expectation,
            temperature: config.policy_temperature,
            action_mask: mask.as_deref(),
        };
        let eval = epq_sampled_loss(&q, &target, &batch, &inputs, &mut rng)?;
        let before = q.clone();
        params.step(&mut q, &eval.gradient, config.q_step_size);
        ops::ema_in_place(&mut target, &q, config.ema_rate);
        history.push(HistoryRecord {
            step,
            loss: eval.loss,
            mean_abs_penalty: means.0,
            mean_f: means.1,
            mean_w: eval.mean_w,
            dq_sup: q.sup_distance(&before),
        });
        if let Some(diverged) = check_divergence(&q, bound, step) {
            status = diverged;
            break;
        }
    }
    if improve {
        state.policy = policy_improve_masked(&q, config.policy_temperature, mask.as_deref())?;
    }
    Ok(TrainedAgent {
        q,
        target_q: target,
        policy: state.policy,
        behavior,
        history,
        status,
        mode: config.mode,
        alpha,
        tau,
    })
}

/// Mean `f_τ` over dataset transitions for a fixed policy.
pub fn mean_adaptation_factor(
    dataset: &OfflineDataset,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    tau: f64,
) -> Result<f64> {
    let mut f = vec![None; dataset.n_states()];
    let mut total = 0.0;
    for t in dataset.transitions() {
        let v = match f[t.state] {
            Some(v) => v,
            None => {
                let v = adaptation_factor(policy, behavior, t.state, tau)?;
                f[t.state] = Some(v);
                v
            }
        };
        total += v;
    }
    Ok(total / dataset.len() as f64)
}
