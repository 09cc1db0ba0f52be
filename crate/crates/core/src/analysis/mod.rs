//! Checks on what the learners produce: estimation bias against exact and
//! Monte-Carlo oracles, the closed-form penalized fixed point, the α
//! threshold for guaranteed underestimation, certificates, and the
//! action-distribution scenarios on the discretized pendulum.

mod instances;
mod scenario;

use std::io::Write;

use serde::Serialize;

use crate::dataset::{BehaviorEstimate, OfflineDataset};
use crate::error::{Error, Result};
use crate::learner::{train_with_model, LearnerConfig, Mode, RunStatus, TrainedAgent};
use crate::mdp::{exact_q, exact_v, horizon_for, monte_carlo_v, resolvent, Mdp, TabularPolicy};
use crate::penalty::{average_penalty_cql, average_penalty_epq, PenaltyConfig};

pub use instances::{narrow_behavior_instance, narrow_learner_config, NarrowInstance, NARROW_DATA_ACTION};
pub use scenario::{
    run_scenario, write_action_bias_csv, write_scenario_csv, ActionBias, Method, Scenario, ScenarioCase,
    ScenarioResult, ScenarioSpec, ACTION_BIAS_COLUMNS, SCENARIO_COLUMNS,
};

/// Tolerance on a certificate margin before it counts as overestimation.
pub const MARGIN_TOL: f64 = 1e-8;

/// Bias of one dataset state, `E_π[Q̂(s,·)] − V^π(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateBias {
    pub state: usize,
    pub estimate: f64,
    pub truth: f64,
    pub bias: f64,
    /// Monte-Carlo estimate of `V^π(s)` when rollouts were requested.
    pub mc_truth: Option<f64>,
    pub mc_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub states: Vec<StateBias>,
    pub mean_bias: f64,
    /// Mean of the per-state squared biases.
    pub squared_bias: f64,
    pub mode: Mode,
    pub alpha: f64,
    pub tau: f64,
    /// Truncation bound of the Monte-Carlo rollouts (0 without rollouts).
    pub mc_truncation: f64,
}

/// Bias of the agent's values under its own policy on every dataset state.
///
/// The exact oracle is primary; with `n_rollouts > 0` a Monte-Carlo estimate
/// of `V^π` is reported alongside as a cross-check.
pub fn measure_bias(agent: &TrainedAgent, mdp: &Mdp, n_rollouts: usize, seed: u64) -> Result<BiasReport> {
    let truth = exact_v(mdp, &agent.policy)?;
    let estimate = agent.q.state_values(&agent.policy);
    let horizon = horizon_for(mdp, 1e-3);
    let mut states = Vec::new();
    for s in agent.behavior.visited_states() {
        let (mc_truth, mc_stderr) = if n_rollouts > 0 {
            let mc = monte_carlo_v(mdp, &agent.policy, s, n_rollouts, horizon, seed.wrapping_add(s as u64))?;
            (Some(mc.mean), Some(mc.std_err))
        } else {
            (None, None)
        };
        states.push(StateBias { state: s, estimate: estimate[s], truth: truth[s], bias: estimate[s] - truth[s], mc_truth, mc_stderr });
    }
    if states.is_empty() {
        return Err(Error::Config("agent has no dataset states".into()));
    }
    let n = states.len() as f64;
    Ok(BiasReport {
        mean_bias: states.iter().map(|b| b.bias).sum::<f64>() / n,
        squared_bias: states.iter().map(|b| b.bias * b.bias).sum::<f64>() / n,
        states,
        mode: agent.mode,
        alpha: agent.alpha,
        tau: agent.tau,
        mc_truncation: if n_rollouts > 0 { crate::mdp::truncation_bound(mdp, horizon) } else { 0.0 },
    })
}

/// `V_∞ = V^π + (I − γP^π)^{-1}(−αΔ)` with diagnostics on the resolvent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub values: Vec<f64>,
    /// Row sums of the resolvent (each equals `1/(1−γ)` for a stochastic `P^π`).
    pub resolvent_row_sums: Vec<f64>,
    pub resolvent_min: f64,
}

pub fn fixed_point_closed_form(mdp: &Mdp, policy: &TabularPolicy, delta: &[f64], alpha: f64) -> Result<ClosedForm> {
    if delta.len() != mdp.n_states() {
        return Err(crate::error::shape(mdp.n_states(), delta.len()));
    }
    let v = exact_v(mdp, policy)?;
    let inv = resolvent(mdp, policy)?;
    let n = mdp.n_states();
    let values = (0..n)
        .map(|s| v[s] - alpha * (0..n).map(|t| inv[(s, t)] * delta[t]).sum::<f64>())
        .collect();
    let resolvent_row_sums = (0..n).map(|s| inv.row(s).sum()).collect();
    let resolvent_min = inv.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ClosedForm { values, resolvent_row_sums, resolvent_min })
}

/// Per-state average penalty `Δ(s)` of the chosen method at visited states
/// (zero elsewhere, where no penalty is applied).
pub fn average_penalties(
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    method_is_epq: bool,
    tau: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; behavior.n_states()];
    for s in behavior.visited_states() {
        out[s] = if method_is_epq {
            average_penalty_epq(policy, behavior, s, tau)?
        } else {
            average_penalty_cql(policy, behavior, s)?
        };
    }
    Ok(out)
}

/// Smallest `α` guaranteeing underestimation for a given concentration bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaThreshold {
    Finite(f64),
    /// Some state has `Δ = 0` while `ξ > 0`: no `α` suffices.
    Unbounded,
}

impl AlphaThreshold {
    pub fn admits(&self, alpha: f64) -> bool {
        match self {
            AlphaThreshold::Finite(t) => alpha >= *t,
            AlphaThreshold::Unbounded => false,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            AlphaThreshold::Finite(t) => *t,
            AlphaThreshold::Unbounded => f64::INFINITY,
        }
    }
}

/// `α ≥ max_{s,a} ξ(s,a) / min_s Δ(s)` over visited states; `xi` is row-major
/// per pair.
pub fn alpha_threshold(
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    penalty: &PenaltyConfig,
    method_is_epq: bool,
    xi: &[f64],
) -> Result<AlphaThreshold> {
    let (ns, na) = (behavior.n_states(), behavior.n_actions());
    if xi.len() != ns * na {
        return Err(crate::error::shape(ns * na, xi.len()));
    }
    if xi.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("concentration bound must be >= 0".into()));
    }
    let xi_max = xi.iter().copied().fold(0.0f64, f64::max);
    if xi_max == 0.0 {
        return Ok(AlphaThreshold::Finite(0.0));
    }
    let delta = average_penalties(policy, behavior, method_is_epq, penalty.tau(na))?;
    let min_delta = behavior.visited_states().map(|s| delta[s]).fold(f64::INFINITY, f64::min);
    if !(min_delta > 0.0) {
        return Ok(AlphaThreshold::Unbounded);
    }
    Ok(AlphaThreshold::Finite(xi_max / min_delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateMargin {
    pub state: usize,
    pub v_true: f64,
    pub v_hat: f64,
    /// `V^π(s) − V̂(s)`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnderestimationCertificate {
    pub alpha_used: f64,
    pub alpha_threshold: AlphaThreshold,
    pub margins: Vec<StateMargin>,
    /// `None` when the precondition failed and the theorem gives no guarantee.
    pub pass: Option<bool>,
    /// Probability slack; zero for exact backups.
    pub delta: f64,
    pub xi_max: f64,
    pub status: RunStatus,
    pub warning: Option<String>,
}

impl UnderestimationCertificate {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Trains in exact mode against `mdp` and compares `E_π[Q̂]` with `V^π` on
/// every dataset state.
pub fn verify_underestimation(
    dataset: &OfflineDataset,
    mdp: &Mdp,
    config: &LearnerConfig,
    xi: &[f64],
) -> Result<UnderestimationCertificate> {
    if !config.mode.is_exact() {
        return Err(Error::Config("certificates are issued for exact modes only".into()));
    }
    let agent = train_with_model(dataset, mdp, config)?;
    certify_agent(&agent, mdp, &config.penalty, xi)
}

/// Certificate for an already trained exact-mode agent.
pub fn certify_agent(
    agent: &TrainedAgent,
    mdp: &Mdp,
    penalty: &PenaltyConfig,
    xi: &[f64],
) -> Result<UnderestimationCertificate> {
    let threshold = alpha_threshold(&agent.policy, &agent.behavior, penalty, agent.mode.is_epq(), xi)?;
    let v_true = exact_v(mdp, &agent.policy)?;
    let v_hat = agent.q.state_values(&agent.policy);
    let margins: Vec<StateMargin> = agent
        .behavior
        .visited_states()
        .map(|s| StateMargin { state: s, v_true: v_true[s], v_hat: v_hat[s], margin: v_true[s] - v_hat[s] })
        .collect();
    let mut warnings = Vec::new();
    if !threshold.admits(agent.alpha) {
        warnings.push(format!("alpha {} below threshold {}", agent.alpha, threshold.value()));
    }
    if !matches!(agent.status, RunStatus::Converged { .. }) {
        warnings.push(format!("training ended as {}", agent.status.label()));
    }
    let pass = if threshold.admits(agent.alpha) {
        Some(margins.iter().all(|m| m.margin >= -MARGIN_TOL))
    } else {
        None
    };
    Ok(UnderestimationCertificate {
        alpha_used: agent.alpha,
        alpha_threshold: threshold,
        margins,
        pass,
        delta: 0.0,
        xi_max: xi.iter().copied().fold(0.0, f64::max),
        status: agent.status.clone(),
        warning: (!warnings.is_empty()).then(|| warnings.join("; ")),
    })
}

/// Exact `Q^π` on the true model, for per-action comparisons.
pub fn true_q(mdp: &Mdp, policy: &TabularPolicy) -> Result<crate::mdp::QFunction> {
    exact_q(mdp, policy)
}

pub const BIAS_STATE_COLUMNS: [&str; 9] =
    ["mode", "alpha", "tau", "state", "estimate", "truth", "bias", "mc_truth", "mc_stderr"];
pub const BIAS_SUMMARY_COLUMNS: [&str; 7] =
    ["mode", "alpha", "tau", "n_states", "mean_bias", "squared_bias", "mc_truncation"];
pub const CERTIFICATE_COLUMNS: [&str; 9] =
    ["alpha_used", "alpha_threshold", "xi_max", "delta", "min_margin", "n_states", "pass", "status", "warning"];
pub const MARGIN_COLUMNS: [&str; 4] = ["state", "v_true", "v_hat", "margin"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_bias_states_csv<W: Write>(report: &BiasReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BIAS_STATE_COLUMNS)?;
    for b in &report.states {
        out.write_record([
            report.mode.name().to_string(),
            report.alpha.to_string(),
            report.tau.to_string(),
            b.state.to_string(),
            b.estimate.to_string(),
            b.truth.to_string(),
            b.bias.to_string(),
            opt(b.mc_truth),
            opt(b.mc_stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_bias_summary_csv<W: Write>(report: &BiasReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BIAS_SUMMARY_COLUMNS)?;
    out.write_record([
        report.mode.name().to_string(),
        report.alpha.to_string(),
        report.tau.to_string(),
        report.states.len().to_string(),
        report.mean_bias.to_string(),
        report.squared_bias.to_string(),
        report.mc_truncation.to_string(),
    ])?;
    out.flush()?;
    Ok(())
}

pub fn write_certificate_csv<W: Write>(cert: &UnderestimationCertificate, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CERTIFICATE_COLUMNS)?;
    out.write_record([
        cert.alpha_used.to_string(),
        cert.alpha_threshold.value().to_string(),
        cert.xi_max.to_string(),
        cert.delta.to_string(),
        cert.min_margin().to_string(),
        cert.margins.len().to_string(),
        match cert.pass {
            Some(true) => "pass".to_string(),
            Some(false) => "fail".to_string(),
            None => "undefined".to_string(),
        },
        cert.status.label().to_string(),
        cert.warning.clone().unwrap_or_default(),
    ])?;
    out.flush()?;
    Ok(())
}

pub fn write_margins_csv<W: Write>(cert: &UnderestimationCertificate, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in &cert.margins {
        out.serialize(m)?;
    }
    if cert.margins.is_empty() {
        out.write_record(MARGIN_COLUMNS)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
