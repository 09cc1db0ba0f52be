use rand::Rng;

use super::ops::{log_sum_exp_exact, log_sum_exp_sampled};
use crate::dataset::{BehaviorEstimate, OfflineDataset};
use crate::error::{Error, Result};
use crate::mdp::{QFunction, TabularPolicy};
use crate::penalty::{adaptation_factor, exclusive_penalty_table, is_weight_row, prioritized_behavior, PriorityScore};

/// How the in-state expectation of the penalty term is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyExpectation {
    /// `E_{a'∼π}[Q(s,a')]` with `π` held fixed.
    Policy,
    /// `T·log Σ exp(Q/T)` over the policy's allowed actions, summed exactly.
    LogSumExp,
    /// The same quantity estimated from this many action draws.
    SampledLogSumExp(usize),
}

/// Everything the sampled loss needs besides the two Q tables.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub dataset: &'a OfflineDataset,
    pub policy: &'a TabularPolicy,
    /// `f_τ(s)` per state; all ones for CQL.
    pub factors: &'a [f64],
    /// IS weight per dataset transition; all ones without prioritization.
    pub weights: &'a [f64],
    pub alpha: f64,
    pub c_min: f64,
    pub expectation: PenaltyExpectation,
    pub temperature: f64,
    /// Row-major mask of actions the policy may use; `None` allows all.
    pub action_mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    /// `∂L/∂Q(s,a)`, row-major.
    pub gradient: Vec<f64>,
    pub mean_w: f64,
}

/// Bootstrapped target `r + γ·E_{a'∼π}[Q̄(s',a')]` of one transition.
fn td_target(inputs: &LossInputs, target: &QFunction, i: usize) -> f64 {
    let t = &inputs.dataset.transitions()[i];
    if t.terminal {
        return t.reward;
    }
    t.reward + inputs.dataset.gamma() * target.state_value(inputs.policy, t.next_state)
}

/// Refined EPQ value loss over a batch of transition indices:
///
/// `½·mean[max(c_min, w)·(y − Q(s,a))²] + α·mean[w·f_τ(s)·(E(s) − Q(s,a))]`
///
/// where `E(s)` is chosen by [`PenaltyExpectation`]. The gradient is exact
/// for the draws made (the sampled estimator consumes `rng`).
pub fn epq_sampled_loss<R: Rng + ?Sized>(
    q: &QFunction,
    target: &QFunction,
    batch: &[usize],
    inputs: &LossInputs,
    rng: &mut R,
) -> Result<LossEval> {
    let ds = inputs.dataset;
    let (ns, na) = (ds.n_states(), ds.n_actions());
    if q.n_states() != ns || q.n_actions() != na || target.values().len() != q.values().len() {
        return Err(crate::error::shape(format!("{ns}x{na}"), format!("{}x{}", q.n_states(), q.n_actions())));
    }
    if inputs.weights.len() != ds.len() || inputs.factors.len() != ns {
        return Err(crate::error::shape(ds.len(), inputs.weights.len()));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let all = vec![true; na];
    let mut loss = 0.0;
    let mut grad = vec![0.0; ns * na];
    let mut w_total = 0.0;
    for &i in batch {
        let t = &ds.transitions()[i];
        let (s, a) = (t.state, t.action);
        let w = inputs.weights[i];
        w_total += w;
        let c = w.max(inputs.c_min);
        let delta = q.get(s, a) - td_target(inputs, target, i);
        loss += 0.5 * c * delta * delta;
        grad[s * na + a] += c * delta;

        let scale = inputs.alpha * w * inputs.factors[s];
        if scale == 0.0 {
            continue;
        }
        let allowed = inputs
            .action_mask
            .map(|m| &m[s * na..(s + 1) * na])
            .filter(|m| m.iter().any(|&b| b))
            .unwrap_or(&all);
        let (expect, dexpect) = match inputs.expectation {
            PenaltyExpectation::Policy => (q.state_value(inputs.policy, s), inputs.policy.row(s).to_vec()),
            PenaltyExpectation::LogSumExp => log_sum_exp_exact(q.row(s), inputs.temperature, allowed),
            PenaltyExpectation::SampledLogSumExp(n) => {
                log_sum_exp_sampled(q.row(s), inputs.temperature, inputs.policy.row(s), allowed, n.max(2), rng)
            }
        };
        loss += scale * (expect - q.get(s, a));
        for (g, d) in grad[s * na..(s + 1) * na].iter_mut().zip(&dexpect) {
            *g += scale * d;
        }
        grad[s * na + a] -= scale;
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossEval { loss: loss / n, gradient: grad, mean_w: w_total / n })
}

/// Full-batch expanded loss
/// `E_{D}[w·{½(Q − y)² + α f_τ (E_π Q − Q)}]` with exact per-pair weights
/// `w = β̂^Q/β̂` and no clipping.
#[allow(clippy::too_many_arguments)]
pub fn expanded_loss(
    q: &QFunction,
    target: &QFunction,
    dataset: &OfflineDataset,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    score: &PriorityScore,
    tau: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let ns = dataset.n_states();
    let mut factors = vec![0.0; ns];
    let mut rows = vec![Vec::new(); ns];
    for s in behavior.visited_states() {
        factors[s] = adaptation_factor(policy, behavior, s, tau)?;
        rows[s] = is_weight_row(behavior, score, s)?;
    }
    let weights: Vec<f64> = dataset.transitions().iter().map(|t| rows[t.state][t.action]).collect();
    let inputs = LossInputs {
        dataset,
        policy,
        factors: &factors,
        weights: &weights,
        alpha,
        c_min: 0.0,
        expectation: PenaltyExpectation::Policy,
        temperature: 1.0,
        action_mask: None,
    };
    let batch: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = crate::mdp::seeded_rng(0);
    let eval = epq_sampled_loss(q, target, &batch, &inputs, &mut rng)?;
    Ok((eval.loss, eval.gradient))
}

/// Full-batch compact loss `½·E_{s∼D, a∼β̂^Q, s'}[(Q − (y − α P_{τ,PD}))²]`,
/// assembled pair by pair from the prioritized rows.
#[allow(clippy::too_many_arguments)]
pub fn compact_loss(
    q: &QFunction,
    target: &QFunction,
    dataset: &OfflineDataset,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    score: &PriorityScore,
    tau: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let penalties = exclusive_penalty_table(policy, behavior, tau, Some(score))?;
    let n = dataset.len() as f64;
    let gamma = dataset.gamma();

    // Group transitions by pair.
    let mut by_pair: Vec<Vec<usize>> = vec![Vec::new(); ns * na];
    for (i, t) in dataset.transitions().iter().enumerate() {
        by_pair[t.state * na + t.action].push(i);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; ns * na];
    for s in behavior.visited_states() {
        let d = behavior.state_count(s) as f64 / n;
        let prioritized = prioritized_behavior(behavior, score, s)?;
        for a in 0..na {
            let members = &by_pair[s * na + a];
            if members.is_empty() {
                continue;
            }
            let mass = d * prioritized[a] / members.len() as f64;
            for &i in members {
                let t = &dataset.transitions()[i];
                let y = if t.terminal {
                    t.reward
                } else {
                    t.reward + gamma * target.state_value(policy, t.next_state)
                };
                let resid = q.get(s, a) - (y - alpha * penalties.get(s, a));
                loss += 0.5 * mass * resid * resid;
                grad[s * na + a] += mass * resid;
            }
        }
    }
    Ok((loss, grad))
}
