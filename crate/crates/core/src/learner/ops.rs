use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{seeded_rng, QFunction, TabularPolicy};

/// Boltzmann maximizer of `E_π[Q] + T·H(π)`: `π(·|s) ∝ exp(Q(s,·)/T)`.
pub fn policy_improve(q: &QFunction, temperature: f64) -> Result<TabularPolicy> {
    policy_improve_masked(q, temperature, None)
}

/// Boltzmann policy restricted to the allowed actions of each state.
///
/// `mask` is row-major over `(s, a)`; a state with no allowed action falls
/// back to the unrestricted row.
pub fn policy_improve_masked(q: &QFunction, temperature: f64, mask: Option<&[bool]>) -> Result<TabularPolicy> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("policy temperature must be > 0, got {temperature}")));
    }
    let (ns, na) = (q.n_states(), q.n_actions());
    if let Some(m) = mask {
        if m.len() != ns * na {
            return Err(crate::error::shape(ns * na, m.len()));
        }
    }
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let row_mask = mask.map(|m| &m[s * na..(s + 1) * na]).filter(|m| m.iter().any(|&b| b));
        let allowed = |a: usize| row_mask.is_none_or(|m| m[a]);
        boltzmann_into(q.row(s), temperature, allowed, &mut probs[s * na..(s + 1) * na]);
    }
    TabularPolicy::new(ns, na, probs)
}

fn boltzmann_into(row: &[f64], temperature: f64, allowed: impl Fn(usize) -> bool, out: &mut [f64]) {
    let m = (0..row.len())
        .filter(|&a| allowed(a))
        .map(|a| row[a] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (a, p) in out.iter_mut().enumerate() {
        *p = if allowed(a) { (row[a] / temperature - m).exp() } else { 0.0 };
        total += *p;
    }
    out.iter_mut().for_each(|p| *p /= total);
}

/// `target' = (1 − rate)·target + rate·q`, evaluated as `target + rate·(q − target)`
/// so that a target equal to `q` is left bit-for-bit unchanged.
pub fn ema_update(target: &QFunction, q: &QFunction, rate: f64) -> Result<QFunction> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("ema rate must lie in (0, 1], got {rate}")));
    }
    if target.values().len() != q.values().len() {
        return Err(crate::error::shape(target.values().len(), q.values().len()));
    }
    let mut out = target.clone();
    ema_in_place(&mut out, q, rate);
    Ok(out)
}

pub(crate) fn ema_in_place(target: &mut QFunction, q: &QFunction, rate: f64) {
    if rate == 1.0 {
        target.values_mut().copy_from_slice(q.values());
        return;
    }
    for (t, &v) in target.values_mut().iter_mut().zip(q.values()) {
        *t += rate * (v - *t);
    }
}

/// Exact `T·log Σ_{a∈M} exp(Q(s,a)/T)` and its gradient (the Boltzmann row).
pub(crate) fn log_sum_exp_exact(row: &[f64], temperature: f64, allowed: &[bool]) -> (f64, Vec<f64>) {
    let m = row
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(q, _)| q / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(q, &ok)| if ok { (q / temperature - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = grad.iter().sum();
    grad.iter_mut().for_each(|g| *g /= total);
    (temperature * (m + total.ln()), grad)
}

/// Importance-sampled `T·log Σ_{a∈M} exp(Q/T)` from `n` draws, half from `π`
/// and half uniform over `M`, each weighted by the mixture density
/// `½π(a) + ½/|M|`. The mixture keeps weights bounded by `2|M|·exp(Q/T)` even
/// where `π` is tiny.
///
/// Returns the estimate and its gradient with respect to the row.
pub(crate) fn log_sum_exp_sampled<R: Rng + ?Sized>(
    row: &[f64],
    temperature: f64,
    policy_row: &[f64],
    allowed: &[bool],
    n: usize,
    rng: &mut R,
) -> (f64, Vec<f64>) {
    let candidates: Vec<usize> = (0..row.len()).filter(|&a| allowed[a]).collect();
    let unif = 1.0 / candidates.len() as f64;
    let n_pi = n.div_ceil(2);
    let exponent = |a: usize| row[a] / temperature - (0.5 * policy_row[a] + 0.5 * unif).ln();

    let mut draws = Vec::with_capacity(n);
    for _ in 0..n_pi {
        let a = crate::mdp::sample_index(policy_row, rng);
        draws.push((a, exponent(a)));
    }
    for _ in n_pi..n {
        let a = candidates[rng.random_range(0..candidates.len())];
        draws.push((a, exponent(a)));
    }
    let m = draws.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    let mut grad = vec![0.0; row.len()];
    let mut inner = 0.0;
    for &(a, e) in &draws {
        let term = (e - m).exp() / n as f64;
        grad[a] += term;
        inner += term;
    }
    grad.iter_mut().for_each(|g| *g /= inner);
    (temperature * (m + inner.ln()), grad)
}

/// Sampled estimate of `log Σ_a exp Q(s,a)` over the full action set.
///
/// Unbiased in the exponential domain for any `π(·|s)`, since the uniform
/// half of the draws covers every action.
pub fn log_sum_exp_estimate(
    q: &QFunction,
    state: usize,
    policy: &TabularPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::Config(format!("need at least 2 action samples, got {n_samples}")));
    }
    if policy.n_actions() != q.n_actions() || state >= q.n_states() || state >= policy.n_states() {
        return Err(crate::error::shape(q.n_actions(), policy.n_actions()));
    }
    let mut rng = seeded_rng(seed);
    let allowed = vec![true; q.n_actions()];
    Ok(log_sum_exp_sampled(q.row(state), 1.0, policy.row(state), &allowed, n_samples, &mut rng).0)
}
