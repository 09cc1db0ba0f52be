use crate::dataset::BehaviorEstimate;
use crate::error::Result;
use crate::mdp::{Mdp, QFunction, TabularPolicy};
use crate::penalty::{conservative_penalty_table, exclusive_penalty_table, PenaltyConfig, PenaltyTable};

/// Whether the sweep writes pair `(s, a)`: the state must carry data and the
/// action must be supported (or floored).
fn updated(behavior: &BehaviorEstimate, s: usize, a: usize) -> bool {
    behavior.is_visited(s) && (behavior.supports(s, a) || behavior.floor().is_some())
}

/// One synchronous sweep `Q ← B^π Q − α·P` over the updated pairs; all other
/// entries are carried over unchanged.
pub fn penalized_sweep(
    q: &QFunction,
    model: &Mdp,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    alpha: f64,
    penalties: &PenaltyTable,
) -> Result<QFunction> {
    model.check_policy(policy)?;
    model.check_q(q)?;
    if behavior.n_states() != model.n_states() || behavior.n_actions() != model.n_actions() {
        return Err(crate::error::shape(
            format!("{}x{}", model.n_states(), model.n_actions()),
            format!("{}x{}", behavior.n_states(), behavior.n_actions()),
        ));
    }
    model.touch();
    let v = q.state_values(policy);
    let gamma = model.discount();
    let mut out = q.clone();
    for s in 0..model.n_states() {
        for a in 0..model.n_actions() {
            if !updated(behavior, s, a) {
                continue;
            }
            let next: f64 = model.row(s, a).iter().map(|&(s2, p)| p * v[s2]).sum();
            out.set(s, a, model.r(s, a) + gamma * next - alpha * penalties.get(s, a));
        }
    }
    Ok(out)
}

/// One exact EPQ sweep, `Q_{k+1} = B^π Q_k − α·f_τ·(π/β̂ − 1)`.
///
/// With every pair supported and `α = 0` this is [`crate::mdp::bellman_apply`].
pub fn epq_exact_iterate(
    q: &QFunction,
    model: &Mdp,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    penalty: &PenaltyConfig,
) -> Result<QFunction> {
    let table = exclusive_penalty_table(policy, behavior, penalty.tau(model.n_actions()), None)?;
    penalized_sweep(q, model, policy, behavior, penalty.alpha, &table)
}

/// One exact CQL sweep, `Q_{k+1} = B^π Q_k − α·(π/β̂ − 1)`.
pub fn cql_exact_iterate(
    q: &QFunction,
    model: &Mdp,
    policy: &TabularPolicy,
    behavior: &BehaviorEstimate,
    alpha: f64,
) -> Result<QFunction> {
    let table = conservative_penalty_table(policy, behavior)?;
    penalized_sweep(q, model, policy, behavior, alpha, &table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_apply, exact_q, random_mdp};
    use crate::penalty::Threshold;

    fn full_counts(ns: usize, na: usize, seed: u64) -> BehaviorEstimate {
        let counts = (0..ns * na).map(|i| 1 + ((i as u64 * 7 + seed) % 5)).collect();
        BehaviorEstimate::from_counts(ns, na, counts).unwrap()
    }

    fn behavior_policy(b: &BehaviorEstimate) -> TabularPolicy {
        let probs = (0..b.n_states()).flat_map(|s| b.row(s).unwrap()).collect();
        TabularPolicy::new(b.n_states(), b.n_actions(), probs).unwrap()
    }

    #[test]
    fn zero_alpha_is_bellman() {
        let mdp = random_mdp(5, 3, 2).unwrap();
        let b = full_counts(5, 3, 1);
        let pi = TabularPolicy::uniform(5, 3);
        let q = QFunction::constant(5, 3, 0.7);
        let cfg = PenaltyConfig { alpha: 0.0, ..PenaltyConfig::default() };
        let epq = epq_exact_iterate(&q, &mdp, &pi, &b, &cfg).unwrap();
        assert_eq!(epq, bellman_apply(&mdp, &pi, &q).unwrap());
        assert_eq!(cql_exact_iterate(&q, &mdp, &pi, &b, 0.0).unwrap(), epq);
    }

    #[test]
    fn behavior_policy_converges_to_exact_q() {
        let mdp = random_mdp(6, 3, 4).unwrap();
        let b = full_counts(6, 3, 2);
        let pi = behavior_policy(&b);
        let cfg = PenaltyConfig { alpha: 7.0, ..PenaltyConfig::default() };
        let mut q = QFunction::zeros(6, 3);
        for _ in 0..400 {
            q = epq_exact_iterate(&q, &mdp, &pi, &b, &cfg).unwrap();
        }
        assert!(q.sup_distance(&exact_q(&mdp, &pi).unwrap()) < 1e-8);
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = Mdp::from_dense(1, 1, &[1.0], vec![1.0], 0.5, vec![1.0]).unwrap();
        let b = BehaviorEstimate::from_counts(1, 1, vec![3]).unwrap();
        let pi = TabularPolicy::uniform(1, 1);
        let (alpha, p) = (2.0, 0.4);
        let table = PenaltyTable::new(1, 1, vec![p], vec![1.0]).unwrap();
        let mut q = QFunction::zeros(1, 1);
        for _ in 0..200 {
            q = penalized_sweep(&q, &mdp, &pi, &b, alpha, &table).unwrap();
        }
        assert!((q.get(0, 0) - (1.0 - alpha * p) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn infinite_threshold_matches_cql() {
        let mdp = random_mdp(4, 3, 8).unwrap();
        let b = full_counts(4, 3, 3);
        let pi = crate::mdp::TabularPolicy::from_weights(4, 3, (0..12).map(|i| 1.0 + (i % 4) as f64).collect()).unwrap();
        let cfg = PenaltyConfig { alpha: 3.0, threshold: Threshold::Absolute(f64::INFINITY), ..PenaltyConfig::default() };
        let mut qe = QFunction::zeros(4, 3);
        let mut qc = QFunction::zeros(4, 3);
        for _ in 0..50 {
            qe = epq_exact_iterate(&qe, &mdp, &pi, &b, &cfg).unwrap();
            qc = cql_exact_iterate(&qc, &mdp, &pi, &b, 3.0).unwrap();
            assert!(qe.sup_distance(&qc) <= 1e-12);
        }
    }

    #[test]
    fn unsupported_pairs_are_carried_over() {
        let mdp = random_mdp(3, 2, 1).unwrap();
        let b = BehaviorEstimate::from_counts(3, 2, vec![2, 0, 0, 0, 1, 1]).unwrap();
        let pi = TabularPolicy::new(3, 2, vec![1.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let q = QFunction::constant(3, 2, 9.0);
        let out = cql_exact_iterate(&q, &mdp, &pi, &b, 1.0).unwrap();
        assert_eq!(out.get(0, 1), 9.0);
        assert_eq!(out.get(1, 0), 9.0);
        assert_ne!(out.get(0, 0), 9.0);
    }
}
