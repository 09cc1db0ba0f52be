use crate::dataset::{generate_dataset, OfflineDataset};
use crate::error::Result;
use crate::learner::{LearnerConfig, Mode, PolicySupport, QModel};
use crate::mdp::{random_mdp, Mdp, TabularPolicy};
use crate::penalty::PenaltyConfig;

/// Action index the narrow behavior always takes (value 0.4 on the [−1, 1] grid).
pub const NARROW_DATA_ACTION: usize = 7;

const NARROW_STATES: usize = 6;
const NARROW_ACTIONS: usize = 11;
const NARROW_EPISODES: usize = 50;
const NARROW_HORIZON: usize = 40;

/// A random MDP logged by a deterministic behavior, so every state carries a
/// single in-sample action.
#[derive(Debug, Clone)]
pub struct NarrowInstance {
    pub mdp: Mdp,
    pub behavior: TabularPolicy,
    pub dataset: OfflineDataset,
}

/// Six states, eleven actions, rewards shifted to `[0, 1]`, uniform starts,
/// behavior fixed at [`NARROW_DATA_ACTION`].
///
/// With positive rewards and one data action, an unpenalized learner that
/// generalizes across actions bootstraps from its own extrapolated values.
pub fn narrow_behavior_instance(seed: u64) -> Result<NarrowInstance> {
    let (ns, na) = (NARROW_STATES, NARROW_ACTIONS);
    let base = random_mdp(ns, na, seed)?;
    let rows = (0..ns * na).map(|i| base.transition(i / na, i % na).to_vec()).collect();
    let rewards = base.rewards().iter().map(|r| (r + 1.0) / 2.0).collect();
    let mdp = Mdp::from_sparse(ns, na, rows, rewards, base.discount(), vec![1.0 / ns as f64; ns])?;
    let behavior = TabularPolicy::deterministic(&vec![NARROW_DATA_ACTION; ns], na)?;
    let dataset = generate_dataset(&mdp, &behavior, NARROW_EPISODES, NARROW_HORIZON, seed)?;
    Ok(NarrowInstance { mdp, behavior, dataset })
}

/// Sampled-mode configuration used on the narrow instance: a Q-model
/// quadratic in the action value, full-support policy with a tiny density
/// floor, otherwise the defaults.
pub fn narrow_learner_config(instance: &NarrowInstance, mode: Mode, alpha: f64, max_steps: usize) -> LearnerConfig {
    LearnerConfig {
        mode,
        penalty: PenaltyConfig { alpha, ..PenaltyConfig::default() },
        max_gradient_steps: max_steps,
        q_model: QModel::ActionQuadratic { action_values: instance.mdp.action_values().to_vec() },
        support: PolicySupport::FullWithFloor(1e-6),
        seed: instance.dataset.seed(),
        ..LearnerConfig::default()
    }
}
