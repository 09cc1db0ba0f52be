//! Shared fixtures for the benchmarks.

use epq_core::dataset::{estimate_behavior, generate_dataset};
use epq_core::mdp::random_mdp;
use epq_core::{BehaviorEstimate, Mdp, OfflineDataset, TabularPolicy};

/// A random MDP with a uniform-behavior dataset of `episodes × 40` transitions.
pub struct Fixture {
    pub mdp: Mdp,
    pub dataset: OfflineDataset,
    pub behavior: BehaviorEstimate,
    pub policy: TabularPolicy,
}

pub fn fixture(n_states: usize, n_actions: usize, episodes: usize) -> Fixture {
    let mdp = random_mdp(n_states, n_actions, 11).expect("valid sizes");
    let uniform = TabularPolicy::uniform(n_states, n_actions);
    let dataset = generate_dataset(&mdp, &uniform, episodes, 40, 12).expect("valid dataset");
    let behavior = estimate_behavior(&dataset, n_states, n_actions).expect("matching shape");
    // Skewed toward high actions, restricted to the data support; unvisited
    // states stay uniform.
    let mask = behavior.support_mask();
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let row = &mask[s * n_actions..(s + 1) * n_actions];
        let raw: Vec<f64> = (0..n_actions)
            .map(|a| if row.iter().any(|&m| m) { if row[a] { 1.0 + a as f64 } else { 0.0 } } else { 1.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|p| p / total));
    }
    let policy = TabularPolicy::new(n_states, n_actions, probs).expect("rows sum to one");
    Fixture { mdp, dataset, behavior, policy }
}
