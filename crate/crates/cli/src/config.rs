//! Declarative experiment configuration, read from TOML.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! The fully resolved config is echoed next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epq_core::analysis::{Method, Scenario};
use epq_core::learner::{LearnerConfig, Mode, PolicySchedule, PolicySupport, QModel, WeightSource};
use epq_core::mdp::{pendulum_mdp, random_mdp, random_sparse_mdp, Mdp, TabularPolicy};
use epq_core::penalty::{PenaltyConfig, StateMetric, Threshold};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; the environment, dataset and learner seeds derive from it.
    pub seed: u64,
    pub environment: EnvironmentSpec,
    pub behavior: BehaviorSpec,
    pub dataset: DatasetSpec,
    pub learner: LearnerSpec,
    pub penalty: PenaltySpec,
    pub analysis: AnalysisSpec,
    pub scenario: ScenarioSpecToml,
    pub sweep: SweepSpec,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentKind {
    /// Dense random transitions, rewards in [−1, 1].
    Random,
    /// Each pair reaches `branching` successors.
    Sparse,
    /// Discretized pendulum.
    Pendulum,
    /// Six states, eleven actions, rewards in [0, 1].
    Narrow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: EnvironmentKind,
    pub n_states: usize,
    pub n_actions: usize,
    pub branching: usize,
    pub angle_bins: usize,
    pub velocity_bins: usize,
    pub action_bins: usize,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            kind: EnvironmentKind::Random,
            n_states: 8,
            n_actions: 4,
            branching: 2,
            angle_bins: 21,
            velocity_bins: 21,
            action_bins: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    Uniform,
    /// Always `action`.
    Deterministic,
    /// Mass `peak` on `action`, the rest spread evenly.
    Peaked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    pub action: usize,
    pub peak: f64,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self { kind: BehaviorKind::Uniform, action: 0, peak: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { episodes: 50, horizon: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSpec {
    /// `epq-exact`, `epq-sampled`, `cql-exact` or `cql-sampled`.
    pub mode: String,
    pub q_step_size: f64,
    pub policy_temperature: f64,
    pub ema_rate: f64,
    pub batch_size: usize,
    /// Action draws for the log-sum-exp term; 0 sums exactly.
    pub n_action_samples: usize,
    pub max_gradient_steps: usize,
    pub convergence_tol: f64,
    pub q_steps_per_policy_step: usize,
    /// `improve`, or a fixed `behavior` / `uniform` policy.
    pub policy: String,
    /// `clustered`, `exact-returns`, `live-q` or `uniform`.
    pub weights: String,
    /// `match` or `euclidean` (needs state coordinates).
    pub cluster_metric: String,
    /// `tabular` or `action-quadratic`.
    pub q_model: String,
    /// Floor on `β̂` off the data support; 0 keeps the policy on the support.
    pub support_floor: f64,
    pub divergence_factor: f64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        let d = LearnerConfig::default();
        Self {
            mode: d.mode.name().to_string(),
            q_step_size: d.q_step_size,
            policy_temperature: d.policy_temperature,
            ema_rate: d.ema_rate,
            batch_size: d.batch_size,
            n_action_samples: d.n_action_samples,
            max_gradient_steps: d.max_gradient_steps,
            convergence_tol: d.convergence_tol,
            q_steps_per_policy_step: d.q_steps_per_policy_step,
            policy: "improve".into(),
            weights: "clustered".into(),
            cluster_metric: "match".into(),
            q_model: "tabular".into(),
            support_floor: 0.0,
            divergence_factor: d.divergence_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySpec {
    /// Threshold as a multiple of `ρ = ln(1/|A|)`.
    pub tau_over_rho: f64,
    /// Absolute threshold; overrides `tau_over_rho` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub alpha: f64,
    pub c_min: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub use_pd: bool,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        let d = PenaltyConfig::default();
        let Threshold::RhoMultiple(c) = d.threshold else { unreachable!("default threshold is a multiple of rho") };
        Self { tau_over_rho: c, tau: None, alpha: d.alpha, c_min: d.c_min, epsilon: d.epsilon, zeta: d.zeta, use_pd: d.use_pd }
    }
}

impl PenaltySpec {
    pub fn to_core(&self) -> CliResult<PenaltyConfig> {
        let threshold = match self.tau {
            Some(t) => Threshold::Absolute(t),
            None => Threshold::RhoMultiple(self.tau_over_rho),
        };
        let cfg = PenaltyConfig {
            threshold,
            alpha: self.alpha,
            c_min: self.c_min,
            epsilon: self.epsilon,
            zeta: self.zeta,
            use_pd: self.use_pd,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Monte-Carlo rollouts per state for the cross-check; 0 disables it.
    pub n_rollouts: usize,
    /// Concentration bound applied uniformly to every pair.
    pub xi: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { n_rollouts: 200, xi: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpecToml {
    pub cases: Vec<String>,
    pub methods: Vec<String>,
    pub alphas: Vec<f64>,
    pub angle_bins: usize,
    pub velocity_bins: usize,
    pub action_bins: usize,
    pub behavior_samples: usize,
    pub mc_rollouts: usize,
}

impl Default for ScenarioSpecToml {
    fn default() -> Self {
        let d = epq_core::analysis::ScenarioSpec::default();
        Self {
            cases: Scenario::ALL.iter().map(|c| c.name().to_string()).collect(),
            methods: vec!["cql".into(), "epq".into()],
            alphas: vec![0.0, 1.0, 5.0, 10.0],
            angle_bins: d.angle_bins,
            velocity_bins: d.velocity_bins,
            action_bins: d.action_bins,
            behavior_samples: d.behavior_samples,
            mc_rollouts: d.mc_rollouts,
        }
    }
}

impl ScenarioSpecToml {
    pub fn to_core(&self) -> epq_core::analysis::ScenarioSpec {
        epq_core::analysis::ScenarioSpec {
            angle_bins: self.angle_bins,
            velocity_bins: self.velocity_bins,
            action_bins: self.action_bins,
            behavior_samples: self.behavior_samples,
            mc_rollouts: self.mc_rollouts,
            ..epq_core::analysis::ScenarioSpec::default()
        }
    }

    pub fn cases(&self) -> CliResult<Vec<Scenario>> {
        self.cases.iter().map(|c| Ok(c.parse::<Scenario>()?)).collect()
    }

    pub fn methods(&self) -> CliResult<Vec<Method>> {
        self.methods.iter().map(|m| Ok(m.parse::<Method>()?)).collect()
    }
}

/// Grids crossed by `sweep`; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub alpha: Vec<f64>,
    pub tau_over_rho: Vec<f64>,
    pub c_min: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            alpha: Vec::new(),
            tau_over_rho: vec![0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
            c_min: Vec::new(),
            epsilon: Vec::new(),
            zeta: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Artifacts land in `dir/run_id`.
    pub run_id: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), run_id: "default".into() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_id)
    }

    pub fn env_seed(&self) -> u64 {
        self.seed
    }

    pub fn dataset_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn learner_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// Checks every value, including each sweep grid entry on its own.
    pub fn validate(&self) -> CliResult<()> {
        let env = &self.environment;
        if env.n_states == 0 || env.n_actions == 0 {
            return Err(CliError::Config("environment needs n_states, n_actions >= 1".into()));
        }
        if env.kind == EnvironmentKind::Sparse && !(1..=env.n_states).contains(&env.branching) {
            return Err(CliError::Config("branching must lie in 1..=n_states".into()));
        }
        if self.dataset.episodes == 0 || self.dataset.horizon == 0 {
            return Err(CliError::Config("dataset needs episodes and horizon >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.behavior.peak) {
            return Err(CliError::Config("behavior.peak must lie in [0, 1]".into()));
        }
        self.penalty.to_core()?;
        if !(self.learner.support_floor >= 0.0 && self.learner.support_floor < 1.0) {
            return Err(CliError::Config("learner.support_floor must lie in [0, 1)".into()));
        }
        self.learner.mode.parse::<Mode>()?;
        for (name, grid) in [
            ("alpha", &self.sweep.alpha),
            ("tau_over_rho", &self.sweep.tau_over_rho),
            ("c_min", &self.sweep.c_min),
            ("epsilon", &self.sweep.epsilon),
            ("zeta", &self.sweep.zeta),
        ] {
            for &v in grid {
                let mut p = self.penalty.clone();
                match name {
                    "alpha" => p.alpha = v,
                    "tau_over_rho" => {
                        p.tau = None;
                        p.tau_over_rho = v
                    }
                    "c_min" => p.c_min = v,
                    "epsilon" => p.epsilon = v,
                    _ => p.zeta = v,
                }
                p.to_core().map_err(|e| CliError::Config(format!("sweep.{name} = {v}: {e}")))?;
            }
        }
        self.scenario.cases()?;
        self.scenario.methods()?;
        if self.scenario.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(CliError::Config("scenario alphas must be >= 0".into()));
        }
        if self.output.run_id.is_empty() || self.output.run_id.contains(['/', '\\']) {
            return Err(CliError::Config("output.run_id must be a plain, non-empty name".into()));
        }
        Ok(())
    }

    pub fn build_mdp(&self) -> CliResult<Mdp> {
        let env = &self.environment;
        let seed = self.env_seed();
        Ok(match env.kind {
            EnvironmentKind::Random => random_mdp(env.n_states, env.n_actions, seed)?,
            EnvironmentKind::Sparse => random_sparse_mdp(env.n_states, env.n_actions, env.branching, seed)?,
            EnvironmentKind::Pendulum => pendulum_mdp(env.angle_bins, env.velocity_bins, env.action_bins)?,
            EnvironmentKind::Narrow => epq_core::analysis::narrow_behavior_instance(seed)?.mdp,
        })
    }

    pub fn build_behavior(&self, mdp: &Mdp) -> CliResult<TabularPolicy> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let b = &self.behavior;
        if b.kind != BehaviorKind::Uniform && b.action >= na {
            return Err(CliError::Config(format!("behavior.action {} out of range for {na} actions", b.action)));
        }
        Ok(match b.kind {
            BehaviorKind::Uniform => TabularPolicy::uniform(ns, na),
            BehaviorKind::Deterministic => TabularPolicy::deterministic(&vec![b.action; ns], na)?,
            BehaviorKind::Peaked => {
                let rest = if na > 1 { (1.0 - b.peak) / (na - 1) as f64 } else { 0.0 };
                let row: Vec<f64> = (0..na).map(|a| if a == b.action { if na > 1 { b.peak } else { 1.0 } } else { rest }).collect();
                TabularPolicy::new(ns, na, row.repeat(ns))?
            }
        })
    }

    /// Learner configuration; `behavior` is needed only for a fixed behavior policy.
    pub fn learner_config(&self, mdp: &Mdp, behavior: &TabularPolicy) -> CliResult<LearnerConfig> {
        let l = &self.learner;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let policy = match l.policy.as_str() {
            "improve" => PolicySchedule::Improve,
            "behavior" => PolicySchedule::Fixed(behavior.clone()),
            "uniform" => PolicySchedule::Fixed(TabularPolicy::uniform(ns, na)),
            other => return Err(CliError::Config(format!("unknown learner.policy {other:?}"))),
        };
        let metric = match l.cluster_metric.as_str() {
            "match" => StateMetric::DiscreteMatch,
            "euclidean" => StateMetric::Euclidean(
                mdp.state_coords()
                    .ok_or_else(|| CliError::Config("environment has no state coordinates".into()))?
                    .to_vec(),
            ),
            other => return Err(CliError::Config(format!("unknown learner.cluster_metric {other:?}"))),
        };
        let weights = match l.weights.as_str() {
            "clustered" => WeightSource::Clustered(metric),
            "exact-returns" => WeightSource::ExactReturns,
            "live-q" => WeightSource::LiveQ,
            "uniform" => WeightSource::Uniform,
            other => return Err(CliError::Config(format!("unknown learner.weights {other:?}"))),
        };
        let q_model = match l.q_model.as_str() {
            "tabular" => QModel::Tabular,
            "action-quadratic" => QModel::ActionQuadratic { action_values: mdp.action_values().to_vec() },
            other => return Err(CliError::Config(format!("unknown learner.q_model {other:?}"))),
        };
        let cfg = LearnerConfig {
            mode: l.mode.parse()?,
            penalty: self.penalty.to_core()?,
            q_step_size: l.q_step_size,
            policy_temperature: l.policy_temperature,
            ema_rate: l.ema_rate,
            batch_size: l.batch_size,
            n_action_samples: l.n_action_samples,
            max_gradient_steps: l.max_gradient_steps,
            convergence_tol: l.convergence_tol,
            seed: self.learner_seed(),
            policy,
            q_steps_per_policy_step: l.q_steps_per_policy_step,
            weights,
            q_model,
            support: if l.support_floor > 0.0 { PolicySupport::FullWithFloor(l.support_floor) } else { PolicySupport::DataSupport },
            divergence_factor: l.divergence_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
