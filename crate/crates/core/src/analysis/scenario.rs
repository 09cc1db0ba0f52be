//! Action-distribution scenarios on the pendulum: a fixed policy is
//! evaluated with a penalized exact operator and the bias at the hanging
//! state is read off against the exact oracle.

use std::io::Write;

use rand_distr::{Distribution, Normal, Uniform};
use statrs::distribution::{ContinuousCDF, Normal as NormalCdf};

use crate::dataset::BehaviorEstimate;
use crate::error::{Error, Result};
use crate::learner::{penalized_sweep, Mode};
use crate::mdp::{
    exact_q, horizon_for, monte_carlo_v, pendulum_mdp, seeded_rng, Mdp, PendulumGrid, QFunction, TabularPolicy,
};
use crate::penalty::{conservative_penalty_table, exclusive_penalty_table, PenaltyConfig, Threshold};

use super::{BiasReport, StateBias};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// β = Unif(−2, 2), π = N(0, 0.2).
    CaseA,
    /// β = ½N(−1, 0.3) + ½N(1, 0.3), π = N(1, 0.2).
    CaseB,
    /// β as in case B, π = N(0, 0.2).
    CaseC,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CaseA, Scenario::CaseB, Scenario::CaseC];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CaseA => "case_a",
            Scenario::CaseB => "case_b",
            Scenario::CaseC => "case_c",
        }
    }

    fn policy_mean(self) -> f64 {
        match self {
            Scenario::CaseB => 1.0,
            _ => 0.0,
        }
    }

    fn sample_behavior<R: rand::Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Scenario::CaseA => Uniform::new(-2.0, 2.0).expect("valid range").sample(rng),
            _ => {
                let mean = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Normal::new(mean, 0.3).expect("valid sd").sample(rng)
            }
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}' (expected case_a, case_b or case_c)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Cql,
    Epq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cql => "cql",
            Method::Epq => "epq",
        }
    }

    fn mode(self) -> Mode {
        match self {
            Method::Cql => Mode::CqlExact,
            Method::Epq => Mode::EpqExact,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cql" => Ok(Method::Cql),
            "epq" => Ok(Method::Epq),
            _ => Err(Error::Config(format!("unknown method '{s}' (expected cql or epq)"))),
        }
    }
}

/// Grid and budget of the scenario runner.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub angle_bins: usize,
    pub velocity_bins: usize,
    /// Torque bins over [−2, 2].
    pub action_bins: usize,
    /// Draws used to build the behavior histogram at the probed state.
    pub behavior_samples: usize,
    pub policy_sd: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Rollouts of the Monte-Carlo cross-check (0 disables it).
    pub mc_rollouts: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            angle_bins: 21,
            velocity_bins: 21,
            action_bins: 41,
            behavior_samples: 100_000,
            policy_sd: 0.2,
            tol: 1e-10,
            max_sweeps: 100_000,
            mc_rollouts: 1000,
        }
    }
}

/// A built scenario: model, histogram behavior and fixed policy. Reusable
/// across methods and penalty levels.
#[derive(Debug, Clone)]
pub struct ScenarioCase {
    pub scenario: Scenario,
    pub spec: ScenarioSpec,
    pub mdp: Mdp,
    pub grid: PendulumGrid,
    pub probe: usize,
    pub behavior: BehaviorEstimate,
    pub policy: TabularPolicy,
    pub q_true: QFunction,
    pub mc_value: Option<f64>,
    pub mc_stderr: Option<f64>,
    /// Rollout horizon of the Monte-Carlo cross-check.
    pub mc_horizon: usize,
}

impl ScenarioCase {
    pub fn build(scenario: Scenario, spec: &ScenarioSpec, seed: u64) -> Result<Self> {
        if spec.behavior_samples == 0 || !(spec.policy_sd > 0.0) || !(spec.tol > 0.0) {
            return Err(Error::Config("scenario needs samples > 0, sd > 0 and tol > 0".into()));
        }
        let grid = PendulumGrid::new(spec.angle_bins, spec.velocity_bins, spec.action_bins)?;
        let mdp = pendulum_mdp(spec.angle_bins, spec.velocity_bins, spec.action_bins)?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let probe = grid.hanging_state();
        let torques: Vec<f64> = (0..na).map(|a| grid.torque(a)).collect();

        // Everywhere but the probe, the data is uniform and π = β̂.
        let mut counts = vec![1u64; ns * na];
        let mut rng = seeded_rng(seed);
        let row = &mut counts[probe * na..(probe + 1) * na];
        row.iter_mut().for_each(|c| *c = 0);
        for _ in 0..spec.behavior_samples {
            row[nearest(&torques, scenario.sample_behavior(&mut rng))] += 1;
        }
        let behavior = BehaviorEstimate::from_counts(ns, na, counts)?;

        let mut probs = vec![1.0 / na as f64; ns * na];
        let cells = gaussian_cells(&torques, scenario.policy_mean(), spec.policy_sd)?;
        let restricted: Vec<f64> =
            cells.iter().enumerate().map(|(a, p)| if behavior.supports(probe, a) { *p } else { 0.0 }).collect();
        let total: f64 = restricted.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Domain("policy has no mass on the behavior support".into()));
        }
        probs[probe * na..(probe + 1) * na].iter_mut().zip(&restricted).for_each(|(p, r)| *p = r / total);
        let policy = TabularPolicy::new(ns, na, probs)?;

        let q_true = exact_q(&mdp, &policy)?;
        let mc_horizon = horizon_for(&mdp, 1e-3);
        let (mc_value, mc_stderr) = if spec.mc_rollouts > 0 {
            let mc = monte_carlo_v(&mdp, &policy, probe, spec.mc_rollouts, mc_horizon, seed ^ 0x5ce0)?;
            (Some(mc.mean), Some(mc.std_err))
        } else {
            (None, None)
        };
        Ok(Self { scenario, spec: spec.clone(), mdp, grid, probe, behavior, policy, q_true, mc_value, mc_stderr, mc_horizon })
    }

    pub fn true_value(&self) -> f64 {
        self.q_true.state_value(&self.policy, self.probe)
    }

    /// Penalized evaluation of the fixed policy, started from `Q^π` and swept
    /// until successive iterates differ by less than the tolerance.
    pub fn evaluate(&self, method: Method, alpha: f64, penalty: &PenaltyConfig) -> Result<ScenarioResult> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        let na = self.mdp.n_actions();
        let tau = penalty.tau(na);
        let table = match method {
            Method::Epq => exclusive_penalty_table(&self.policy, &self.behavior, tau, None)?,
            Method::Cql => conservative_penalty_table(&self.policy, &self.behavior)?,
        };
        let mut q = self.q_true.clone();
        let mut sweeps = 0;
        loop {
            let next = penalized_sweep(&q, &self.mdp, &self.policy, &self.behavior, alpha, &table)?;
            let change = next.sup_distance(&q);
            q = next;
            sweeps += 1;
            if change < self.spec.tol {
                break;
            }
            if sweeps >= self.spec.max_sweeps {
                return Err(Error::Domain(format!("scenario evaluation did not converge in {sweeps} sweeps")));
            }
        }
        let estimate = q.state_value(&self.policy, self.probe);
        let truth = self.true_value();
        let actions = (0..na)
            .filter(|&a| self.behavior.supports(self.probe, a))
            .map(|a| ActionBias {
                action: a,
                torque: self.grid.torque(a),
                pi: self.policy.prob(self.probe, a),
                beta_hat: self.behavior.prob(self.probe, a).unwrap_or(0.0),
                q_estimate: q.get(self.probe, a),
                q_true: self.q_true.get(self.probe, a),
                q_bias: q.get(self.probe, a) - self.q_true.get(self.probe, a),
            })
            .collect();
        Ok(ScenarioResult {
            scenario: self.scenario,
            method,
            alpha,
            tau_over_rho: (method == Method::Epq).then(|| penalty.threshold.over_rho(na)),
            tau: if method == Method::Epq { tau } else { f64::NAN },
            estimate,
            truth,
            bias: estimate - truth,
            mean_f: table.factor(self.probe),
            stderr: self.mc_stderr,
            mc_value: self.mc_value,
            sweeps,
            actions,
        })
    }
}

/// Per-action `Q̂ − Q^π` at the probed state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBias {
    pub action: usize,
    pub torque: f64,
    pub pi: f64,
    pub beta_hat: f64,
    pub q_estimate: f64,
    pub q_true: f64,
    pub q_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub method: Method,
    pub alpha: f64,
    /// `τ/ρ`; `None` for CQL, which has no threshold.
    pub tau_over_rho: Option<f64>,
    pub tau: f64,
    /// `E_π[Q̂(s₀,·)]`.
    pub estimate: f64,
    /// `V^π(s₀)` from the exact oracle.
    pub truth: f64,
    pub bias: f64,
    /// Adaptation factor at the probed state (1 for CQL).
    pub mean_f: f64,
    /// Standard error of the Monte-Carlo cross-check of `V^π(s₀)`.
    pub stderr: Option<f64>,
    pub mc_value: Option<f64>,
    pub sweeps: usize,
    /// Supported actions only; unsupported pairs are never updated.
    pub actions: Vec<ActionBias>,
}

impl ScenarioResult {
    pub fn squared_bias(&self) -> f64 {
        self.bias * self.bias
    }

    pub fn bias_report(&self, probe: usize) -> BiasReport {
        BiasReport {
            states: vec![StateBias {
                state: probe,
                estimate: self.estimate,
                truth: self.truth,
                bias: self.bias,
                mc_truth: self.mc_value,
                mc_stderr: self.stderr,
            }],
            mean_bias: self.bias,
            squared_bias: self.squared_bias(),
            mode: self.method.mode(),
            alpha: self.alpha,
            tau: self.tau,
            mc_truncation: 0.0,
        }
    }
}

/// Builds the case and evaluates one (method, α) cell with the given τ/ρ.
pub fn run_scenario(
    scenario: Scenario,
    method: Method,
    alpha: f64,
    tau_over_rho: f64,
    seed: u64,
) -> Result<BiasReport> {
    let case = ScenarioCase::build(scenario, &ScenarioSpec::default(), seed)?;
    let penalty = PenaltyConfig { threshold: Threshold::RhoMultiple(tau_over_rho), alpha, ..PenaltyConfig::default() };
    Ok(case.evaluate(method, alpha, &penalty)?.bias_report(case.probe))
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let step = grid[1] - grid[0];
    (((x - grid[0]) / step).round().clamp(0.0, (grid.len() - 1) as f64)) as usize
}

/// Mass of `N(mean, sd)` on each grid cell, cells split at midpoints and the
/// outer cells closed at the grid ends, renormalized to sum to one.
fn gaussian_cells(grid: &[f64], mean: f64, sd: f64) -> Result<Vec<f64>> {
    let normal = NormalCdf::new(mean, sd).map_err(|e| Error::Config(e.to_string()))?;
    let n = grid.len();
    let edge = |i: usize| -> f64 {
        match i {
            0 => grid[0],
            i if i == n => grid[n - 1],
            i => 0.5 * (grid[i - 1] + grid[i]),
        }
    };
    let mut mass: Vec<f64> = (0..n).map(|a| normal.cdf(edge(a + 1)) - normal.cdf(edge(a))).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(mass)
}

pub const SCENARIO_COLUMNS: [&str; 5] = ["alpha", "tau", "bias", "squared_bias", "stderr"];
pub const ACTION_BIAS_COLUMNS: [&str; 11] =
    ["case", "method", "alpha", "tau", "action", "torque", "pi", "beta_hat", "q_estimate", "q_true", "q_bias"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per result; `tau` holds `τ/ρ` and is empty for CQL.
pub fn write_scenario_csv<W: Write>(results: &[ScenarioResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCENARIO_COLUMNS)?;
    for r in results {
        out.write_record([
            r.alpha.to_string(),
            opt(r.tau_over_rho),
            r.bias.to_string(),
            r.squared_bias().to_string(),
            opt(r.stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_action_bias_csv<W: Write>(results: &[ScenarioResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ACTION_BIAS_COLUMNS)?;
    for r in results {
        for a in &r.actions {
            out.write_record([
                r.scenario.name().to_string(),
                r.method.name().to_string(),
                r.alpha.to_string(),
                opt(r.tau_over_rho),
                a.action.to_string(),
                a.torque.to_string(),
                a.pi.to_string(),
                a.beta_hat.to_string(),
                a.q_estimate.to_string(),
                a.q_true.to_string(),
                a.q_bias.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
