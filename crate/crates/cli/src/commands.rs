//! The six subcommands. Each takes a resolved config and an output
//! directory, writes its artifacts there and returns the process exit code.

use std::path::Path;

use rayon::prelude::*;

use epq_core::analysis::{
    measure_bias, verify_underestimation, write_action_bias_csv, write_bias_states_csv, write_bias_summary_csv,
    write_certificate_csv, write_margins_csv, write_scenario_csv, ScenarioCase, ScenarioResult,
};
use epq_core::dataset::{estimate_behavior, generate_dataset, save_dataset, OfflineDataset};
use epq_core::learner::{train, write_history_csv, LearnerConfig, Mode, RunStatus, TrainedAgent};
use epq_core::mdp::Mdp;

use crate::artifacts::{self, AgentMeta};
use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};

fn prepare(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    artifacts::write_text(out, artifacts::CONFIG_ECHO, &cfg.to_toml())
}

fn generate(cfg: &ExperimentConfig, mdp: &Mdp) -> CliResult<OfflineDataset> {
    let behavior = cfg.build_behavior(mdp)?;
    Ok(generate_dataset(mdp, &behavior, cfg.dataset.episodes, cfg.dataset.horizon, cfg.dataset_seed())?)
}

fn check_dims(ds: &OfflineDataset, mdp: &Mdp) -> CliResult<()> {
    if ds.n_states() != mdp.n_states() || ds.n_actions() != mdp.n_actions() {
        return Err(CliError::Config(format!(
            "dataset is {}x{} but the environment is {}x{}",
            ds.n_states(),
            ds.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `gen-data`: writes the dataset and the environment it came from.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    prepare(cfg, out)?;
    let mdp = cfg.build_mdp()?;
    let ds = generate(cfg, &mdp)?;
    save_dataset(&ds, out.join(artifacts::DATASET))?;
    artifacts::write_text(out, artifacts::ENVIRONMENT, &mdp.to_text())?;
    println!(
        "dataset: {} episodes, {} transitions, coverage {:.4}, truncation bias bound {:.3e}",
        ds.n_episodes(),
        ds.len(),
        ds.coverage(),
        ds.truncation_bias_bound()
    );
    Ok(exit::SUCCESS)
}

fn status_code(status: &RunStatus) -> i32 {
    match status {
        RunStatus::Diverged { .. } => exit::DIVERGED,
        _ => exit::SUCCESS,
    }
}

/// `train`: learns from the stored dataset; exit code 3 if the guard trips.
pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    let ds = artifacts::read_dataset(out)?;
    prepare(cfg, out)?;
    let mdp = cfg.build_mdp()?;
    check_dims(&ds, &mdp)?;
    let learner = cfg.learner_config(&mdp, &cfg.build_behavior(&mdp)?)?;
    let agent = train(&ds, &learner)?;
    artifacts::write_agent(out, &agent)?;
    write_history_csv(&agent.history, artifacts::create(out, artifacts::METRICS)?)?;
    let last = agent.history.last();
    println!(
        "{}: {} after {} steps (final loss {:.6e}, mean f {:.4})",
        agent.mode.name(),
        agent.status.label(),
        agent.history.len(),
        last.map_or(f64::NAN, |h| h.loss),
        last.map_or(f64::NAN, |h| h.mean_f)
    );
    Ok(status_code(&agent.status))
}

fn restore_agent(out: &Path, ds: &OfflineDataset) -> CliResult<TrainedAgent> {
    let stored = artifacts::read_agent(out, ds.n_states(), ds.n_actions())?;
    let AgentMeta { mode, alpha, tau, status, steps, diverged_at } = stored.meta;
    let mode: Mode = mode.parse()?;
    let status = match status.as_str() {
        "converged" => RunStatus::Converged { step: steps },
        "diverged" => RunStatus::Diverged { step: diverged_at.unwrap_or(steps), q_norm: f64::NAN, bound: f64::NAN },
        _ => RunStatus::BudgetExhausted,
    };
    Ok(TrainedAgent {
        q: stored.q,
        target_q: stored.target_q,
        policy: stored.policy,
        behavior: estimate_behavior(ds, ds.n_states(), ds.n_actions())?,
        history: Vec::new(),
        status,
        mode,
        alpha,
        tau,
    })
}

/// `bias`: exact (and optionally Monte-Carlo) bias of the stored agent.
pub fn bias(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    let ds = artifacts::read_dataset(out)?;
    let agent = restore_agent(out, &ds)?;
    prepare(cfg, out)?;
    let mdp = cfg.build_mdp()?;
    check_dims(&ds, &mdp)?;
    let report = measure_bias(&agent, &mdp, cfg.analysis.n_rollouts, cfg.seed)?;
    write_bias_states_csv(&report, artifacts::create(out, artifacts::BIAS_STATES)?)?;
    write_bias_summary_csv(&report, artifacts::create(out, artifacts::BIAS_SUMMARY)?)?;
    println!(
        "bias over {} states: mean {:.6e}, squared {:.6e}",
        report.states.len(),
        report.mean_bias,
        report.squared_bias
    );
    Ok(exit::SUCCESS)
}

/// `certify`: trains in exact mode against the true model; exit code 4 on failure.
pub fn certify(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    let ds = artifacts::read_dataset(out)?;
    prepare(cfg, out)?;
    let mdp = cfg.build_mdp()?;
    check_dims(&ds, &mdp)?;
    let learner = cfg.learner_config(&mdp, &cfg.build_behavior(&mdp)?)?;
    if !learner.mode.is_exact() {
        return Err(CliError::Config(format!("certify needs an exact mode, got {}", learner.mode.name())));
    }
    let xi = vec![cfg.analysis.xi; mdp.n_states() * mdp.n_actions()];
    let cert = verify_underestimation(&ds, &mdp, &learner, &xi)?;
    write_certificate_csv(&cert, artifacts::create(out, artifacts::CERTIFICATE)?)?;
    write_margins_csv(&cert, artifacts::create(out, artifacts::MARGINS)?)?;
    if let Some(w) = &cert.warning {
        eprintln!("warning: {w}");
    }
    let verdict = match cert.pass {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "undefined",
    };
    println!("certificate: {verdict}, min margin {:.6e} over {} states", cert.min_margin(), cert.margins.len());
    Ok(if cert.pass == Some(false) { exit::CERTIFICATE_FAILED } else { exit::SUCCESS })
}

/// `scenario`: every (case, method, α) cell of the action-distribution battery.
pub fn scenario(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    prepare(cfg, out)?;
    let spec = cfg.scenario.to_core();
    let methods = cfg.scenario.methods()?;
    let cases = cfg
        .scenario
        .cases()?
        .into_par_iter()
        .map(|c| ScenarioCase::build(c, &spec, cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let penalty = cfg.penalty.to_core()?;
    let cells: Vec<(usize, usize, f64)> = (0..cases.len())
        .flat_map(|c| (0..methods.len()).flat_map(move |m| cfg.scenario.alphas.iter().map(move |&a| (c, m, a))))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(c, m, alpha)| {
            let p = epq_core::penalty::PenaltyConfig { alpha, ..penalty.clone() };
            cases[c].evaluate(methods[m], alpha, &p)
        })
        .collect::<Result<Vec<ScenarioResult>, _>>()?;

    let mut info = csv::Writer::from_writer(artifacts::create(out, artifacts::SCENARIO_INFO)?);
    info.write_record(["case", "probe_state", "discount", "true_value", "mc_value", "mc_stderr", "mc_horizon"])?;
    for case in &cases {
        info.write_record([
            case.scenario.name().to_string(),
            case.probe.to_string(),
            case.mdp.discount().to_string(),
            case.true_value().to_string(),
            case.mc_value.map(|v| v.to_string()).unwrap_or_default(),
            case.mc_stderr.map(|v| v.to_string()).unwrap_or_default(),
            case.mc_horizon.to_string(),
        ])?;
    }
    info.flush()?;
    for case in &cases {
        for &method in &methods {
            let rows: Vec<ScenarioResult> =
                results.iter().filter(|r| r.scenario == case.scenario && r.method == method).cloned().collect();
            let name = artifacts::scenario_file(case.scenario.name(), method.name());
            write_scenario_csv(&rows, artifacts::create(out, &name)?)?;
        }
    }
    write_action_bias_csv(&results, artifacts::create(out, artifacts::SCENARIO_ACTIONS)?)?;
    for r in &results {
        println!("{} {} alpha={} bias={:.6e}", r.scenario.name(), r.method.name(), r.alpha, r.bias);
    }
    Ok(exit::SUCCESS)
}

/// One crossed point of the sweep grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub tau_over_rho: Option<f64>,
    pub tau: Option<f64>,
    pub c_min: f64,
    pub epsilon: f64,
    pub zeta: f64,
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let p = &cfg.penalty;
    let or = |grid: &Vec<f64>, base: f64| if grid.is_empty() { vec![base] } else { grid.clone() };
    let taus: Vec<(Option<f64>, Option<f64>)> = if cfg.sweep.tau_over_rho.is_empty() {
        vec![(p.tau.is_none().then_some(p.tau_over_rho), p.tau)]
    } else {
        cfg.sweep.tau_over_rho.iter().map(|&c| (Some(c), None)).collect()
    };
    let mut cells = Vec::new();
    for alpha in or(&cfg.sweep.alpha, p.alpha) {
        for &(tau_over_rho, tau) in &taus {
            for c_min in or(&cfg.sweep.c_min, p.c_min) {
                for epsilon in or(&cfg.sweep.epsilon, p.epsilon) {
                    for zeta in or(&cfg.sweep.zeta, p.zeta) {
                        cells.push(SweepCell { alpha, tau_over_rho, tau, c_min, epsilon, zeta });
                    }
                }
            }
        }
    }
    cells
}

pub const SWEEP_COLUMNS: [&str; 15] = [
    "cell",
    "mode",
    "alpha",
    "tau_over_rho",
    "tau",
    "c_min",
    "epsilon",
    "zeta",
    "status",
    "steps",
    "final_loss",
    "mean_f",
    "mean_w",
    "mean_bias",
    "squared_bias",
];

/// `sweep`: trains every grid cell on one dataset and tags rows with all
/// hyperparameters.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> CliResult<i32> {
    let mdp = cfg.build_mdp()?;
    let ds = match artifacts::read_dataset(out) {
        Ok(ds) => ds,
        Err(CliError::MissingArtifact { .. }) => {
            std::fs::create_dir_all(out)?;
            let ds = generate(cfg, &mdp)?;
            save_dataset(&ds, out.join(artifacts::DATASET))?;
            ds
        }
        Err(e) => return Err(e),
    };
    check_dims(&ds, &mdp)?;
    prepare(cfg, out)?;
    let base = cfg.learner_config(&mdp, &cfg.build_behavior(&mdp)?)?;
    let cells = sweep_cells(cfg);
    let cell_dir = out.join(artifacts::SWEEP_CELLS);
    std::fs::create_dir_all(&cell_dir)?;

    let run_cell = |(i, cell): (usize, &SweepCell)| -> CliResult<Vec<String>> {
        let mut pc = cfg.penalty.clone();
        pc.alpha = cell.alpha;
        pc.tau = cell.tau;
        if let Some(c) = cell.tau_over_rho {
            pc.tau_over_rho = c;
        }
        pc.c_min = cell.c_min;
        pc.epsilon = cell.epsilon;
        pc.zeta = cell.zeta;
        let learner = LearnerConfig { penalty: pc.to_core()?, ..base.clone() };
        let agent = train(&ds, &learner)?;
        write_history_csv(&agent.history, artifacts::create(&cell_dir, &format!("cell_{i:04}.csv"))?)?;
        let report = measure_bias(&agent, &mdp, cfg.analysis.n_rollouts, cfg.seed)?;
        let last = agent.history.last();
        let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        Ok(vec![
            i.to_string(),
            agent.mode.name().to_string(),
            cell.alpha.to_string(),
            num(cell.tau_over_rho),
            agent.tau.to_string(),
            cell.c_min.to_string(),
            cell.epsilon.to_string(),
            cell.zeta.to_string(),
            agent.status.label().to_string(),
            agent.history.len().to_string(),
            num(last.map(|h| h.loss)),
            num(last.map(|h| h.mean_f)),
            num(last.map(|h| h.mean_w)),
            report.mean_bias.to_string(),
            report.squared_bias.to_string(),
        ])
    };
    let rows = cells.par_iter().enumerate().map(run_cell).collect::<CliResult<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(artifacts::create(out, artifacts::SWEEP)?);
    w.write_record(SWEEP_COLUMNS)?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    println!("sweep: {} cells written to {}", rows.len(), out.join(artifacts::SWEEP).display());
    Ok(exit::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grid_crosses_in_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.alpha = vec![1.0, 2.0];
        cfg.sweep.tau_over_rho = vec![0.5, 1.0, 3.0];
        cfg.sweep.zeta = vec![1.0, 4.0];
        let cells = sweep_cells(&cfg);
        assert_eq!(cells.len(), 12);
        assert_eq!((cells[0].alpha, cells[0].tau_over_rho, cells[0].zeta), (1.0, Some(0.5), 1.0));
        assert_eq!((cells[1].alpha, cells[1].tau_over_rho, cells[1].zeta), (1.0, Some(0.5), 4.0));
        assert_eq!(cells[11].alpha, 2.0);
        assert!(cells.iter().all(|c| c.c_min == cfg.penalty.c_min && c.tau.is_none()));
    }

    #[test]
    fn empty_tau_grid_keeps_absolute_tau() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.tau_over_rho.clear();
        cfg.penalty.tau = Some(-0.7);
        let cells = sweep_cells(&cfg);
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].tau, cells[0].tau_over_rho), (Some(-0.7), None));
    }
}
