//! File names and round-trips of the per-run artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epq_core::dataset::{load_dataset, OfflineDataset};
use epq_core::learner::{RunStatus, TrainedAgent};
use epq_core::mdp::{QFunction, TabularPolicy};

use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.toml";
pub const DATASET: &str = "dataset.txt";
pub const ENVIRONMENT: &str = "environment.txt";
pub const Q_TABLE: &str = "q.csv";
pub const POLICY: &str = "policy.csv";
pub const AGENT: &str = "agent.toml";
pub const METRICS: &str = "metrics.csv";
pub const BIAS_STATES: &str = "bias_states.csv";
pub const BIAS_SUMMARY: &str = "bias_summary.csv";
pub const CERTIFICATE: &str = "certificate.csv";
pub const MARGINS: &str = "margins.csv";
pub const SCENARIO_INFO: &str = "scenario_info.csv";
pub const SCENARIO_ACTIONS: &str = "scenario_actions.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_CELLS: &str = "cells";

pub fn scenario_file(case: &str, method: &str) -> String {
    format!("scenario_{case}_{method}.csv")
}

pub fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn require(dir: &Path, name: &str, hint: &'static str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path, hint })
    }
}

pub fn read_dataset(dir: &Path) -> CliResult<OfflineDataset> {
    Ok(load_dataset(require(dir, DATASET, "run gen-data first")?)?)
}

/// Run metadata stored next to the Q table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub mode: String,
    pub alpha: f64,
    pub tau: f64,
    pub status: String,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
}

impl AgentMeta {
    pub fn of(agent: &TrainedAgent) -> Self {
        Self {
            mode: agent.mode.name().to_string(),
            alpha: agent.alpha,
            tau: agent.tau,
            status: agent.status.label().to_string(),
            steps: agent.history.len(),
            diverged_at: match agent.status {
                RunStatus::Diverged { step, .. } => Some(step),
                _ => None,
            },
        }
    }
}

pub fn write_agent(dir: &Path, agent: &TrainedAgent) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(dir, Q_TABLE)?);
    w.write_record(["state", "action", "q", "target_q"])?;
    for s in 0..agent.q.n_states() {
        for a in 0..agent.q.n_actions() {
            w.write_record([
                s.to_string(),
                a.to_string(),
                agent.q.get(s, a).to_string(),
                agent.target_q.get(s, a).to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(dir, POLICY)?);
    w.write_record(["state", "action", "prob"])?;
    for s in 0..agent.policy.n_states() {
        for a in 0..agent.policy.n_actions() {
            w.write_record([s.to_string(), a.to_string(), agent.policy.prob(s, a).to_string()])?;
        }
    }
    w.flush()?;
    let meta = toml::to_string(&AgentMeta::of(agent)).expect("agent metadata serializes");
    write_text(dir, AGENT, &meta)
}

/// Q table, target table, policy and metadata of a trained agent.
pub struct StoredAgent {
    pub q: QFunction,
    pub target_q: QFunction,
    pub policy: TabularPolicy,
    pub meta: AgentMeta,
}

fn bad(path: &Path, msg: impl ToString) -> CliError {
    CliError::BadArtifact { path: path.to_path_buf(), msg: msg.to_string() }
}

fn read_table(path: &Path, ns: usize, na: usize, columns: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut out = vec![vec![f64::NAN; ns * na]; columns];
    let mut seen = vec![false; ns * na];
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 + columns {
            return Err(bad(path, format!("expected {} fields, got {}", 2 + columns, rec.len())));
        }
        let idx = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(path, e));
        let (s, a) = (idx(0)?, idx(1)?);
        if s >= ns || a >= na {
            return Err(bad(path, format!("pair ({s}, {a}) out of range")));
        }
        for (c, col) in out.iter_mut().enumerate() {
            col[s * na + a] = rec[2 + c].parse::<f64>().map_err(|e| bad(path, e))?;
        }
        seen[s * na + a] = true;
    }
    if seen.iter().any(|x| !x) {
        return Err(bad(path, "table is missing pairs"));
    }
    Ok(out)
}

pub fn read_agent(dir: &Path, n_states: usize, n_actions: usize) -> CliResult<StoredAgent> {
    const HINT: &str = "run train first";
    let q_path = require(dir, Q_TABLE, HINT)?;
    let pi_path = require(dir, POLICY, HINT)?;
    let meta_path = require(dir, AGENT, HINT)?;
    let mut qs = read_table(&q_path, n_states, n_actions, 2)?;
    let target = qs.pop().expect("two columns");
    let q = qs.pop().expect("two columns");
    let probs = read_table(&pi_path, n_states, n_actions, 1)?.pop().expect("one column");
    let meta: AgentMeta = toml::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| bad(&meta_path, e))?;
    Ok(StoredAgent {
        q: QFunction::from_values(n_states, n_actions, q)?,
        target_q: QFunction::from_values(n_states, n_actions, target)?,
        policy: TabularPolicy::new(n_states, n_actions, probs)?,
        meta,
    })
}
