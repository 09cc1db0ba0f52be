//! Finite MDPs, tabular policies and Q tables, exact policy evaluation,
//! trajectory sampling and the two benchmark environment families.
//!
//! Transition rows are stored sparsely (only non-zero successors) so the
//! discretized pendulum with thousands of state-action pairs stays cheap to
//! sweep. Every oracle in the crate is computed from these tensors.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{shape, Error, Result};

pub(crate) const PROB_TOL: f64 = 1e-12;

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws an index from a dense probability row.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn sample_sparse<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(s, p) in row {
        acc += p;
        if u < acc {
            return s;
        }
    }
    row.last().map(|&(s, _)| s).unwrap_or(0)
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Config(format!("{what}: negative or non-finite probability")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

/// Finite MDP with explicit transition and reward tensors.
///
/// Reads of the transition or reward model through the public API bump an
/// audit counter, so tests can prove that a training run never touched the
/// generator after the dataset was drawn.
#[derive(Debug)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    discount: f64,
    initial: Vec<f64>,
    reward_bound: f64,
    state_coords: Option<Vec<Vec<f64>>>,
    action_values: Vec<f64>,
    model_reads: AtomicU64,
}

impl Clone for Mdp {
    fn clone(&self) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transitions: self.transitions.clone(),
            reward: self.reward.clone(),
            discount: self.discount,
            initial: self.initial.clone(),
            reward_bound: self.reward_bound,
            state_coords: self.state_coords.clone(),
            action_values: self.action_values.clone(),
            model_reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Mdp {
    fn eq(&self, other: &Self) -> bool {
        self.n_states == other.n_states
            && self.n_actions == other.n_actions
            && self.transitions == other.transitions
            && self.reward == other.reward
            && self.discount == other.discount
            && self.initial == other.initial
            && self.reward_bound == other.reward_bound
            && self.state_coords == other.state_coords
            && self.action_values == other.action_values
    }
}

fn evenly_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl Mdp {
    /// Builds an MDP from a dense row-major `P[s][a][s']` tensor.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        transition: &[f64],
        reward: Vec<f64>,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states {
            return Err(shape(n_states * n_actions * n_states, transition.len()));
        }
        let rows = transition
            .chunks(n_states.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(s, &p)| (s, p))
                    .collect()
            })
            .collect();
        Self::from_sparse(n_states, n_actions, rows, reward, discount, initial)
    }

    /// Builds an MDP from sparse successor lists indexed by `s * n_actions + a`.
    pub fn from_sparse(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        reward: Vec<f64>,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config("MDP needs at least one state and one action".into()));
        }
        if transitions.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, transitions.len()));
        }
        if reward.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, reward.len()));
        }
        if initial.len() != n_states {
            return Err(shape(n_states, initial.len()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config(format!("discount {discount} outside [0, 1)")));
        }
        for (idx, row) in transitions.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Config(format!("transition row {idx} is empty")));
            }
            let mut sum = 0.0;
            for &(s, p) in row {
                if s >= n_states || !p.is_finite() || p < 0.0 {
                    return Err(Error::Config(format!("transition row {idx}: bad entry ({s}, {p})")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Config(format!("transition row {idx} sums to {sum}")));
            }
        }
        check_distribution(&initial, "initial state distribution")?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("non-finite reward".into()));
        }
        let reward_bound = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            reward,
            discount,
            initial,
            reward_bound,
            state_coords: None,
            action_values: evenly_spaced(-1.0, 1.0, n_actions),
            model_reads: AtomicU64::new(0),
        })
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config(format!("discount {discount} outside [0, 1)")));
        }
        self.discount = discount;
        Ok(self)
    }

    /// Declares a reward bound larger than the observed maximum.
    pub fn with_reward_bound(mut self, bound: f64) -> Result<Self> {
        let observed = self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if !(bound >= observed) {
            return Err(Error::Config(format!("reward bound {bound} below observed {observed}")));
        }
        self.reward_bound = bound;
        Ok(self)
    }

    /// Replaces the reward table; the bound is reset to the new maximum.
    pub fn with_rewards(mut self, reward: Vec<f64>) -> Result<Self> {
        if reward.len() != self.n_states * self.n_actions {
            return Err(shape(self.n_states * self.n_actions, reward.len()));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("non-finite reward".into()));
        }
        self.reward_bound = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        self.reward = reward;
        Ok(self)
    }

    pub fn with_state_coords(mut self, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != self.n_states {
            return Err(shape(self.n_states, coords.len()));
        }
        self.state_coords = Some(coords);
        Ok(self)
    }

    pub fn with_action_values(mut self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n_actions {
            return Err(shape(self.n_actions, values.len()));
        }
        self.action_values = values;
        Ok(self)
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        if initial.len() != self.n_states {
            return Err(shape(self.n_states, initial.len()));
        }
        check_distribution(&initial, "initial state distribution")?;
        self.initial = initial;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    /// Continuous embedding of each state, if the environment has one.
    pub fn state_coords(&self) -> Option<&[Vec<f64>]> {
        self.state_coords.as_deref()
    }

    /// Physical value of each discrete action (torque for the pendulum).
    pub fn action_values(&self) -> &[f64] {
        &self.action_values
    }

    /// Successor distribution of `(s, a)`. Audited.
    pub fn transition(&self, s: usize, a: usize) -> &[(usize, f64)] {
        self.touch();
        &self.transitions[s * self.n_actions + a]
    }

    /// `R(s, a)`. Audited.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.touch();
        self.reward[s * self.n_actions + a]
    }

    /// Number of audited model reads since construction or the last reset.
    pub fn model_reads(&self) -> u64 {
        self.model_reads.load(Ordering::Relaxed)
    }

    pub fn reset_audit(&self) {
        self.model_reads.store(0, Ordering::Relaxed);
    }

    pub(crate) fn touch(&self) {
        self.model_reads.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    pub(crate) fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Dense copy of `P[s][a][s']`, row-major. Audited.
    pub fn dense_transitions(&self) -> Vec<f64> {
        self.touch();
        let n = self.n_states;
        let mut out = vec![0.0; n * self.n_actions * n];
        for (idx, row) in self.transitions.iter().enumerate() {
            for &(s, p) in row {
                out[idx * n + s] += p;
            }
        }
        out
    }

    /// Row-major `R[s][a]`. Audited.
    pub fn rewards(&self) -> &[f64] {
        self.touch();
        &self.reward
    }

    pub(crate) fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(shape(
                format!("{}x{} policy", self.n_states, self.n_actions),
                format!("{}x{}", policy.n_states(), policy.n_actions()),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_q(&self, q: &QFunction) -> Result<()> {
        if q.n_states() != self.n_states || q.n_actions() != self.n_actions {
            return Err(shape(
                format!("{}x{} Q table", self.n_states, self.n_actions),
                format!("{}x{}", q.n_states(), q.n_actions()),
            ));
        }
        Ok(())
    }

    /// State-to-state matrix `P^π` and expected reward `R^π`.
    pub fn policy_matrices(&self, policy: &TabularPolicy) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_policy(policy)?;
        self.touch();
        let n = self.n_states;
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pi = policy.prob(s, a);
                if pi == 0.0 {
                    continue;
                }
                r[s] += pi * self.r(s, a);
                for &(s2, prob) in self.row(s, a) {
                    p[(s, s2)] += pi * prob;
                }
            }
        }
        Ok((p, r))
    }

    /// Serializes to the line-oriented text format (17 significant digits).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: f64| format!("{v:.16e}");
        let join = |vals: &mut dyn Iterator<Item = f64>| vals.map(fmt).collect::<Vec<_>>().join(" ");
        writeln!(out, "epq-mdp 1").unwrap();
        writeln!(out, "states {}", self.n_states).unwrap();
        writeln!(out, "actions {}", self.n_actions).unwrap();
        writeln!(out, "discount {}", fmt(self.discount)).unwrap();
        writeln!(out, "reward_bound {}", fmt(self.reward_bound)).unwrap();
        writeln!(out, "initial {}", join(&mut self.initial.iter().copied())).unwrap();
        writeln!(out, "action_values {}", join(&mut self.action_values.iter().copied())).unwrap();
        writeln!(out, "R {}", join(&mut self.reward.iter().copied())).unwrap();
        let n = self.n_states;
        for s in 0..n {
            for a in 0..self.n_actions {
                let mut dense = vec![0.0; n];
                for &(s2, p) in self.row(s, a) {
                    dense[s2] += p;
                }
                writeln!(out, "P {s} {a} {}", join(&mut dense.into_iter())).unwrap();
            }
        }
        if let Some(coords) = &self.state_coords {
            for (s, c) in coords.iter().enumerate() {
                writeln!(out, "coords {s} {}", join(&mut c.iter().copied())).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let parse_f = |line: usize, tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{tok:?}: {e}") })
        };
        let parse_u = |line: usize, tok: &str| -> Result<usize> {
            tok.parse::<usize>().map_err(|e| Error::Parse { line, msg: format!("{tok:?}: {e}") })
        };
        match lines.next() {
            Some((_, "epq-mdp 1")) => {}
            Some((_, other)) if other.starts_with("epq-mdp") => {
                return Err(Error::Format(format!("unsupported MDP file version: {other}")))
            }
            _ => return Err(Error::Format("missing epq-mdp header".into())),
        }
        let mut n_states = None;
        let mut n_actions = None;
        let mut discount = None;
        let mut bound = None;
        let mut initial = None;
        let mut action_values = None;
        let mut reward = None;
        let mut dense: Option<Vec<f64>> = None;
        let mut coords: Vec<Option<Vec<f64>>> = Vec::new();
        for (line, content) in lines {
            if content.is_empty() {
                continue;
            }
            let mut toks = content.split_whitespace();
            let key = toks.next().unwrap_or_default();
            let rest: Vec<&str> = toks.collect();
            let floats = |toks: &[&str]| toks.iter().map(|t| parse_f(line, t)).collect::<Result<Vec<_>>>();
            match key {
                "states" => n_states = Some(parse_u(line, rest.first().copied().unwrap_or(""))?),
                "actions" => n_actions = Some(parse_u(line, rest.first().copied().unwrap_or(""))?),
                "discount" => discount = Some(parse_f(line, rest.first().copied().unwrap_or(""))?),
                "reward_bound" => bound = Some(parse_f(line, rest.first().copied().unwrap_or(""))?),
                "initial" => initial = Some(floats(&rest)?),
                "action_values" => action_values = Some(floats(&rest)?),
                "R" => reward = Some(floats(&rest)?),
                "P" | "coords" => {
                    let (ns, na) = match (n_states, n_actions) {
                        (Some(ns), Some(na)) => (ns, na),
                        _ => return Err(Error::Parse { line, msg: "dimensions must precede rows".into() }),
                    };
                    if rest.is_empty() {
                        return Err(Error::Parse { line, msg: "missing index".into() });
                    }
                    let s = parse_u(line, rest[0])?;
                    if s >= ns {
                        return Err(Error::Parse { line, msg: format!("state {s} out of range") });
                    }
                    if key == "coords" {
                        coords.resize(ns, None);
                        coords[s] = Some(floats(&rest[1..])?);
                    } else {
                        if rest.len() != ns + 2 {
                            return Err(Error::Parse { line, msg: format!("expected {} values", ns) });
                        }
                        let a = parse_u(line, rest[1])?;
                        if a >= na {
                            return Err(Error::Parse { line, msg: format!("action {a} out of range") });
                        }
                        let buf = dense.get_or_insert_with(|| vec![f64::NAN; ns * na * ns]);
                        let vals = floats(&rest[2..])?;
                        let off = (s * na + a) * ns;
                        buf[off..off + ns].copy_from_slice(&vals);
                    }
                }
                other => return Err(Error::Parse { line, msg: format!("unknown key {other:?}") }),
            }
        }
        let missing = |what: &str| Error::Format(format!("MDP file is missing {what}"));
        let n_states = n_states.ok_or_else(|| missing("states"))?;
        let n_actions = n_actions.ok_or_else(|| missing("actions"))?;
        let dense = dense.ok_or_else(|| missing("P rows"))?;
        if dense.iter().any(|v| v.is_nan()) {
            return Err(missing("some P rows"));
        }
        let mut mdp = Self::from_dense(
            n_states,
            n_actions,
            &dense,
            reward.ok_or_else(|| missing("R"))?,
            discount.ok_or_else(|| missing("discount"))?,
            initial.ok_or_else(|| missing("initial"))?,
        )?;
        if let Some(b) = bound {
            mdp = mdp.with_reward_bound(b)?;
        }
        if let Some(v) = action_values {
            mdp = mdp.with_action_values(v)?;
        }
        if !coords.is_empty() {
            let coords = coords.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("some coords"))?;
            mdp = mdp.with_state_coords(coords)?;
        }
        Ok(mdp)
    }
}

/// Per-state action distribution `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, probs.len()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Config(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    /// Builds a policy from unnormalized non-negative row weights.
    pub fn from_weights(n_states: usize, n_actions: usize, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, weights.len()));
        }
        for (s, row) in weights.chunks_mut(n_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if !(total > 0.0) || row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::Config(format!("policy row {s} has no positive mass")));
            }
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { n_states, n_actions, probs: weights })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Replaces one row; the row must be a distribution.
    pub fn set_row(&mut self, s: usize, row: &[f64]) -> Result<()> {
        if row.len() != self.n_actions {
            return Err(shape(self.n_actions, row.len()));
        }
        check_distribution(row, &format!("policy row {s}"))?;
        self.probs[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(row);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }
}

/// Dense state-action value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn constant(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("Q table has non-finite entries".into()));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `V(s) = Σ_a π(a|s) Q(s, a)`.
    pub fn state_value(&self, policy: &TabularPolicy, s: usize) -> f64 {
        self.row(s).iter().zip(policy.row(s)).map(|(q, p)| q * p).sum()
    }

    pub fn state_values(&self, policy: &TabularPolicy) -> Vec<f64> {
        (0..self.n_states).map(|s| self.state_value(policy, s)).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &QFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// One recorded environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

/// Exact Bellman backup `(B^π Q)(s,a) = R(s,a) + γ Σ_{s'} P(s'|s,a) V_Q(s')`.
pub fn bellman_apply(mdp: &Mdp, policy: &TabularPolicy, q: &QFunction) -> Result<QFunction> {
    mdp.check_policy(policy)?;
    mdp.check_q(q)?;
    mdp.touch();
    let v = q.state_values(policy);
    let mut out = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp.row(s, a).iter().map(|&(s2, p)| p * v[s2]).sum();
            out.set(s, a, mdp.r(s, a) + mdp.discount * next);
        }
    }
    Ok(out)
}

/// Exact `V^π` from the linear system `(I − γ P^π) V = R^π`.
pub fn exact_v(mdp: &Mdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    if mdp.discount >= 1.0 {
        return Err(Error::Domain("policy evaluation needs discount < 1".into()));
    }
    let (p, r) = mdp.policy_matrices(policy)?;
    let n = mdp.n_states;
    let system = DMatrix::<f64>::identity(n, n) - p * mdp.discount;
    let v = system
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Domain("singular evaluation system".into()))?;
    Ok(v.iter().copied().collect())
}

/// Exact `Q^π`: solves for `V^π`, then `Q = R + γ P V^π`.
pub fn exact_q(mdp: &Mdp, policy: &TabularPolicy) -> Result<QFunction> {
    let v = exact_v(mdp, policy)?;
    let mut q = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp.row(s, a).iter().map(|&(s2, p)| p * v[s2]).sum();
            q.set(s, a, mdp.r(s, a) + mdp.discount * next);
        }
    }
    Ok(q)
}

/// `(I − γ P^π)^{-1}`.
pub fn resolvent(mdp: &Mdp, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    let (p, _) = mdp.policy_matrices(policy)?;
    let n = mdp.n_states;
    (DMatrix::<f64>::identity(n, n) - p * mdp.discount)
        .try_inverse()
        .ok_or_else(|| Error::Domain("I − γP^π is singular".into()))
}

fn rollout<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &TabularPolicy,
    start: usize,
    first_action: Option<usize>,
    horizon: usize,
    rng: &mut R,
    mut visit: impl FnMut(Step),
) {
    let mut s = start;
    for t in 0..horizon {
        let a = match (t, first_action) {
            (0, Some(a)) => a,
            _ => policy.sample(s, rng),
        };
        let next = sample_sparse(mdp.row(s, a), rng);
        visit(Step {
            state: s,
            action: a,
            reward: mdp.r(s, a),
            next_state: next,
            terminal: false,
        });
        s = next;
    }
}

/// Samples one episode of `horizon` steps from the initial distribution.
pub fn sample_episode(mdp: &Mdp, policy: &TabularPolicy, horizon: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = seeded_rng(seed);
    sample_episode_with(mdp, policy, horizon, &mut rng)
}

pub(crate) fn sample_episode_with<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    mdp.touch();
    let start = sample_index(&mdp.initial, rng);
    let mut steps = Vec::with_capacity(horizon);
    rollout(mdp, policy, start, None, horizon, rng, |st| steps.push(st));
    Ok(Trajectory { steps })
}

/// Monte-Carlo estimate of `Q^π(s, a)` from truncated rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_err: f64,
    /// `γ^H r_max / (1 − γ)`: worst-case bias from truncating at horizon `H`.
    pub truncation_bound: f64,
}

pub fn truncation_bound(mdp: &Mdp, horizon: usize) -> f64 {
    mdp.discount.powi(horizon as i32) * mdp.reward_bound / (1.0 - mdp.discount)
}

pub fn monte_carlo_q(
    mdp: &Mdp,
    policy: &TabularPolicy,
    state: usize,
    action: usize,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if action >= mdp.n_actions {
        return Err(Error::Config(format!("pair ({state}, {action}) out of range")));
    }
    monte_carlo(mdp, policy, state, Some(action), n_rollouts, horizon, seed)
}

/// Monte-Carlo estimate of `V^π(s)`; the first action is drawn from `π`.
pub fn monte_carlo_v(
    mdp: &Mdp,
    policy: &TabularPolicy,
    state: usize,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    monte_carlo(mdp, policy, state, None, n_rollouts, horizon, seed)
}

fn monte_carlo(
    mdp: &Mdp,
    policy: &TabularPolicy,
    state: usize,
    action: Option<usize>,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    mdp.check_policy(policy)?;
    if state >= mdp.n_states {
        return Err(Error::Config(format!("state {state} out of range")));
    }
    if n_rollouts == 0 || horizon == 0 {
        return Err(Error::Config("need at least one rollout of at least one step".into()));
    }
    mdp.touch();
    let mut rng = seeded_rng(seed);
    // Sums are shifted by the first return so identical returns average exactly.
    let mut shift = None;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_rollouts {
        let mut ret = 0.0;
        let mut disc = 1.0;
        rollout(mdp, policy, state, action, horizon, &mut rng, |st| {
            ret += disc * st.reward;
            disc *= mdp.discount;
        });
        let d = ret - *shift.get_or_insert(ret);
        sum += d;
        sum_sq += d * d;
    }
    let n = n_rollouts as f64;
    let mean_dev = sum / n;
    let mean = shift.unwrap_or(0.0) + mean_dev;
    let var = if n_rollouts > 1 {
        ((sum_sq - n * mean_dev * mean_dev) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_err: (var / n).sqrt(),
        truncation_bound: truncation_bound(mdp, horizon),
    })
}

/// Smallest horizon whose truncation bound is at most `tol`.
pub fn horizon_for(mdp: &Mdp, tol: f64) -> usize {
    if mdp.reward_bound == 0.0 || mdp.discount == 0.0 {
        return 1;
    }
    let ratio = tol * (1.0 - mdp.discount) / mdp.reward_bound;
    if ratio >= 1.0 {
        return 1;
    }
    (ratio.ln() / mdp.discount.ln()).ceil().max(1.0) as usize
}

/// Default discount used by the random-MDP generators.
pub const RANDOM_MDP_DISCOUNT: f64 = 0.9;

fn simplex_row<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

fn one_hot_coords(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|s| (0..n).map(|i| if i == s { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Random MDP: each `P[s][a]` row uniform on the simplex, rewards in `[−1, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, seed: u64) -> Result<Mdp> {
    if n_states < 1 || n_actions < 1 {
        return Err(Error::Config("random MDP needs n_states, n_actions >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let row = simplex_row(n_states, &mut rng);
        transitions.push(row.into_iter().enumerate().filter(|(_, p)| *p > 0.0).collect());
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Mdp::from_sparse(
        n_states,
        n_actions,
        transitions,
        reward,
        RANDOM_MDP_DISCOUNT,
        vec![1.0 / n_states as f64; n_states],
    )?
    .with_reward_bound(1.0)?
    .with_state_coords(one_hot_coords(n_states))
}

/// Random MDP where each `(s, a)` reaches only `branching` successors.
///
/// Different actions lead to different parts of the state space, which is
/// what makes value extrapolation across actions dangerous offline.
pub fn random_sparse_mdp(n_states: usize, n_actions: usize, branching: usize, seed: u64) -> Result<Mdp> {
    if n_states < 1 || n_actions < 1 || branching < 1 || branching > n_states {
        return Err(Error::Config("sparse MDP needs 1 <= branching <= n_states".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut transitions = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let mut succ = rand::seq::index::sample(&mut rng, n_states, branching).into_vec();
        succ.sort_unstable();
        let weights = simplex_row(branching, &mut rng);
        transitions.push(succ.into_iter().zip(weights).collect());
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Mdp::from_sparse(
        n_states,
        n_actions,
        transitions,
        reward,
        RANDOM_MDP_DISCOUNT,
        vec![1.0 / n_states as f64; n_states],
    )?
    .with_reward_bound(1.0)?
    .with_state_coords(one_hot_coords(n_states))
}

/// Constants of the classic pendulum swing-up task.
pub mod pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DISCOUNT: f64 = 0.95;

    pub fn angle_normalize(x: f64) -> f64 {
        (x + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
    }

    /// One Euler step of the continuous dynamics and its cost.
    pub fn step(theta: f64, theta_dot: f64, torque: f64) -> (f64, f64, f64) {
        let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
        let cost = angle_normalize(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
        let new_dot = (theta_dot
            + (3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u) * DT)
            .clamp(-MAX_SPEED, MAX_SPEED);
        let new_theta = theta + new_dot * DT;
        (new_theta, new_dot, cost)
    }
}

/// Bin layout of the discretized pendulum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumGrid {
    pub angle_bins: usize,
    pub velocity_bins: usize,
    pub action_bins: usize,
}

impl PendulumGrid {
    pub fn new(angle_bins: usize, velocity_bins: usize, action_bins: usize) -> Result<Self> {
        if angle_bins < 2 || velocity_bins < 2 || action_bins < 2 {
            return Err(Error::Config("pendulum bin counts must be >= 2".into()));
        }
        Ok(Self { angle_bins, velocity_bins, action_bins })
    }

    /// Angle bin centers start at −π (hanging) and step by 2π / n.
    pub fn angle(&self, i: usize) -> f64 {
        -std::f64::consts::PI + i as f64 * 2.0 * std::f64::consts::PI / self.angle_bins as f64
    }

    pub fn velocity(&self, j: usize) -> f64 {
        -pendulum::MAX_SPEED + j as f64 * 2.0 * pendulum::MAX_SPEED / (self.velocity_bins - 1) as f64
    }

    pub fn torque(&self, a: usize) -> f64 {
        -pendulum::MAX_TORQUE + a as f64 * 2.0 * pendulum::MAX_TORQUE / (self.action_bins - 1) as f64
    }

    pub fn state_index(&self, i: usize, j: usize) -> usize {
        i * self.velocity_bins + j
    }

    /// Nearest bin to a continuous state (angles wrap around).
    pub fn locate(&self, theta: f64, theta_dot: f64) -> usize {
        let width = 2.0 * std::f64::consts::PI / self.angle_bins as f64;
        let i = ((theta + std::f64::consts::PI) / width).round().rem_euclid(self.angle_bins as f64) as usize
            % self.angle_bins;
        let vw = 2.0 * pendulum::MAX_SPEED / (self.velocity_bins - 1) as f64;
        let j = ((theta_dot + pendulum::MAX_SPEED) / vw)
            .round()
            .clamp(0.0, (self.velocity_bins - 1) as f64) as usize;
        self.state_index(i, j)
    }

    /// The hanging-down, motionless state.
    pub fn hanging_state(&self) -> usize {
        self.locate(std::f64::consts::PI, 0.0)
    }

    /// Bin closest to upright and motionless (lowest index on ties).
    pub fn upright_state(&self) -> usize {
        let i = (0..self.angle_bins)
            .min_by(|&x, &y| {
                pendulum::angle_normalize(self.angle(x))
                    .abs()
                    .total_cmp(&pendulum::angle_normalize(self.angle(y)).abs())
            })
            .unwrap_or(0);
        self.locate(self.angle(i), 0.0)
    }

    pub fn zero_torque_action(&self) -> usize {
        (0..self.action_bins)
            .min_by(|&x, &y| self.torque(x).abs().total_cmp(&self.torque(y).abs()))
            .unwrap_or(0)
    }
}

/// Deterministic discretization of the pendulum; rewards are negative costs.
pub fn pendulum_mdp(angle_bins: usize, velocity_bins: usize, action_bins: usize) -> Result<Mdp> {
    let grid = PendulumGrid::new(angle_bins, velocity_bins, action_bins)?;
    let n_states = angle_bins * velocity_bins;
    let mut transitions = Vec::with_capacity(n_states * action_bins);
    let mut reward = Vec::with_capacity(n_states * action_bins);
    let mut coords = Vec::with_capacity(n_states);
    for i in 0..angle_bins {
        for j in 0..velocity_bins {
            let (theta, dot) = (grid.angle(i), grid.velocity(j));
            coords.push(vec![theta.cos(), theta.sin(), dot]);
            for a in 0..action_bins {
                let (nt, nd, cost) = pendulum::step(theta, dot, grid.torque(a));
                transitions.push(vec![(grid.locate(nt, nd), 1.0)]);
                reward.push(-cost);
            }
        }
    }
    let bound = std::f64::consts::PI.powi(2)
        + 0.1 * pendulum::MAX_SPEED.powi(2)
        + 0.001 * pendulum::MAX_TORQUE.powi(2);
    let mut initial = vec![0.0; n_states];
    initial[grid.hanging_state()] = 1.0;
    Mdp::from_sparse(n_states, action_bins, transitions, reward, pendulum::DISCOUNT, initial)?
        .with_reward_bound(bound)?
        .with_state_coords(coords)?
        .with_action_values((0..action_bins).map(|a| grid.torque(a)).collect())
}
