//! Offline datasets: generation, per-transition discounted returns,
//! count-based behavior estimation and the on-disk record format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{shape, Error, Result};
use crate::mdp::{sample_episode_with, seeded_rng, Mdp, TabularPolicy};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub episode: usize,
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Fixed set of transitions; the only input a learner ever sees.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
    transitions: Vec<Transition>,
    returns: Option<Vec<f64>>,
}

impl OfflineDataset {
    /// Validates bounds, episode contiguity and within-episode chaining.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        let mut prev: Option<&Transition> = None;
        for (i, t) in transitions.iter().enumerate() {
            if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
                return Err(Error::Config(format!("transition {i} indexes outside {n_states}x{n_actions}")));
            }
            if !t.reward.is_finite() {
                return Err(Error::Config(format!("transition {i} has a non-finite reward")));
            }
            match prev {
                None if t.episode != 0 || t.step != 0 => {
                    return Err(Error::Config("first transition must be episode 0, step 0".into()))
                }
                Some(p) if t.episode == p.episode => {
                    if t.step != p.step + 1 || t.state != p.next_state || p.terminal {
                        return Err(Error::Config(format!("episode {} breaks at transition {i}", t.episode)));
                    }
                }
                Some(p) if t.episode != p.episode + 1 || t.step != 0 => {
                    return Err(Error::Config(format!("episode ids not contiguous at transition {i}")));
                }
                _ => {}
            }
            prev = Some(t);
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            seed,
            transitions,
            returns: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.transitions.last().map(|t| t.episode + 1).unwrap_or(0)
    }

    /// Per-transition `G_t`, if [`compute_returns`] has run.
    pub fn returns(&self) -> Option<&[f64]> {
        self.returns.as_deref()
    }

    /// Largest absolute reward in the data.
    pub fn reward_bound(&self) -> f64 {
        self.transitions.iter().fold(0.0_f64, |m, t| m.max(t.reward.abs()))
    }

    /// Fraction of state-action pairs with at least one transition.
    pub fn coverage(&self) -> f64 {
        let mut seen = vec![false; self.n_states * self.n_actions];
        for t in &self.transitions {
            seen[t.state * self.n_actions + t.action] = true;
        }
        seen.iter().filter(|&&b| b).count() as f64 / seen.len() as f64
    }

    /// `γ^H r_max / (1 − γ)` for the shortest episode: the worst truncation bias of `G_0`.
    pub fn truncation_bias_bound(&self) -> f64 {
        let mut shortest = usize::MAX;
        let mut len = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            len += 1;
            let last = self.transitions.get(i + 1).is_none_or(|n| n.episode != t.episode);
            if last {
                if !t.terminal {
                    shortest = shortest.min(len);
                }
                len = 0;
            }
        }
        if shortest == usize::MAX {
            return 0.0;
        }
        self.gamma.powi(shortest as i32) * self.reward_bound() / (1.0 - self.gamma)
    }

    /// Writes the dataset in the line-delimited record format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = String::new();
        writeln!(
            buf,
            "epq-dataset {DATASET_FORMAT_VERSION} {} {} {:.16e} {}",
            self.n_states, self.n_actions, self.gamma, self.seed
        )
        .unwrap();
        for t in &self.transitions {
            writeln!(
                buf,
                "{} {} {} {} {:.16e} {} {}",
                t.episode,
                t.step,
                t.state,
                t.action,
                t.reward,
                t.next_state,
                u8::from(t.terminal)
            )
            .unwrap();
        }
        writeln!(buf, "end {}", self.transitions.len()).unwrap();
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.first() != Some(&"epq-dataset") {
            return Err(Error::Format("missing epq-dataset header".into()));
        }
        if head.get(1) != Some(&"1") {
            return Err(Error::Format(format!(
                "dataset version {} not supported (expected {DATASET_FORMAT_VERSION})",
                head.get(1).unwrap_or(&"?")
            )));
        }
        if head.len() != 6 {
            return Err(Error::Parse { line: 1, msg: "header needs version, n_states, n_actions, gamma, seed".into() });
        }
        let p = |line: usize, tok: &str| -> Error { Error::Parse { line, msg: format!("bad field {tok:?}") } };
        let n_states: usize = head[2].parse().map_err(|_| p(1, head[2]))?;
        let n_actions: usize = head[3].parse().map_err(|_| p(1, head[3]))?;
        let gamma: f64 = head[4].parse().map_err(|_| p(1, head[4]))?;
        let seed: u64 = head[5].parse().map_err(|_| p(1, head[5]))?;

        let mut transitions = Vec::new();
        let mut finished = false;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if finished {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::Parse { line: line_no, msg: "data after end marker".into() });
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.first() == Some(&"end") {
                let count: usize = f.get(1).and_then(|c| c.parse().ok()).ok_or_else(|| p(line_no, &line))?;
                if count != transitions.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("end marker declares {count} records, found {}", transitions.len()),
                    });
                }
                finished = true;
                continue;
            }
            if f.len() != 7 {
                return Err(Error::Parse { line: line_no, msg: format!("expected 7 fields, found {}", f.len()) });
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|_| p(line_no, f[i]));
            let terminal = match f[6] {
                "0" => false,
                "1" => true,
                other => return Err(p(line_no, other)),
            };
            transitions.push(Transition {
                episode: u(0)?,
                step: u(1)?,
                state: u(2)?,
                action: u(3)?,
                reward: f[4].parse().map_err(|_| p(line_no, f[4]))?,
                next_state: u(5)?,
                terminal,
            });
        }
        if !finished {
            return Err(Error::Parse {
                line: transitions.len() + 2,
                msg: "file truncated before end marker".into(),
            });
        }
        Self::new(n_states, n_actions, gamma, seed, transitions)
    }
}

pub fn save_dataset(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    dataset.write_to(std::io::BufWriter::new(file))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    OfflineDataset::read_from(std::fs::File::open(path)?)
}

/// Rolls out `n_episodes` episodes of `behavior` in `mdp`.
pub fn generate_dataset(
    mdp: &Mdp,
    behavior: &TabularPolicy,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut transitions = Vec::with_capacity(n_episodes * horizon);
    for episode in 0..n_episodes {
        let traj = sample_episode_with(mdp, behavior, horizon, &mut rng)?;
        transitions.extend(traj.steps.iter().enumerate().map(|(step, st)| Transition {
            episode,
            step,
            state: st.state,
            action: st.action,
            reward: st.reward,
            next_state: st.next_state,
            terminal: st.terminal,
        }));
    }
    OfflineDataset::new(mdp.n_states(), mdp.n_actions(), mdp.discount(), seed, transitions)
}

/// Fills in `G_t = r_t + γ G_{t+1}` per episode (zero past the last step).
pub fn compute_returns(mut dataset: OfflineDataset) -> OfflineDataset {
    if dataset.returns.is_some() {
        return dataset;
    }
    let n = dataset.transitions.len();
    let mut returns = vec![0.0; n];
    let mut next = 0.0;
    for i in (0..n).rev() {
        let t = &dataset.transitions[i];
        let continues = dataset.transitions.get(i + 1).is_some_and(|n| n.episode == t.episode);
        if !continues || t.terminal {
            next = 0.0;
        }
        returns[i] = t.reward + dataset.gamma * next;
        next = returns[i];
    }
    dataset.returns = Some(returns);
    dataset
}

/// Empirical behavior policy `β̂(a|s) = N(s,a) / N(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEstimate {
    n_states: usize,
    n_actions: usize,
    counts: Vec<u64>,
    state_counts: Vec<u64>,
    floor: Option<f64>,
}

impl BehaviorEstimate {
    pub fn from_counts(n_states: usize, n_actions: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_states * n_actions {
            return Err(shape(n_states * n_actions, counts.len()));
        }
        let state_counts = counts.chunks(n_actions).map(|row| row.iter().sum()).collect();
        Ok(Self {
            n_states,
            n_actions,
            counts,
            state_counts,
            floor: None,
        })
    }

    /// Enables a probability floor for unsupported actions at visited states.
    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::Config(format!("floor {floor} outside (0, 1)")));
        }
        self.floor = Some(floor);
        Ok(self)
    }

    pub fn floor(&self) -> Option<f64> {
        self.floor
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.n_actions + a]
    }

    pub fn state_count(&self, s: usize) -> u64 {
        self.state_counts[s]
    }

    pub fn is_visited(&self, s: usize) -> bool {
        self.state_counts[s] > 0
    }

    pub fn supports(&self, s: usize, a: usize) -> bool {
        self.count(s, a) > 0
    }

    pub fn visited_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| self.is_visited(s))
    }

    /// `β̂(a|s)`; the floor (if enabled) replaces zero at visited states.
    pub fn prob(&self, s: usize, a: usize) -> Result<f64> {
        if !self.is_visited(s) {
            return Err(Error::Support { state: s, action: None });
        }
        let n = self.count(s, a);
        if n > 0 {
            return Ok(n as f64 / self.state_counts[s] as f64);
        }
        self.floor.ok_or(Error::Support { state: s, action: Some(a) })
    }

    pub fn log_prob(&self, s: usize, a: usize) -> Result<f64> {
        self.prob(s, a).map(f64::ln)
    }

    /// Exact empirical row (no floor); errors at unvisited states.
    pub fn row(&self, s: usize) -> Result<Vec<f64>> {
        if !self.is_visited(s) {
            return Err(Error::Support { state: s, action: None });
        }
        let total = self.state_counts[s] as f64;
        Ok((0..self.n_actions).map(|a| self.count(s, a) as f64 / total).collect())
    }

    /// Boolean support matrix, row-major.
    pub fn support_mask(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }
}

pub fn estimate_behavior(dataset: &OfflineDataset, n_states: usize, n_actions: usize) -> Result<BehaviorEstimate> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot estimate behavior from an empty dataset".into()));
    }
    if dataset.n_states() != n_states || dataset.n_actions() != n_actions {
        return Err(shape(
            format!("{n_states}x{n_actions}"),
            format!("{}x{}", dataset.n_states(), dataset.n_actions()),
        ));
    }
    let mut counts = vec![0u64; n_states * n_actions];
    for t in dataset.transitions() {
        counts[t.state * n_actions + t.action] += 1;
    }
    BehaviorEstimate::from_counts(n_states, n_actions, counts)
}

/// Count-based model `P̂`, `R̂` of the data.
///
/// Unsupported pairs self-loop onto their own state with zero reward, so a
/// state never acted in from the data is worth zero under any policy.
pub fn empirical_mdp(dataset: &OfflineDataset) -> Result<Mdp> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot build a model from an empty dataset".into()));
    }
    if dataset.transitions().iter().any(|t| t.terminal) {
        return Err(Error::Config("exact mode supports continuing tasks only".into()));
    }
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let mut next_counts = vec![std::collections::BTreeMap::<usize, u64>::new(); ns * na];
    let mut reward_sum = vec![0.0; ns * na];
    let mut pair_counts = vec![0u64; ns * na];
    let mut initial = vec![0.0; ns];
    for t in dataset.transitions() {
        let idx = t.state * na + t.action;
        *next_counts[idx].entry(t.next_state).or_default() += 1;
        reward_sum[idx] += t.reward;
        pair_counts[idx] += 1;
        if t.step == 0 {
            initial[t.state] += 1.0;
        }
    }
    let starts: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|p| *p /= starts);
    let mut transitions = Vec::with_capacity(ns * na);
    let mut reward = Vec::with_capacity(ns * na);
    for idx in 0..ns * na {
        let n = pair_counts[idx];
        if n == 0 {
            transitions.push(vec![(idx / na, 1.0)]);
            reward.push(0.0);
        } else {
            let row: Vec<(usize, f64)> = next_counts[idx].iter().map(|(&s, &c)| (s, c as f64 / n as f64)).collect();
            transitions.push(row);
            reward.push(reward_sum[idx] / n as f64);
        }
    }
    // Renormalize rows so they sum to one within the model tolerance.
    for row in &mut transitions {
        let sum: f64 = row.iter().map(|(_, p)| p).sum();
        row.iter_mut().for_each(|(_, p)| *p /= sum);
    }
    Mdp::from_sparse(ns, na, transitions, reward, dataset.gamma(), initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;

    fn tiny(rewards: &[f64], gamma: f64) -> OfflineDataset {
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition {
                episode: 0,
                step: i,
                state: 0,
                action: 0,
                reward: r,
                next_state: 0,
                terminal: false,
            })
            .collect();
        OfflineDataset::new(1, 2, gamma, 0, transitions).unwrap()
    }

    #[test]
    fn two_step_returns() {
        let ds = compute_returns(tiny(&[1.0, 1.0], 0.5));
        assert_eq!(ds.returns().unwrap(), &[1.5, 1.0]);
        let again = compute_returns(ds.clone());
        assert_eq!(again, ds);
        let zero = compute_returns(tiny(&[0.0, 0.0, 0.0], 0.9));
        assert!(zero.returns().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_episodes_rejected() {
        let mdp = random_mdp(3, 2, 0).unwrap();
        assert!(generate_dataset(&mdp, &TabularPolicy::uniform(3, 2), 0, 10, 1).is_err());
    }

    #[test]
    fn single_transition_behavior() {
        let t = Transition { episode: 0, step: 0, state: 0, action: 1, reward: 0.0, next_state: 1, terminal: false };
        let ds = OfflineDataset::new(2, 2, 0.9, 0, vec![t]).unwrap();
        let b = estimate_behavior(&ds, 2, 2).unwrap();
        assert_eq!(b.prob(0, 1).unwrap(), 1.0);
        assert_eq!(b.support_mask(), vec![false, true, false, false]);
        assert!(matches!(b.prob(0, 0), Err(Error::Support { state: 0, action: Some(0) })));
        assert!(matches!(b.prob(1, 0), Err(Error::Support { state: 1, action: None })));
        let floored = b.with_floor(1e-6).unwrap();
        assert_eq!(floored.prob(0, 0).unwrap(), 1e-6);
        assert!(floored.prob(1, 0).is_err());
    }

    #[test]
    fn count_ratio() {
        let b = BehaviorEstimate::from_counts(1, 2, vec![3, 1]).unwrap();
        assert_eq!(b.row(0).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn broken_episodes_rejected() {
        let mk = |episode, step, state, next_state| Transition {
            episode,
            step,
            state,
            action: 0,
            reward: 0.0,
            next_state,
            terminal: false,
        };
        assert!(OfflineDataset::new(3, 1, 0.9, 0, vec![mk(0, 0, 0, 1), mk(0, 1, 2, 0)]).is_err());
        assert!(OfflineDataset::new(3, 1, 0.9, 0, vec![mk(0, 0, 0, 1), mk(2, 0, 2, 0)]).is_err());
        assert!(OfflineDataset::new(3, 1, 0.9, 0, vec![mk(0, 0, 5, 1)]).is_err());
        assert!(OfflineDataset::new(3, 1, 0.9, 0, vec![mk(0, 0, 0, 1), mk(1, 0, 2, 0)]).is_ok());
    }

    #[test]
    fn round_trip_and_truncation() {
        let mdp = random_mdp(4, 3, 2).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(4, 3), 5, 7, 11).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(OfflineDataset::read_from(buf.as_slice()).unwrap(), ds);

        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(OfflineDataset::read_from(cut.as_bytes()), Err(Error::Parse { .. })));
        let lines: Vec<&str> = text.lines().collect();
        let no_end = lines[..lines.len() - 1].join("\n");
        assert!(matches!(OfflineDataset::read_from(no_end.as_bytes()), Err(Error::Parse { .. })));
        let bad_version = text.replacen("epq-dataset 1", "epq-dataset 2", 1);
        assert!(matches!(OfflineDataset::read_from(bad_version.as_bytes()), Err(Error::Format(_))));
        let bad_line = text.replacen("\n0 1 ", "\n0 x ", 1);
        match OfflineDataset::read_from(bad_line.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empirical_model_of_deterministic_chain() {
        let mk = |step, state, next_state, reward| Transition {
            episode: 0,
            step,
            state,
            action: 0,
            reward,
            next_state,
            terminal: false,
        };
        let ds = OfflineDataset::new(2, 2, 0.5, 0, vec![mk(0, 0, 1, 1.0), mk(1, 1, 0, 3.0), mk(2, 0, 1, 2.0)]).unwrap();
        let m = empirical_mdp(&ds).unwrap();
        assert_eq!(m.transition(0, 0), &[(1, 1.0)]);
        assert_eq!(m.reward(0, 0), 1.5);
        assert_eq!(m.transition(1, 1), &[(1, 1.0)]);
        assert_eq!(m.reward(1, 1), 0.0);
        assert_eq!(m.initial_dist(), &[1.0, 0.0]);
    }
}
