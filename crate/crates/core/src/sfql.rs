//! Successor-feature Q-learning (SFQL).
//!
//! A learner keeps ψ(s, a) ∈ R^d and acts greedily on Q(s, a) = ψ(s, a) · w.
//! Because Q is linear in w, the same successor features can be re-scored
//! under any other weight vector without retraining.

use std::borrow::Cow;
use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mmdp::{Environment, JointAction, ObsEncoding, ObsKey, Policy, Rng64};
use crate::vector::{FeatureVector, WeightVector};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Anything that stores successor features per (observation, action).
pub trait SfApproximator {
    fn feature_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// `n_actions * feature_dim` values, action-major.
    fn psi_row(&self, key: &ObsKey) -> Cow<'_, [f64]>;
    /// Moves ψ(key, action) toward `target` by step size `alpha`.
    fn td_update(&mut self, key: &ObsKey, action: usize, target: &[f64], alpha: f64);

    fn q_values(&self, key: &ObsKey, w: &WeightVector) -> Vec<f64> {
        let d = self.feature_dim();
        self.psi_row(key).chunks(d).map(|psi| w.dot(psi)).collect()
    }
}

/// Tabular successor features keyed by encoded observation. Unseen keys
/// read as the zero vector.
///
/// A joint table stores one row of `n_actions * dim` values per key. A
/// factored table (`segment = Some(n)`) stores ψ_k in its own table keyed by
/// bytes `[k*n, (k+1)*n)` of the observation plus any shared tail after the
/// last segment, so ψ_k generalizes across everything the other segments
/// describe.
#[derive(Clone, Debug, PartialEq)]
pub struct SfTable {
    dim: usize,
    n_actions: usize,
    gamma: f64,
    segment: Option<usize>,
    rows: HashMap<ObsKey, Vec<f64>>,
    zeros: Vec<f64>,
}

impl SfTable {
    pub fn new(dim: usize, n_actions: usize, gamma: f64) -> Self {
        SfTable { dim, n_actions, gamma, segment: None, rows: HashMap::new(), zeros: vec![0.0; dim * n_actions] }
    }

    pub fn factored(dim: usize, n_actions: usize, gamma: f64, segment: usize) -> Self {
        SfTable { segment: Some(segment), zeros: vec![0.0; n_actions], ..SfTable::new(dim, n_actions, gamma) }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn segment(&self) -> Option<usize> {
        self.segment
    }

    /// Values per stored row.
    pub fn row_width(&self) -> usize {
        self.zeros.len()
    }

    /// Stored rows (joint keys, or one per feature and sub-key).
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn sub_key(&self, key: &ObsKey, k: usize, seg: usize) -> ObsKey {
        let bytes = &key.0;
        let cut = (self.dim * seg).min(bytes.len());
        let lo = (k * seg).min(cut);
        let hi = ((k + 1) * seg).min(cut);
        let mut sub = Vec::with_capacity(1 + seg + bytes.len() - cut);
        sub.push(k as u8);
        sub.extend_from_slice(&bytes[lo..hi]);
        sub.extend_from_slice(&bytes[cut..]);
        ObsKey(sub)
    }

    /// ψ(key, ·), action-major.
    pub fn row(&self, key: &ObsKey) -> Cow<'_, [f64]> {
        match self.segment {
            None => Cow::Borrowed(self.rows.get(key).map_or(&self.zeros, Vec::as_slice)),
            Some(seg) => {
                let mut out = vec![0.0; self.dim * self.n_actions];
                for k in 0..self.dim {
                    if let Some(r) = self.rows.get(&self.sub_key(key, k, seg)) {
                        for (a, v) in r.iter().enumerate() {
                            out[a * self.dim + k] = *v;
                        }
                    }
                }
                Cow::Owned(out)
            }
        }
    }

    pub fn psi(&self, key: &ObsKey, action: usize) -> Vec<f64> {
        self.row(key)[action * self.dim..(action + 1) * self.dim].to_vec()
    }

    /// Whether every value of `key` comes from stored rows.
    pub fn contains(&self, key: &ObsKey) -> bool {
        match self.segment {
            None => self.rows.contains_key(key),
            Some(seg) => (0..self.dim).all(|k| self.rows.contains_key(&self.sub_key(key, k, seg))),
        }
    }

    fn stored_mut(&mut self, stored: &ObsKey) -> &mut Vec<f64> {
        if !self.rows.contains_key(stored) {
            self.rows.insert(stored.clone(), self.zeros.clone());
        }
        self.rows.get_mut(stored).expect("inserted above")
    }

    /// Materializes zero rows for `key`.
    pub fn touch(&mut self, key: &ObsKey) {
        match self.segment {
            None => {
                self.stored_mut(key);
            }
            Some(seg) => {
                for k in 0..self.dim {
                    let sub = self.sub_key(key, k, seg);
                    self.stored_mut(&sub);
                }
            }
        }
    }

    /// Inserts a stored row as returned by [`SfTable::sorted_rows`].
    pub fn insert_row(&mut self, key: ObsKey, row: Vec<f64>) -> Result<()> {
        if row.len() != self.row_width() {
            return Err(Error::input(format!("SF row has {} values, expected {}", row.len(), self.row_width())));
        }
        self.rows.insert(key, row);
        Ok(())
    }

    /// Stored rows in key order, for deterministic serialization.
    pub fn sorted_rows(&self) -> Vec<(&ObsKey, &[f64])> {
        let mut rows: Vec<_> = self.rows.iter().map(|(k, v)| (k, v.as_slice())).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows
    }

    pub fn keys(&self) -> impl Iterator<Item = &ObsKey> {
        self.rows.keys()
    }

    pub fn is_all_zero(&self) -> bool {
        self.rows.values().all(|r| r.iter().all(|&v| v == 0.0))
    }

    pub fn greedy_action(&self, key: &ObsKey, w: &WeightVector) -> usize {
        argmax_lowest(&SfApproximator::q_values(self, key, w))
    }
}

impl SfApproximator for SfTable {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn psi_row(&self, key: &ObsKey) -> Cow<'_, [f64]> {
        self.row(key)
    }

    fn td_update(&mut self, key: &ObsKey, action: usize, target: &[f64], alpha: f64) {
        let d = self.dim;
        match self.segment {
            None => {
                let psi = &mut self.stored_mut(key)[action * d..(action + 1) * d];
                for (p, t) in psi.iter_mut().zip(target) {
                    *p += alpha * (t - *p);
                }
            }
            Some(seg) => {
                for (k, t) in target.iter().enumerate() {
                    let sub = self.sub_key(key, k, seg);
                    let p = &mut self.stored_mut(&sub)[action];
                    *p += alpha * (t - *p);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfHyperparams {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub total_timesteps: u64,
    /// Transitions buffered before their updates are applied.
    pub batch_size: usize,
    pub seed: u64,
    /// One table per feature dimension, keyed by that feature's segment of
    /// the observation. Needs an encoding with a factor layout.
    pub factored: bool,
}

impl Default for SfHyperparams {
    fn default() -> Self {
        SfHyperparams {
            learning_rate: 0.1,
            epsilon: 0.1,
            gamma: 0.95,
            total_timesteps: 200_000,
            batch_size: 1,
            seed: 0,
            factored: false,
        }
    }
}

impl SfHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be a non-negative finite number"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Short content hash recorded in library metadata.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyperparameters serialize");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Greedy policy over a successor-feature table.
#[derive(Clone, Debug, PartialEq)]
pub struct SfLearnerPolicy {
    pub sf: SfTable,
    pub task_weight: WeightVector,
    pub encoding: ObsEncoding,
}

impl SfLearnerPolicy {
    pub fn greedy_action(&self, key: &ObsKey) -> usize {
        self.sf.greedy_action(key, &self.task_weight)
    }

    pub fn q_values(&self, key: &ObsKey, weight: &WeightVector) -> Vec<f64> {
        q_values(self, key, weight)
    }
}

impl<E: Environment> Policy<E> for SfLearnerPolicy {
    fn act(&self, env: &E, state: &E::State, agent: usize, _: &mut Rng64) -> usize {
        self.greedy_action(&env.encode(state, agent, self.encoding))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// ψ(s, ·) · weight for every action.
pub fn q_values(policy: &SfLearnerPolicy, key: &ObsKey, weight: &WeightVector) -> Vec<f64> {
    SfApproximator::q_values(&policy.sf, key, weight)
}

/// One SF update as applied by the trainer.
#[derive(Clone, Debug)]
pub struct SfUpdate {
    pub key: ObsKey,
    pub action: usize,
    pub features: FeatureVector,
    pub next_key: ObsKey,
    pub bootstrap: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub episodes: u64,
    /// Episodes started with each team.
    pub team_draws: Vec<u64>,
}

/// Trains a learner (slot 0) against one team of teammates.
pub fn sfql_train<E: Environment>(
    env: &E,
    teammates: &[&dyn Policy<E>],
    task_weight: &WeightVector,
    hp: &SfHyperparams,
    encoding: ObsEncoding,
    rng: &mut Rng64,
) -> Result<(SfLearnerPolicy, TrainReport)> {
    sfql_train_teams(env, &[teammates.to_vec()], task_weight, hp, encoding, rng, None)
}

/// Trains against several teams; each episode draws its team uniformly.
/// `observer` sees every update in the order it is applied.
pub fn sfql_train_teams<E: Environment>(
    env: &E,
    teams: &[Vec<&dyn Policy<E>>],
    task_weight: &WeightVector,
    hp: &SfHyperparams,
    encoding: ObsEncoding,
    rng: &mut Rng64,
    mut observer: Option<&mut dyn FnMut(&SfUpdate)>,
) -> Result<(SfLearnerPolicy, TrainReport)> {
    hp.validate()?;
    if task_weight.len() != env.feature_dim() {
        return Err(Error::config(format!(
            "task weight has dimension {}, environment features have {}",
            task_weight.len(),
            env.feature_dim()
        )));
    }
    if teams.is_empty() {
        return Err(Error::config("at least one team is required for training"));
    }
    for team in teams {
        if team.len() + 1 != env.n_agents() {
            return Err(Error::config(format!(
                "{} teammates supplied for a {}-agent environment",
                team.len(),
                env.n_agents()
            )));
        }
    }
    let mut table = if hp.factored {
        let seg = env
            .factor_segment(encoding)
            .ok_or_else(|| Error::config(format!("encoding {encoding:?} has no factor layout")))?;
        SfTable::factored(env.feature_dim(), env.n_actions(), hp.gamma, seg)
    } else {
        SfTable::new(env.feature_dim(), env.n_actions(), hp.gamma)
    };
    let mut report = TrainReport { team_draws: vec![0; teams.len()], ..Default::default() };
    let mut buffer: Vec<SfUpdate> = Vec::with_capacity(hp.batch_size);
    let n_actions = env.n_actions();
    let mut actions = vec![0usize; env.n_agents()];
    while report.steps < hp.total_timesteps {
        let team = if teams.len() == 1 { 0 } else { rng.gen_range(0..teams.len()) };
        report.team_draws[team] += 1;
        report.episodes += 1;
        let mut state = env.reset(rng)?;
        while !env.is_terminal(&state) && report.steps < hp.total_timesteps {
            let key = env.encode(&state, 0, encoding);
            actions[0] = if rng.gen::<f64>() < hp.epsilon {
                rng.gen_range(0..n_actions)
            } else {
                table.greedy_action(&key, task_weight)
            };
            for (slot, mate) in teams[team].iter().enumerate() {
                actions[slot + 1] = mate.act(env, &state, slot + 1, rng);
            }
            let out = env.step(&state, &JointAction(actions.clone()))?;
            let update = SfUpdate {
                next_key: env.encode(&out.next_state, 0, encoding),
                key,
                action: actions[0],
                bootstrap: out.bootstraps(),
                features: out.features,
            };
            buffer.push(update);
            if buffer.len() >= hp.batch_size {
                for u in buffer.drain(..) {
                    apply_update(&mut table, &u, task_weight, hp.gamma, hp.learning_rate);
                    if let Some(obs) = observer.as_mut() {
                        obs(&u);
                    }
                }
            }
            report.steps += 1;
            state = out.next_state;
        }
    }
    for u in buffer.drain(..) {
        apply_update(&mut table, &u, task_weight, hp.gamma, hp.learning_rate);
        if let Some(obs) = observer.as_mut() {
            obs(&u);
        }
    }
    Ok((SfLearnerPolicy { sf: table, task_weight: task_weight.clone(), encoding }, report))
}

/// ψ(s,a) ← ψ(s,a) + α[φ + γ ψ(s′, a*) − ψ(s,a)], a* = argmax_b ψ(s′,b)·w.
pub fn apply_update<A: SfApproximator>(approx: &mut A, u: &SfUpdate, w: &WeightVector, gamma: f64, alpha: f64) {
    let mut target = u.features.0.clone();
    if u.bootstrap {
        let d = approx.feature_dim();
        let next = approx.psi_row(&u.next_key);
        let best = argmax_lowest(&next.chunks(d).map(|p| w.dot(p)).collect::<Vec<_>>());
        for (t, p) in target.iter_mut().zip(&next[best * d..(best + 1) * d]) {
            *t += gamma * p;
        }
    }
    approx.td_update(&u.key, u.action, &target, alpha);
}

/// One edge of an enumerated deterministic MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub features: FeatureVector,
    pub next: usize,
    pub bootstrap: bool,
}

/// Reachable learner-observation graph of a deterministic ad hoc team.
#[derive(Clone, Debug)]
pub struct EnumeratedMdp {
    pub keys: Vec<ObsKey>,
    pub index: HashMap<ObsKey, usize>,
    /// Per state, one edge per learner action; empty for terminal states.
    pub edges: Vec<Vec<Edge>>,
}

impl EnumeratedMdp {
    pub fn n_states(&self) -> usize {
        self.keys.len()
    }
}

/// Breadth-first enumeration from `starts`, learner in slot 0. Requires a
/// deterministic environment and deterministic teammates, and a horizon long
/// enough never to be reached.
pub fn enumerate_mdp<E: Environment>(
    env: &E,
    starts: &[E::State],
    teammates: &[&dyn Policy<E>],
    encoding: ObsEncoding,
) -> Result<EnumeratedMdp> {
    if !env.deterministic() || teammates.iter().any(|t| !t.is_deterministic()) {
        return Err(Error::Capability("exhaustive enumeration needs deterministic dynamics and teammates".into()));
    }
    if teammates.len() + 1 != env.n_agents() {
        return Err(Error::config("teammate count does not match the environment"));
    }
    let mut mdp = EnumeratedMdp { keys: Vec::new(), index: HashMap::new(), edges: Vec::new() };
    let mut queue = VecDeque::new();
    let mut dummy = <Rng64 as rand::SeedableRng>::seed_from_u64(0);
    for s in starts {
        let key = env.encode(s, 0, encoding);
        if !mdp.index.contains_key(&key) {
            mdp.index.insert(key.clone(), mdp.keys.len());
            mdp.keys.push(key);
            mdp.edges.push(Vec::new());
            queue.push_back((mdp.keys.len() - 1, s.clone()));
        }
    }
    while let Some((idx, state)) = queue.pop_front() {
        if env.is_terminal(&state) {
            continue;
        }
        let mut mates: Vec<usize> = vec![0; env.n_agents()];
        for (slot, m) in teammates.iter().enumerate() {
            mates[slot + 1] = m.act(env, &state, slot + 1, &mut dummy);
        }
        let mut edges = Vec::with_capacity(env.n_actions());
        for a in 0..env.n_actions() {
            mates[0] = a;
            let out = env.step(&state, &JointAction(mates.clone()))?;
            if out.truncated {
                return Err(Error::config("horizon reached during enumeration; raise the horizon"));
            }
            let key = env.encode(&out.next_state, 0, encoding);
            let next = match mdp.index.get(&key) {
                Some(&i) => i,
                None => {
                    let i = mdp.keys.len();
                    mdp.index.insert(key.clone(), i);
                    mdp.keys.push(key);
                    mdp.edges.push(Vec::new());
                    queue.push_back((i, out.next_state.clone()));
                    i
                }
            };
            let bootstrap = out.bootstraps();
            edges.push(Edge { features: out.features, next, bootstrap });
        }
        mdp.edges[idx] = edges;
    }
    Ok(mdp)
}

/// Exhaustive-sweep SFQL: repeatedly applies the SF update with step size
/// `alpha` to every (state, action) of `mdp` until the largest change falls
/// below `tol`. Returns the policy and the number of sweeps used.
#[allow(clippy::too_many_arguments)]
pub fn sfql_sweep(
    mdp: &EnumeratedMdp,
    n_actions: usize,
    task_weight: &WeightVector,
    gamma: f64,
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
    encoding: ObsEncoding,
) -> Result<(SfLearnerPolicy, usize)> {
    let d = task_weight.len();
    let mut table = SfTable::new(d, n_actions, gamma);
    for k in &mdp.keys {
        table.touch(k);
    }
    for sweep in 1..=max_sweeps {
        let mut change: f64 = 0.0;
        for (s, edges) in mdp.edges.iter().enumerate() {
            for (a, e) in edges.iter().enumerate() {
                let u = SfUpdate {
                    key: mdp.keys[s].clone(),
                    action: a,
                    features: e.features.clone(),
                    next_key: mdp.keys[e.next].clone(),
                    bootstrap: e.bootstrap,
                };
                let before = table.psi(&u.key, a);
                apply_update(&mut table, &u, task_weight, gamma, alpha);
                let after = table.psi(&u.key, a);
                for (x, y) in before.iter().zip(&after) {
                    change = change.max((x - y).abs());
                }
            }
        }
        if change < tol {
            return Ok((SfLearnerPolicy { sf: table, task_weight: task_weight.clone(), encoding }, sweep));
        }
    }
    Err(Error::Invariant(format!("SF sweep did not converge in {max_sweeps} sweeps")))
}

/// max over (s, a) of ‖ψ(s,a) − (φ + γ ψ(s′, a*))‖∞.
pub fn sf_bellman_residual(policy: &SfLearnerPolicy, mdp: &EnumeratedMdp) -> f64 {
    let d = policy.task_weight.len();
    let gamma = policy.sf.gamma();
    let mut worst: f64 = 0.0;
    for (s, edges) in mdp.edges.iter().enumerate() {
        for (a, e) in edges.iter().enumerate() {
            let psi = policy.sf.psi(&mdp.keys[s], a);
            let next = &mdp.keys[e.next];
            let best = policy.greedy_action(next);
            let next_psi = policy.sf.psi(next, best);
            for k in 0..d {
                let boot = if e.bootstrap { gamma * next_psi[k] } else { 0.0 };
                worst = worst.max((psi[k] - (e.features[k] + boot)).abs());
            }
        }
    }
    worst
}
