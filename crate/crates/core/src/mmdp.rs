//! The ad hoc MMDP: environment contract, policies, rollouts and returns.
//!
//! One agent slot is the learner; every other slot is a teammate following a
//! fixed policy. All agents observe `s_t`, commit actions, and the environment
//! resolves a single joint transition.

use std::fmt::Debug;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{FeatureVector, WeightVector};

pub type Rng64 = ChaCha8Rng;

/// Grid coordinate, row 0 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

/// Canonical byte encoding of one agent's observation; the key of every
/// tabular value function in the crate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObsKey(pub Vec<u8>);

impl ObsKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

/// How a state is turned into a learner observation key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsEncoding {
    /// Agent-centric toroidal channel stack, bit-packed.
    Toroidal,
    /// Full world state from the agent's slot (Markov; used for exact checks).
    Absolute,
    /// Clipped offsets to the nearest target of every feature slot.
    Nearest {
        radius: u8,
        #[serde(default)]
        teammates: bool,
    },
}

impl ObsEncoding {
    pub fn tag(&self) -> String {
        match self {
            ObsEncoding::Toroidal => "toroidal".into(),
            ObsEncoding::Absolute => "absolute".into(),
            ObsEncoding::Nearest { radius, teammates } => {
                format!("nearest-r{radius}{}", if *teammates { "-tm" } else { "" })
            }
        }
    }
}

/// One discrete action index per agent, in agent order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn with_action(&self, slot: usize, action: usize) -> JointAction {
        let mut a = self.0.clone();
        a[slot] = action;
        JointAction(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub reward: f64,
    pub features: FeatureVector,
    /// Per-agent attribution of `features`; sums to `features`.
    pub credit: Vec<FeatureVector>,
    /// Episode over (goal reached or horizon hit).
    pub terminal: bool,
    /// Ended only because the horizon was reached.
    pub truncated: bool,
}

impl<S> StepOutcome<S> {
    /// Whether a value target should bootstrap from the next state.
    pub fn bootstraps(&self) -> bool {
        !self.terminal || self.truncated
    }
}

/// The environment contract. Transitions are pure functions of
/// `(state, joint action)`; any randomness lives inside the state, which makes
/// cloning a state the fork operation used by counterfactual queries.
pub trait Environment: Send + Sync {
    type State: Clone + Debug + PartialEq + Send + Sync;

    fn id(&self) -> &'static str;
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn team_weight(&self) -> &WeightVector;
    fn horizon(&self) -> usize;
    fn default_encoding(&self) -> ObsEncoding;
    /// True when transitions consume no randomness.
    fn deterministic(&self) -> bool;
    fn can_fork(&self) -> bool {
        true
    }

    fn reset(&self, rng: &mut Rng64) -> Result<Self::State>;
    fn step(&self, state: &Self::State, joint: &JointAction) -> Result<StepOutcome<Self::State>>;
    fn is_terminal(&self, state: &Self::State) -> bool;
    fn step_count(&self, state: &Self::State) -> usize;
    fn encode(&self, state: &Self::State, agent: usize, enc: ObsEncoding) -> ObsKey;

    /// Bytes per feature when `enc` lays out one segment per feature
    /// dimension (followed by an optional shared tail); `None` otherwise.
    fn factor_segment(&self, _enc: ObsEncoding) -> Option<usize> {
        None
    }

    /// Features the counterfactual `joint` would have earned had the realized
    /// successor `next` been held fixed.
    fn frozen_features(
        &self,
        state: &Self::State,
        joint: &JointAction,
        next: &Self::State,
    ) -> Result<FeatureVector>;

    fn grid_size(&self) -> usize;
    fn agent_positions(&self, state: &Self::State) -> Vec<Cell>;
    /// `state` with `agent` moved to `cell`, or `None` if the cell is not free.
    fn with_agent_at(&self, state: &Self::State, agent: usize, cell: Cell) -> Option<Self::State>;

    fn check_joint(&self, joint: &JointAction) -> Result<()> {
        if joint.0.len() != self.n_agents() {
            return Err(Error::input(format!(
                "joint action has {} entries, environment has {} agents",
                joint.0.len(),
                self.n_agents()
            )));
        }
        if let Some(a) = joint.0.iter().find(|&&a| a >= self.n_actions()) {
            return Err(Error::input(format!(
                "action index {a} out of range (action space {})",
                self.n_actions()
            )));
        }
        Ok(())
    }
}

/// An individual agent policy.
pub trait Policy<E: Environment>: Send + Sync {
    fn act(&self, env: &E, state: &E::State, agent: usize, rng: &mut Rng64) -> usize;

    /// Action plus the library entry that produced it, for policies that
    /// select among several value functions.
    fn act_traced(
        &self,
        env: &E,
        state: &E::State,
        agent: usize,
        rng: &mut Rng64,
    ) -> (usize, Option<usize>) {
        (self.act(env, state, agent, rng), None)
    }

    /// Deterministic policies ignore `rng`.
    fn is_deterministic(&self) -> bool;
}

/// Always plays the same action.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy(pub usize);

impl<E: Environment> Policy<E> for ConstantPolicy {
    fn act(&self, _: &E, _: &E::State, _: usize, _: &mut Rng64) -> usize {
        self.0
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Uniformly random over the action set.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

impl<E: Environment> Policy<E> for UniformPolicy {
    fn act(&self, env: &E, _: &E::State, _: usize, rng: &mut Rng64) -> usize {
        use rand::Rng;
        rng.gen_range(0..env.n_actions())
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Definition of one ad hoc team.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdHocTeamSpec {
    pub env_id: String,
    pub learner_slot: usize,
    pub n_teammates: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl AdHocTeamSpec {
    pub fn validate<E: Environment>(&self, env: &E) -> Result<()> {
        if self.env_id != env.id() {
            return Err(Error::config(format!(
                "team targets environment `{}` but `{}` was supplied",
                self.env_id,
                env.id()
            )));
        }
        if self.n_teammates + 1 != env.n_agents() {
            return Err(Error::config(format!(
                "{} teammates for a {}-agent environment",
                self.n_teammates,
                env.n_agents()
            )));
        }
        if self.learner_slot >= env.n_agents() {
            return Err(Error::config("learner slot out of range"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: ObsKey,
    pub joint: JointAction,
    pub reward: f64,
    pub features: FeatureVector,
    pub credit: Vec<FeatureVector>,
    pub next_state: ObsKey,
    pub terminal: bool,
    pub truncated: bool,
}

/// A full trajectory record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub env_id: String,
    pub team_id: String,
    pub seed: u64,
    pub learner_slot: usize,
    pub transitions: Vec<Transition>,
    /// Library entry selected at each step, when the learner is a GPI policy.
    pub chosen_library_index: Vec<Option<usize>>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.reward)
    }

    /// Σ φ over the episode.
    pub fn feature_totals(&self) -> FeatureVector {
        let dim = self.transitions.first().map_or(0, |t| t.features.len());
        let mut total = FeatureVector::zeros(dim);
        for t in &self.transitions {
            total.add_assign(t.features.as_slice());
        }
        total
    }

    /// Σ φ credited to `agent` over the episode.
    pub fn credit_totals(&self, agent: usize) -> FeatureVector {
        let dim = self.transitions.first().map_or(0, |t| t.features.len());
        let mut total = FeatureVector::zeros(dim);
        for t in &self.transitions {
            total.add_assign(t.credit[agent].as_slice());
        }
        total
    }
}

/// Σ_t γ^t r_t over the log.
pub fn discounted_return(log: &EpisodeLog, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in log.rewards() {
        total += discount * r;
        discount *= gamma;
    }
    total
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub learner_slot: usize,
    pub horizon: usize,
    pub encoding: Option<ObsEncoding>,
    pub team_id: String,
    pub seed: u64,
    pub keep_states: bool,
}

impl RolloutOptions {
    pub fn new(horizon: usize) -> Self {
        RolloutOptions {
            learner_slot: 0,
            horizon,
            encoding: None,
            team_id: String::new(),
            seed: 0,
            keep_states: false,
        }
    }
}

/// A log plus, optionally, every visited state (`len + 1` entries).
#[derive(Clone, Debug)]
pub struct Trace<S> {
    pub log: EpisodeLog,
    pub states: Vec<S>,
}

/// Runs one episode from a fresh reset. Learner occupies slot 0.
pub fn rollout<E: Environment>(
    env: &E,
    learner: &dyn Policy<E>,
    teammates: &[&dyn Policy<E>],
    rng: &mut Rng64,
    horizon: usize,
) -> Result<EpisodeLog> {
    Ok(rollout_with(env, &RolloutOptions::new(horizon), learner, teammates, rng)?.log)
}

pub fn rollout_with<E: Environment>(
    env: &E,
    opts: &RolloutOptions,
    learner: &dyn Policy<E>,
    teammates: &[&dyn Policy<E>],
    rng: &mut Rng64,
) -> Result<Trace<E::State>> {
    if opts.horizon == 0 {
        return Err(Error::config("rollout horizon must be positive"));
    }
    if teammates.len() + 1 != env.n_agents() {
        return Err(Error::config(format!(
            "{} teammates supplied for a {}-agent environment",
            teammates.len(),
            env.n_agents()
        )));
    }
    if opts.learner_slot >= env.n_agents() {
        return Err(Error::config("learner slot out of range"));
    }
    let enc = opts.encoding.unwrap_or_else(|| env.default_encoding());
    let slot = opts.learner_slot;
    let mut state = env.reset(rng)?;
    let mut log = EpisodeLog {
        env_id: env.id().to_string(),
        team_id: opts.team_id.clone(),
        seed: opts.seed,
        learner_slot: slot,
        transitions: Vec::new(),
        chosen_library_index: Vec::new(),
    };
    let mut states = Vec::new();
    if opts.keep_states {
        states.push(state.clone());
    }
    let mut actions = vec![0usize; env.n_agents()];
    for _ in 0..opts.horizon {
        if env.is_terminal(&state) {
            break;
        }
        let mut mates = teammates.iter();
        let mut chosen = None;
        for (agent, a) in actions.iter_mut().enumerate() {
            if agent == slot {
                let (action, idx) = learner.act_traced(env, &state, agent, rng);
                *a = action;
                chosen = idx;
            } else {
                let p = mates.next().expect("teammate count checked above");
                *a = p.act(env, &state, agent, rng);
            }
        }
        let joint = JointAction(actions.clone());
        let key = env.encode(&state, slot, enc);
        let out = env.step(&state, &joint)?;
        let next_key = env.encode(&out.next_state, slot, enc);
        log.transitions.push(Transition {
            state: key,
            joint,
            reward: out.reward,
            features: out.features,
            credit: out.credit,
            next_state: next_key,
            terminal: out.terminal,
            truncated: out.truncated,
        });
        log.chosen_library_index.push(chosen);
        state = out.next_state;
        if opts.keep_states {
            states.push(state.clone());
        }
    }
    Ok(Trace { log, states })
}

/// Runs `episodes` independent episodes; episode `i` draws from the stream
/// derived from `(seed, path ++ [i])`, so the result is identical for every
/// `jobs` value.
#[allow(clippy::too_many_arguments)]
pub fn run_episodes<E: Environment>(
    env: &E,
    learner: &dyn Policy<E>,
    teammates: &[&dyn Policy<E>],
    episodes: usize,
    seed: u64,
    path: &[u64],
    opts: &RolloutOptions,
    jobs: usize,
) -> Result<Vec<EpisodeLog>> {
    crate::par::try_map_range(episodes, jobs, |i| {
        let mut full = path.to_vec();
        full.push(i as u64);
        let episode_seed = crate::seed::derive_seed(seed, &full);
        let mut rng = Rng64::seed_from_u64(episode_seed);
        let opts = RolloutOptions { seed: episode_seed, keep_states: false, ..opts.clone() };
        Ok(rollout_with(env, &opts, learner, teammates, &mut rng)?.log)
    })
}

/// Team reward of executing `joint` with the learner's action replaced by
/// `learner_action`, simulated from a clone of `state`.
pub fn counterfactual_step_reward<E: Environment>(
    env: &E,
    state: &E::State,
    joint: &JointAction,
    learner_slot: usize,
    learner_action: usize,
) -> Result<f64> {
    if !env.can_fork() {
        return Err(Error::Capability(format!(
            "environment `{}` cannot clone its state",
            env.id()
        )));
    }
    if env.is_terminal(state) {
        return Err(Error::state("counterfactual query on a terminal state"));
    }
    let fork = state.clone();
    let out = env.step(&fork, &joint.with_action(learner_slot, learner_action))?;
    Ok(out.reward)
}

/// One line of the trajectory stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub v: String,
    pub env: String,
    pub team: String,
    pub seed: u64,
    pub episode: usize,
    pub t: usize,
    pub learner_slot: usize,
    pub state: String,
    pub joint: Vec<usize>,
    pub reward: f64,
    pub features: Vec<f64>,
    pub credit: Vec<Vec<f64>>,
    pub next_state: String,
    pub terminal: bool,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
}

pub const LOG_SCHEMA: &str = "v1";

/// Writes logs as JSON lines, one transition per line.
pub fn write_logs<W: Write>(logs: &[EpisodeLog], mut w: W) -> Result<()> {
    for (episode, log) in logs.iter().enumerate() {
        for (t, tr) in log.transitions.iter().enumerate() {
            let rec = LogRecord {
                v: LOG_SCHEMA.into(),
                env: log.env_id.clone(),
                team: log.team_id.clone(),
                seed: log.seed,
                episode,
                t,
                learner_slot: log.learner_slot,
                state: tr.state.to_hex(),
                joint: tr.joint.0.clone(),
                reward: tr.reward,
                features: tr.features.0.clone(),
                credit: tr.credit.iter().map(|c| c.0.clone()).collect(),
                next_state: tr.next_state.to_hex(),
                terminal: tr.terminal,
                truncated: tr.truncated,
                chosen: log.chosen_library_index.get(t).copied().flatten(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a JSON-lines stream back into episode logs.
pub fn read_logs<R: BufRead>(r: R) -> Result<Vec<EpisodeLog>> {
    let mut logs: Vec<EpisodeLog> = Vec::new();
    let mut current = usize::MAX;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)?;
        if rec.v != LOG_SCHEMA {
            return Err(Error::input(format!("unsupported log schema `{}`", rec.v)));
        }
        let decode = |s: &str| {
            hex::decode(s)
                .map(ObsKey)
                .map_err(|e| Error::input(format!("bad state encoding: {e}")))
        };
        if rec.episode != current {
            current = rec.episode;
            logs.push(EpisodeLog {
                env_id: rec.env.clone(),
                team_id: rec.team.clone(),
                seed: rec.seed,
                learner_slot: rec.learner_slot,
                transitions: Vec::new(),
                chosen_library_index: Vec::new(),
            });
        }
        let log = logs.last_mut().expect("pushed above");
        log.transitions.push(Transition {
            state: decode(&rec.state)?,
            joint: JointAction(rec.joint),
            reward: rec.reward,
            features: FeatureVector(rec.features),
            credit: rec.credit.into_iter().map(FeatureVector).collect(),
            next_state: decode(&rec.next_state)?,
            terminal: rec.terminal,
            truncated: rec.truncated,
        });
        log.chosen_library_index.push(rec.chosen);
    }
    Ok(logs)
}
