//! Learner difference rewards and their value functions.
//!
//! Δr = r(s, a, s′) − mean over learner actions b of r(s, ⟨a⁻, b⟩, ·), i.e.
//! the team reward minus what a uniformly random learner would have earned
//! with the teammates' actions held fixed. Two ways of turning Δr into a
//! per-policy value function are provided: a least-squares weight vector
//! w_Δr scored through the policy's successor features, and direct on-policy
//! TD(0) evaluation into a table.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::PolicyLibraryEntry;
use crate::mmdp::{Environment, JointAction, ObsKey, Policy, Rng64};
use crate::sfql::{q_values, SfLearnerPolicy};
use crate::vector::{FeatureVector, WeightVector};

/// Ridge added to the normal equations when the design is rank deficient.
pub const RIDGE: f64 = 1e-10;

/// How the counterfactual team reward is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualMode {
    /// Re-simulate the transition from a clone of `s`.
    #[default]
    Resimulate,
    /// Hold the realized successor fixed and ask which of its rewarded events
    /// the counterfactual joint action would have produced.
    FrozenNextState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrSample {
    pub features: FeatureVector,
    pub dr: f64,
}

/// Least-squares model Δr ≈ φ · w_Δr with fit diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrWeight {
    pub weights: WeightVector,
    pub residual_rms: f64,
    pub samples: usize,
    pub rank: usize,
    /// Ridge actually applied (0 for full-rank designs).
    pub ridge: f64,
    pub source_team_id: String,
}

/// Tabular Q^π_Δr from on-policy TD evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DrQTable {
    pub values: HashMap<ObsKey, Vec<f64>>,
    pub n_actions: usize,
    pub episodes_used: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub source_team_id: String,
}

impl DrQTable {
    pub fn new(n_actions: usize, alpha: f64, gamma: f64, source_team_id: impl Into<String>) -> Self {
        DrQTable {
            values: HashMap::new(),
            n_actions,
            episodes_used: 0,
            alpha,
            gamma,
            source_team_id: source_team_id.into(),
        }
    }

    pub fn get(&self, key: &ObsKey) -> Vec<f64> {
        self.values.get(key).cloned().unwrap_or_else(|| vec![0.0; self.n_actions])
    }

    fn value(&self, key: &ObsKey, action: usize) -> f64 {
        self.values.get(key).map_or(0.0, |v| v[action])
    }

    pub fn sorted_rows(&self) -> Vec<(&ObsKey, &Vec<f64>)> {
        let mut rows: Vec<_> = self.values.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows
    }
}

/// Mean team reward over all learner actions, teammates' actions fixed.
fn counterfactual_mean<E: Environment>(
    env: &E,
    state: &E::State,
    joint: &JointAction,
    next: &E::State,
    learner_slot: usize,
    mode: CounterfactualMode,
) -> Result<f64> {
    if !env.can_fork() {
        return Err(Error::Capability(format!("environment `{}` cannot clone its state", env.id())));
    }
    let n = env.n_actions();
    let w = env.team_weight();
    let mut total = 0.0;
    for b in 0..n {
        let cf = joint.with_action(learner_slot, b);
        total += match mode {
            CounterfactualMode::Resimulate => env.step(&state.clone(), &cf)?.reward,
            CounterfactualMode::FrozenNextState => env.frozen_features(state, &cf, next)?.reward(w),
        };
    }
    Ok(total / n as f64)
}

/// Learner difference reward for one realized transition `state --joint--> next`.
pub fn difference_reward<E: Environment>(
    env: &E,
    state: &E::State,
    joint: &JointAction,
    next: &E::State,
    realized_reward: f64,
    learner_slot: usize,
    mode: CounterfactualMode,
) -> Result<f64> {
    if env.is_terminal(state) {
        return Err(Error::state("difference reward requested on a terminal state"));
    }
    Ok(realized_reward - counterfactual_mean(env, state, joint, next, learner_slot, mode)?)
}

/// Transition stream of `learner` (slot 0) with fixed teammates, each step
/// annotated with its difference reward.
fn for_each_dr_step<E: Environment>(
    env: &E,
    learner: &SfLearnerPolicy,
    teammates: &[&dyn Policy<E>],
    episodes: usize,
    mode: CounterfactualMode,
    rng: &mut Rng64,
    mut visit: impl FnMut(&E::State, usize, &FeatureVector, f64, &E::State, bool),
) -> Result<()> {
    if teammates.len() + 1 != env.n_agents() {
        return Err(Error::config("teammate count does not match the environment"));
    }
    let mut actions = vec![0usize; env.n_agents()];
    for _ in 0..episodes {
        let mut state = env.reset(rng)?;
        while !env.is_terminal(&state) {
            actions[0] = learner.greedy_action(&env.encode(&state, 0, learner.encoding));
            for (slot, mate) in teammates.iter().enumerate() {
                actions[slot + 1] = mate.act(env, &state, slot + 1, rng);
            }
            let joint = JointAction(actions.clone());
            let out = env.step(&state, &joint)?;
            let dr = difference_reward(env, &state, &joint, &out.next_state, out.reward, 0, mode)?;
            visit(&state, actions[0], &out.features, dr, &out.next_state, out.bootstraps());
            state = out.next_state;
        }
    }
    Ok(())
}

/// Rolls out the (deterministic) library policy with its source teammates and
/// records one (φ, Δr) sample per transition.
pub fn collect_dr_dataset<E: Environment>(
    env: &E,
    learner: &SfLearnerPolicy,
    source_teammates: &[&dyn Policy<E>],
    episodes: usize,
    mode: CounterfactualMode,
    rng: &mut Rng64,
) -> Result<Vec<DrSample>> {
    if episodes == 0 {
        return Err(Error::input("at least one episode is required"));
    }
    let mut samples = Vec::new();
    for_each_dr_step(env, learner, source_teammates, episodes, mode, rng, |_, _, phi, dr, _, _| {
        samples.push(DrSample { features: phi.clone(), dr });
    })?;
    Ok(samples)
}

/// Ordinary least squares of Δr on φ via the normal equations. A design of
/// rank < d gets a tiny ridge, which approximates the minimum-norm solution.
pub fn fit_dr_weights(samples: &[DrSample]) -> Result<DrWeight> {
    let Some(first) = samples.first() else {
        return Err(Error::input("cannot fit difference-reward weights to an empty dataset"));
    };
    let d = first.features.len();
    if samples.iter().any(|s| s.features.len() != d) {
        return Err(Error::input("inconsistent feature dimensions in the dataset"));
    }
    let n = samples.len();
    let x = DMatrix::from_fn(n, d, |i, j| samples[i].features[j]);
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.dr));
    let sv = x.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let tol = top * (n.max(d) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol && s > 0.0).count();
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let (w, ridge) = if rank == d {
        match xtx.clone().cholesky() {
            Some(ch) => (ch.solve(&xty), 0.0),
            None => (solve_ridge(&xtx, &xty, d)?, RIDGE),
        }
    } else {
        (solve_ridge(&xtx, &xty, d)?, RIDGE)
    };
    let resid = &y - &x * &w;
    let residual_rms = (resid.norm_squared() / n as f64).sqrt();
    Ok(DrWeight {
        weights: WeightVector(w.iter().cloned().collect()),
        residual_rms,
        samples: n,
        rank,
        ridge,
        source_team_id: String::new(),
    })
}

fn solve_ridge(xtx: &DMatrix<f64>, xty: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    let reg = xtx + DMatrix::identity(d, d) * RIDGE;
    reg.cholesky()
        .map(|ch| ch.solve(xty))
        .ok_or_else(|| Error::Invariant("regularized normal equations are not positive definite".into()))
}

/// Q^π_Δr(s, ·) for a library entry.
pub fn dr_q(entry: &PolicyLibraryEntry, key: &ObsKey) -> Result<Vec<f64>> {
    match (&entry.dr_weight, &entry.dr_q) {
        (Some(w), _) => Ok(q_values(&entry.policy, key, &w.weights)),
        (None, Some(table)) => Ok(table.get(key)),
        (None, None) => Err(Error::state("library entry has no difference-reward value function")),
    }
}

/// On-policy TD(0) evaluation of the fixed library policy against its source
/// teammates: δ = Δr + γ Q(s′, π(s′)) − Q(s, a). No control updates.
#[allow(clippy::too_many_arguments)]
pub fn td_policy_eval_dr<E: Environment>(
    env: &E,
    learner: &SfLearnerPolicy,
    source_teammates: &[&dyn Policy<E>],
    source_team_id: &str,
    episodes: usize,
    alpha: f64,
    gamma: f64,
    mode: CounterfactualMode,
    rng: &mut Rng64,
) -> Result<DrQTable> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config("gamma must lie in [0, 1)"));
    }
    let mut table = DrQTable::new(env.n_actions(), alpha, gamma, source_team_id);
    let n_actions = env.n_actions();
    for_each_dr_step(env, learner, source_teammates, episodes, mode, rng, |s, a, _, dr, next, boot| {
        let key = env.encode(s, 0, learner.encoding);
        let next_key = env.encode(next, 0, learner.encoding);
        let bootstrap = if boot {
            table.value(&next_key, learner.greedy_action(&next_key))
        } else {
            0.0
        };
        let row = table.values.entry(key).or_insert_with(|| vec![0.0; n_actions]);
        row[a] += alpha * (dr + gamma * bootstrap - row[a]);
    })?;
    table.episodes_used = episodes;
    Ok(table)
}
