//! Comparison methods: Oracle, Robust and PLASTIC-best.

use crate::error::{Error, Result};
use crate::library::PolicyLibrary;
use crate::mmdp::{discounted_return, run_episodes, Environment, ObsEncoding, Policy, Rng64, RolloutOptions};
use crate::sfql::{sfql_train, sfql_train_teams, SfHyperparams, SfLearnerPolicy, TrainReport};
use crate::stats::iqm;

/// SFQL trained directly with the target team.
pub fn train_oracle<E: Environment>(
    env: &E,
    target_teammates: &[&dyn Policy<E>],
    hp: &SfHyperparams,
    encoding: ObsEncoding,
    rng: &mut Rng64,
) -> Result<(SfLearnerPolicy, TrainReport)> {
    sfql_train(env, target_teammates, env.team_weight(), hp, encoding, rng)
}

/// One SFQL policy trained against a uniformly drawn source team per episode.
/// `hp_total.total_timesteps` should equal the whole library's budget.
pub fn train_robust<E: Environment>(
    env: &E,
    source_teams: &[Vec<&dyn Policy<E>>],
    hp_total: &SfHyperparams,
    encoding: ObsEncoding,
    rng: &mut Rng64,
) -> Result<(SfLearnerPolicy, TrainReport)> {
    if source_teams.is_empty() {
        return Err(Error::config("robust training needs at least one source team"));
    }
    sfql_train_teams(env, source_teams, env.team_weight(), hp_total, encoding, rng, None)
}

/// Outcome of the best-single-policy search.
#[derive(Clone, Debug, PartialEq)]
pub struct PlasticChoice {
    pub index: usize,
    /// IQM discounted return of each entry with the target team.
    pub scores: Vec<f64>,
}

/// Evaluates every entry alone with the target team and picks the highest
/// IQM return (lowest index on ties). Every entry sees the same episode seeds.
#[allow(clippy::too_many_arguments)]
pub fn plastic_best<E: Environment>(
    library: &PolicyLibrary,
    env: &E,
    target_teammates: &[&dyn Policy<E>],
    eval_episodes: usize,
    gamma: f64,
    seed: u64,
    path: &[u64],
    jobs: usize,
) -> Result<PlasticChoice> {
    if library.is_empty() {
        return Err(Error::state("PLASTIC selection needs a non-empty library"));
    }
    let opts = RolloutOptions::new(env.horizon());
    let mut scores = Vec::with_capacity(library.len());
    for entry in &library.entries {
        let logs = run_episodes(env, &entry.policy, target_teammates, eval_episodes, seed, path, &opts, jobs)?;
        let returns: Vec<f64> = logs.iter().map(|l| discounted_return(l, gamma)).collect();
        scores.push(iqm(&returns)?);
    }
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(PlasticChoice { index, scores })
}
