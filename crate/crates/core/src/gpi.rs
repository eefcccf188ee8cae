//! Zero-shot execution by generalized policy improvement over a library.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffreward::dr_q;
use crate::error::{Error, Result};
use crate::library::PolicyLibrary;
use crate::mmdp::{run_episodes, Cell, EpisodeLog, Environment, ObsEncoding, ObsKey, Policy, Rng64, RolloutOptions};
use crate::sfql::{argmax_lowest, q_values, SfLearnerPolicy};
use crate::vector::WeightVector;

/// Which value function each entry contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpiMode {
    /// Q^π_Δr, the learner's difference-reward value.
    #[default]
    WithDr,
    /// ψ · w with the team weight (ablation).
    WithoutDr,
}

/// Read-only GPI policy over a library whose entries share one encoding.
#[derive(Clone, Debug)]
pub struct GpiExecutor {
    library: PolicyLibrary,
    mode: GpiMode,
    team_weight: WeightVector,
    encoding: ObsEncoding,
}

impl GpiExecutor {
    pub fn new(library: PolicyLibrary, mode: GpiMode, team_weight: WeightVector) -> Result<Self> {
        let Some(first) = library.entries.first() else {
            return Err(Error::state("GPI needs a non-empty library"));
        };
        let encoding = first.policy.encoding;
        if library.entries.iter().any(|e| e.policy.encoding != encoding) {
            return Err(Error::state("library entries use different observation encodings"));
        }
        if mode == GpiMode::WithDr {
            let evaluated = library.entries.iter().filter(|e| e.dr_evaluated()).count();
            if evaluated != library.len() {
                return Err(Error::state(format!(
                    "{evaluated} of {} library entries have difference-reward values",
                    library.len()
                )));
            }
        }
        if team_weight.len() != library.feature_dim {
            return Err(Error::config("team weight dimension differs from the library"));
        }
        Ok(GpiExecutor { library, mode, team_weight, encoding })
    }

    pub fn library(&self) -> &PolicyLibrary {
        &self.library
    }

    pub fn mode(&self) -> GpiMode {
        self.mode
    }

    pub fn encoding(&self) -> ObsEncoding {
        self.encoding
    }

    /// Q_i(key, ·) for every entry.
    pub fn entry_values(&self, key: &ObsKey) -> Vec<Vec<f64>> {
        self.library
            .entries
            .iter()
            .map(|e| match self.mode {
                GpiMode::WithDr => dr_q(e, key).expect("checked at construction"),
                GpiMode::WithoutDr => q_values(&e.policy, key, &self.team_weight),
            })
            .collect()
    }

    /// (action, winning entry). Ties go to the lowest entry, then the lowest
    /// action within it.
    pub fn gpi_action(&self, key: &ObsKey) -> (usize, usize) {
        select(&self.entry_values(key))
    }

    /// max_i Q_i(key, a) per action.
    pub fn action_values(&self, key: &ObsKey) -> Vec<f64> {
        let values = self.entry_values(key);
        (0..self.library.n_actions)
            .map(|a| values.iter().map(|q| q[a]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

fn select(values: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for (i, q) in values.iter().enumerate() {
        for (a, &v) in q.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = (a, i);
            }
        }
    }
    best
}

/// Free-function form of [`GpiExecutor::gpi_action`].
pub fn gpi_action(executor: &GpiExecutor, key: &ObsKey) -> (usize, usize) {
    executor.gpi_action(key)
}

impl<E: Environment> Policy<E> for GpiExecutor {
    fn act(&self, env: &E, state: &E::State, agent: usize, _: &mut Rng64) -> usize {
        self.gpi_action(&env.encode(state, agent, self.encoding)).0
    }

    fn act_traced(&self, env: &E, state: &E::State, agent: usize, _: &mut Rng64) -> (usize, Option<usize>) {
        let (a, i) = self.gpi_action(&env.encode(state, agent, self.encoding));
        (a, Some(i))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// How often each entry won the GPI arg-max.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub steps: u64,
    pub wins: Vec<u64>,
    /// Steps on which the entry's own greedy action matched the chosen one.
    pub agreement: Vec<u64>,
}

impl UsageStats {
    pub fn new(n: usize) -> Self {
        UsageStats { steps: 0, wins: vec![0; n], agreement: vec![0; n] }
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.wins.iter().map(|&w| if self.steps == 0 { 0.0 } else { w as f64 / self.steps as f64 }).collect()
    }

    pub fn agreement_fractions(&self) -> Vec<f64> {
        self.agreement.iter().map(|&w| if self.steps == 0 { 0.0 } else { w as f64 / self.steps as f64 }).collect()
    }

    /// Tallies logged selections. Logs must carry the executor's encoding.
    pub fn from_logs(executor: &GpiExecutor, logs: &[EpisodeLog]) -> Self {
        let mut stats = UsageStats::new(executor.library.len());
        for log in logs {
            for (t, chosen) in log.transitions.iter().zip(&log.chosen_library_index) {
                let Some(i) = *chosen else { continue };
                stats.steps += 1;
                stats.wins[i] += 1;
                let taken = t.joint.0[log.learner_slot];
                for (j, q) in executor.entry_values(&t.state).iter().enumerate() {
                    if argmax_lowest(q) == taken {
                        stats.agreement[j] += 1;
                    }
                }
            }
        }
        stats
    }

    pub fn merge(&mut self, other: &UsageStats) {
        self.steps += other.steps;
        for (a, b) in self.wins.iter_mut().zip(&other.wins) {
            *a += b;
        }
        for (a, b) in self.agreement.iter_mut().zip(&other.agreement) {
            *a += b;
        }
    }
}

/// Runs the executor against target teammates without touching any table.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_zero_shot<E: Environment>(
    executor: &GpiExecutor,
    env: &E,
    target_teammates: &[&dyn Policy<E>],
    target_team_id: &str,
    episodes: usize,
    seed: u64,
    path: &[u64],
    jobs: usize,
) -> Result<(Vec<EpisodeLog>, UsageStats)> {
    if executor.library.entries.iter().any(|e| e.source_team_id == target_team_id) {
        eprintln!("warning: target team `{target_team_id}` also appears among the library's source teams");
    }
    let mut opts = RolloutOptions::new(env.horizon());
    opts.encoding = Some(executor.encoding);
    opts.team_id = target_team_id.to_string();
    let logs = run_episodes(env, executor, target_teammates, episodes, seed, path, &opts, jobs)?;
    let usage = UsageStats::from_logs(executor, &logs);
    Ok((logs, usage))
}

/// Something that scores every action at an encoded observation.
pub trait ActionValues {
    fn encoding(&self) -> ObsEncoding;
    fn values_at(&self, key: &ObsKey) -> Vec<f64>;
}

impl ActionValues for GpiExecutor {
    fn encoding(&self) -> ObsEncoding {
        self.encoding
    }

    fn values_at(&self, key: &ObsKey) -> Vec<f64> {
        self.action_values(key)
    }
}

impl ActionValues for SfLearnerPolicy {
    fn encoding(&self) -> ObsEncoding {
        self.encoding
    }

    fn values_at(&self, key: &ObsKey) -> Vec<f64> {
        self.q_values(key, &self.task_weight)
    }
}

/// Grid of max-over-actions values with the agent placed on every free cell
/// (`None` where it cannot stand), divided by the grid maximum when positive.
pub fn value_map<E: Environment, V: ActionValues + ?Sized>(
    env: &E,
    values: &V,
    base_state: &E::State,
    agent: usize,
) -> Vec<Vec<Option<f64>>> {
    let g = env.grid_size();
    let mut map = vec![vec![None; g]; g];
    for (r, row) in map.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            if let Some(s) = env.with_agent_at(base_state, agent, Cell::new(r, c)) {
                let key = env.encode(&s, agent, values.encoding());
                *slot = Some(values.values_at(&key).into_iter().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    normalize_map(&mut map);
    map
}

pub fn normalize_map(map: &mut [Vec<Option<f64>>]) {
    let max = map.iter().flatten().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        for v in map.iter_mut().flatten().flatten() {
            *v /= max;
        }
    }
}

/// Mean absolute difference over cells defined in both maps, in percent.
pub fn map_percent_error(map: &[Vec<Option<f64>>], reference: &[Vec<Option<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (ra, rb) in map.iter().zip(reference) {
        for (a, b) in ra.iter().zip(rb) {
            if let (Some(a), Some(b)) = (a, b) {
                total += (a - b).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * total / n as f64
    }
}

pub fn value_map_csv(map: &[Vec<Option<f64>>]) -> String {
    let mut s = String::new();
    for row in map {
        let cells: Vec<String> = row.iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Heat map: white (0) to dark blue (1); blocked cells grey.
pub fn value_map_svg(map: &[Vec<Option<f64>>]) -> String {
    const PX: usize = 40;
    let g = map.len();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}">"#, g * PX);
    for (r, row) in map.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let fill = match v {
                Some(x) => {
                    let t = x.clamp(0.0, 1.0);
                    let ch = |hi: f64, lo: f64| (hi + (lo - hi) * t).round() as u8;
                    format!("#{:02x}{:02x}{:02x}", ch(255.0, 8.0), ch(255.0, 48.0), ch(255.0, 107.0))
                }
                None => "#999999".to_string(),
            };
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="{PX}" height="{PX}" fill="{fill}"/>"#, c * PX, r * PX);
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{EntryKind, PolicyLibraryEntry, TrainingMeta};
    use crate::sfql::SfTable;

    fn entry(rows: &[(u8, Vec<f64>)]) -> PolicyLibraryEntry {
        let mut sf = SfTable::new(2, 3, 0.9);
        for (k, r) in rows {
            sf.insert_row(ObsKey(vec![*k]), r.clone()).unwrap();
        }
        let policy = SfLearnerPolicy { sf, task_weight: WeightVector(vec![1.0, 0.0]), encoding: ObsEncoding::Absolute };
        PolicyLibraryEntry::new(EntryKind::Learner, policy, "s", TrainingMeta::default())
    }

    fn library(entries: Vec<PolicyLibraryEntry>) -> PolicyLibrary {
        let mut lib = PolicyLibrary::new(2, 3, 0.9);
        for e in entries {
            lib.push(e).unwrap();
        }
        lib
    }

    #[test]
    fn identical_entries_credit_entry_zero() {
        let rows = vec![(0, vec![0.0, 1.0, 2.0, 0.0, 2.0, 0.0])];
        let lib = library(vec![entry(&rows), entry(&rows)]);
        let ex = GpiExecutor::new(lib, GpiMode::WithoutDr, WeightVector(vec![1.0, 1.0])).unwrap();
        // every action scores 1, 2, 2: lowest action among the tied maxima
        assert_eq!(ex.gpi_action(&ObsKey(vec![0])), (1, 0));
    }

    #[test]
    fn max_over_entries_then_actions() {
        let a = entry(&[(0, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0])]);
        let b = entry(&[(0, vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0])]);
        let ex = GpiExecutor::new(library(vec![a, b]), GpiMode::WithoutDr, WeightVector(vec![1.0, 0.0])).unwrap();
        assert_eq!(ex.gpi_action(&ObsKey(vec![0])), (2, 1));
        assert_eq!(ex.action_values(&ObsKey(vec![0])), vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn construction_errors() {
        let empty = PolicyLibrary::new(2, 3, 0.9);
        assert!(matches!(GpiExecutor::new(empty, GpiMode::WithoutDr, WeightVector(vec![1.0, 1.0])), Err(Error::State(_))));
        let mut fitted = entry(&[]);
        fitted.dr_q = Some(crate::diffreward::DrQTable::new(3, 0.1, 0.9, "s"));
        let lib = library(vec![fitted, entry(&[])]);
        assert!(matches!(GpiExecutor::new(lib, GpiMode::WithDr, WeightVector(vec![1.0, 1.0])), Err(Error::State(_))));
    }

    #[test]
    fn usage_fractions_sum_to_one() {
        let stats = UsageStats { steps: 10, wins: vec![3, 7], agreement: vec![10, 7] };
        let f = stats.fractions();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(UsageStats::new(2).fractions(), vec![0.0, 0.0]);
    }

    #[test]
    fn normalization_and_error() {
        let mut m = vec![vec![Some(2.0), None], vec![Some(1.0), Some(0.0)]];
        normalize_map(&mut m);
        assert_eq!(m[0][0], Some(1.0));
        assert_eq!(m[1][0], Some(0.5));
        let mut z = vec![vec![Some(0.0); 2]; 2];
        normalize_map(&mut z);
        assert!(z.iter().flatten().all(|v| *v == Some(0.0)));
        assert!((map_percent_error(&m, &z) - 50.0).abs() < 1e-12);
        assert_eq!(value_map_csv(&m), "1.000000,\n0.500000,0.000000\n");
    }
}
