//! Config-driven experiments: pretraining, difference-reward fitting,
//! zero-shot evaluation and the artifacts each stage leaves on disk.
//!
//! Stages communicate only through files in one output directory:
//!
//! | file | written by |
//! |---|---|
//! | `library_r<i>_<hash>.bin`, `robust_r<i>_<hash>.bin`, `pretrain_<hash>.json` | pretrain |
//! | `fit_dr_<hash>.json` (libraries updated in place) | fit-dr |
//! | `oracle_r<i>_<hash>.bin`, `results.csv`, `matrix_<m>.csv`, `usage_<m>.csv`, `manifest.json` | eval |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{plastic_best, train_oracle, train_robust};
use crate::diffreward::{collect_dr_dataset, fit_dr_weights, td_policy_eval_dr, CounterfactualMode};
use crate::env::foraging::{ForagerPolicy, Foraging, ForagingConfig};
use crate::env::pursuit::{PredatorPolicy, Pursuit, PursuitConfig};
use crate::env::render::Render;
use crate::error::{Error, Result};
use crate::gpi::{evaluate_zero_shot, GpiExecutor, GpiMode, UsageStats};
use crate::library::{file_checksum, write_atomic, EntryKind, PolicyLibrary, PolicyLibraryEntry, TrainingMeta};
use crate::mmdp::{
    discounted_return, rollout_with, run_episodes, write_logs, ConstantPolicy, EpisodeLog, Environment, ObsEncoding,
    Policy, Rng64, RolloutOptions, UniformPolicy,
};
use crate::par;
use crate::seed::{derive_seed, rng_for, tag};
use crate::sfql::{sfql_train, SfHyperparams, SfLearnerPolicy};
use crate::stats::{fill_pct_optimality, join_values, objects_collected_stats, write_results_csv, ReplicateMatrix, ResultRow};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Evaluated methods, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Gpat,
    GpatNodr,
    Robust,
    Plastic,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Oracle, Method::Gpat, Method::GpatNodr, Method::Robust, Method::Plastic];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Gpat => "gpat",
            Method::GpatNodr => "gpat_nodr",
            Method::Robust => "robust",
            Method::Plastic => "plastic",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown method `{s}` (expected one of oracle, gpat, gpat_nodr, robust, plastic)")))
    }

    /// Comma-separated list, deduplicated, in reporting order.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = s.split(',').filter(|p| !p.trim().is_empty()).map(Method::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeammateSpec {
    /// Scripted forager; objects with non-positive preference are avoided.
    Forager { preference: Vec<f64> },
    /// Greedy predator chasing the listed prey indices.
    Predator { preferred: Vec<usize> },
    Stationary,
    Uniform,
    /// SFQL policy trained alone (partners stay put) on a biased reward
    /// weight, then deployed greedily.
    Trained {
        weight: Vec<f64>,
        #[serde(default = "default_teammate_steps")]
        timesteps: u64,
    },
}

fn default_teammate_steps() -> u64 {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamSpec {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    pub teammates: Vec<TeammateSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitSpec {
    pub grid_size: usize,
    pub horizon: Option<usize>,
    pub encoding: Option<ObsEncoding>,
}

impl Default for PursuitSpec {
    fn default() -> Self {
        PursuitSpec { grid_size: 9, horizon: None, encoding: None }
    }
}

impl PursuitSpec {
    pub fn to_config(&self) -> PursuitConfig {
        let mut cfg = PursuitConfig::with_grid(self.grid_size);
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(e) = self.encoding {
            cfg.encoding = e;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Foraging(ForagingConfig),
    Pursuit(PursuitSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrBranch {
    /// Least-squares w_Δr scored through the successor features.
    #[default]
    Linear,
    /// Tabular TD(0) evaluation of Q_Δr.
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrConfig {
    pub branch: DrBranch,
    /// Rollout episodes for the linear fit.
    pub episodes: usize,
    /// TD episodes for the general branch.
    pub td_episodes: usize,
    pub td_alpha: f64,
    pub counterfactual: CounterfactualMode,
    /// Teams whose rollouts may be used; empty means each entry's own source
    /// team. Naming the target team is refused.
    pub rollout_teams: Vec<String>,
}

impl Default for DrConfig {
    fn default() -> Self {
        DrConfig {
            branch: DrBranch::Linear,
            episodes: 10,
            td_episodes: 2500,
            td_alpha: 0.1,
            counterfactual: CounterfactualMode::Resimulate,
            rollout_teams: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub replicates: usize,
    pub resamples: usize,
    pub level: f64,
    pub plastic_episodes: usize,
    pub methods: Vec<Method>,
    /// Episodes of replicate 0 rendered when rendering is requested.
    pub render_episodes: usize,
    /// Write replicate-0 trajectories as `logs_<method>.jsonl`.
    pub write_logs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1000,
            replicates: 10,
            resamples: 1000,
            level: 0.95,
            plastic_episodes: 100,
            methods: Method::ALL.to_vec(),
            render_episodes: 3,
            write_logs: false,
        }
    }
}

/// Whether replicates retrain every policy or only re-seed evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateMode {
    #[default]
    Retrain,
    Reseed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub replicate_mode: ReplicateMode,
    /// Skip stages whose artifacts already exist for this configuration.
    #[serde(default)]
    pub reuse: bool,
    pub env: EnvSpec,
    pub source_teams: Vec<TeamSpec>,
    pub target_team: TeamSpec,
    #[serde(default)]
    pub training: SfHyperparams,
    #[serde(default)]
    pub dr: DrConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn forager_team(id: &str, pref: [f64; 3]) -> TeamSpec {
    TeamSpec { id: id.into(), seed: 0, teammates: vec![TeammateSpec::Forager { preference: pref.to_vec() }] }
}

fn predator_team(id: &str, preferred: &[usize]) -> TeamSpec {
    let mate = TeammateSpec::Predator { preferred: preferred.to_vec() };
    TeamSpec { id: id.into(), seed: 0, teammates: vec![mate.clone(), mate] }
}

impl ExperimentConfig {
    pub const PRESETS: [&'static str; 4] = ["exp1", "exp2", "exp3", "pursuit"];

    /// Desk-scale analogs of the published experiments.
    pub fn preset(name: &str) -> Result<Self> {
        let foraging = |sources: [[f64; 3]; 2], target: [f64; 3]| -> (EnvSpec, Vec<TeamSpec>, TeamSpec) {
            (
                EnvSpec::Foraging(ForagingConfig::reduced(6, 2)),
                vec![forager_team("source1", sources[0]), forager_team("source2", sources[1])],
                forager_team("target", target),
            )
        };
        let (env, source_teams, target_team) = match name {
            "exp1" => foraging([[1.0, -0.5, -0.5], [-0.5, 1.0, -0.5]], [-0.5, -0.5, 1.0]),
            "exp2" => foraging([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0]], [-0.5, -0.5, 1.0]),
            "exp3" => foraging([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0]], [1.0, 1.0, 0.0]),
            "pursuit" => (
                EnvSpec::Pursuit(PursuitSpec::default()),
                vec![predator_team("source1", &[0, 2]), predator_team("source2", &[1, 3])],
                predator_team("target", &[1, 2]),
            ),
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(ExperimentConfig {
            name: name.to_string(),
            seed: 2024,
            replicate_mode: ReplicateMode::Retrain,
            reuse: false,
            env,
            source_teams,
            target_team,
            training: SfHyperparams { learning_rate: 0.2, factored: true, ..SfHyperparams::default() },
            dr: DrConfig::default(),
            eval: EvalConfig { episodes: 500, replicates: 5, ..EvalConfig::default() },
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn n_teammates(&self) -> usize {
        match &self.env {
            EnvSpec::Foraging(c) => c.n_agents.saturating_sub(1),
            EnvSpec::Pursuit(p) => p.to_config().n_predators.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_teams.is_empty() {
            return Err(Error::config("source_teams must not be empty"));
        }
        let mut ids: Vec<&str> = self.source_teams.iter().map(|t| t.id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("source team ids must be unique"));
        }
        if ids.contains(&self.target_team.id.as_str()) {
            return Err(Error::config(format!("target team `{}` is also a source team", self.target_team.id)));
        }
        let k = self.n_teammates();
        for team in self.source_teams.iter().chain(std::iter::once(&self.target_team)) {
            if team.teammates.len() != k {
                return Err(Error::config(format!(
                    "team `{}` has {} teammates, the environment needs {k}",
                    team.id,
                    team.teammates.len()
                )));
            }
        }
        self.training.validate()?;
        if self.training.total_timesteps == 0 {
            return Err(Error::config("training.total_timesteps must be positive"));
        }
        for t in &self.dr.rollout_teams {
            if *t == self.target_team.id {
                return Err(Error::config(format!(
                    "dr.rollout_teams names the target team `{t}`; difference rewards may only use source teams"
                )));
            }
            if !ids.contains(&t.as_str()) {
                return Err(Error::config(format!("dr.rollout_teams names unknown team `{t}`")));
            }
        }
        if self.dr.episodes == 0 || self.dr.td_episodes == 0 {
            return Err(Error::config("dr episode counts must be positive"));
        }
        let ev = &self.eval;
        if ev.replicates == 0 || ev.episodes == 0 || ev.replicates * ev.episodes < 4 {
            return Err(Error::config("evaluation needs at least 4 episodes in total"));
        }
        if ev.plastic_episodes < 4 {
            return Err(Error::config("eval.plastic_episodes must be at least 4"));
        }
        if ev.methods.is_empty() {
            return Err(Error::config("eval.methods must not be empty"));
        }
        if !(ev.level > 0.0 && ev.level < 1.0) {
            return Err(Error::config("eval.level must lie in (0, 1)"));
        }
        match &self.env {
            EnvSpec::Foraging(c) => Foraging::new(c.clone()).map(|_| ()),
            EnvSpec::Pursuit(p) => Pursuit::new(p.to_config()).map(|_| ()),
        }
    }

    pub fn instances(&self) -> usize {
        match self.replicate_mode {
            ReplicateMode::Retrain => self.eval.replicates,
            ReplicateMode::Reseed => 1,
        }
    }

    /// Library instance used by evaluation replicate `replicate`.
    pub fn instance_of(&self, replicate: usize) -> usize {
        match self.replicate_mode {
            ReplicateMode::Retrain => replicate,
            ReplicateMode::Reseed => 0,
        }
    }

    /// Hash of everything pretraining depends on. Excludes the target team.
    pub fn pretrain_hash(&self) -> String {
        short_hash(&(&self.env, &self.source_teams, &self.training, self.seed, self.replicate_mode, self.instances()))
    }

    fn oracle_hash(&self) -> String {
        short_hash(&(&self.env, &self.target_team, &self.training, self.seed, self.replicate_mode, self.instances()))
    }

    /// Hash of the full configuration.
    pub fn config_hash(&self) -> String {
        short_hash(self)
    }
}

fn short_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Environments the harness can run.
pub trait ExperimentEnv: Render + Sized + 'static {
    fn teammate(&self, spec: &TeammateSpec) -> Result<Box<dyn Policy<Self>>>;
}

impl ExperimentEnv for Foraging {
    fn teammate(&self, spec: &TeammateSpec) -> Result<Box<dyn Policy<Self>>> {
        Ok(match spec {
            TeammateSpec::Forager { preference } => {
                if preference.len() != self.n_types() {
                    return Err(Error::config("forager preference length differs from the number of object types"));
                }
                Box::new(ForagerPolicy::new(preference.clone()))
            }
            TeammateSpec::Stationary => Box::new(ConstantPolicy(crate::env::STAY)),
            TeammateSpec::Uniform => Box::new(UniformPolicy),
            TeammateSpec::Predator { .. } => return Err(Error::config("predator teammates need the pursuit environment")),
            TeammateSpec::Trained { .. } => return Err(Error::config("trained teammates are built by the team builder")),
        })
    }
}

impl ExperimentEnv for Pursuit {
    fn teammate(&self, spec: &TeammateSpec) -> Result<Box<dyn Policy<Self>>> {
        Ok(match spec {
            TeammateSpec::Predator { preferred } => {
                if preferred.iter().any(|&p| p >= self.config().prey.len()) {
                    return Err(Error::config("predator preference names a prey index out of range"));
                }
                Box::new(PredatorPolicy::new(preferred.clone()))
            }
            TeammateSpec::Stationary => Box::new(ConstantPolicy(crate::env::STAY)),
            TeammateSpec::Uniform => Box::new(UniformPolicy),
            TeammateSpec::Forager { .. } => return Err(Error::config("forager teammates need the foraging environment")),
            TeammateSpec::Trained { .. } => return Err(Error::config("trained teammates are built by the team builder")),
        })
    }
}

type Team<E> = Vec<Box<dyn Policy<E>>>;

fn build_team<E: ExperimentEnv>(env: &E, spec: &TeamSpec, hp: &SfHyperparams) -> Result<Team<E>> {
    spec.teammates
        .iter()
        .enumerate()
        .map(|(i, t)| match t {
            TeammateSpec::Trained { weight, timesteps } => {
                let weight = crate::WeightVector::from(weight.clone());
                let hp = SfHyperparams { total_timesteps: *timesteps, ..hp.clone() };
                let still: Vec<Box<dyn Policy<E>>> =
                    (1..env.n_agents()).map(|_| Box::new(ConstantPolicy(crate::env::STAY)) as Box<dyn Policy<E>>).collect();
                let mut rng = rng_for(spec.seed, &[tag::TEAMMATE, i as u64]);
                let (policy, _) = sfql_train(env, &refs(&still), &weight, &hp, env.default_encoding(), &mut rng)?;
                Ok(Box::new(policy) as Box<dyn Policy<E>>)
            }
            other => env.teammate(other),
        })
        .collect()
}

fn refs<E: Environment>(team: &Team<E>) -> Vec<&dyn Policy<E>> {
    team.iter().map(|b| b.as_ref()).collect()
}

/// File names inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub dir: PathBuf,
    pretrain: String,
    oracle: String,
}

impl Layout {
    pub fn new(dir: &Path, cfg: &ExperimentConfig) -> Self {
        Layout { dir: dir.to_path_buf(), pretrain: cfg.pretrain_hash(), oracle: cfg.oracle_hash() }
    }

    pub fn library(&self, inst: usize) -> PathBuf {
        self.dir.join(format!("library_r{inst}_{}.bin", self.pretrain))
    }

    pub fn robust(&self, inst: usize) -> PathBuf {
        self.dir.join(format!("robust_r{inst}_{}.bin", self.pretrain))
    }

    pub fn oracle(&self, inst: usize) -> PathBuf {
        self.dir.join(format!("oracle_r{inst}_{}.bin", self.oracle))
    }

    pub fn pretrain_manifest(&self) -> PathBuf {
        self.dir.join(format!("pretrain_{}.json", self.pretrain))
    }

    pub fn dr_report(&self) -> PathBuf {
        self.dir.join(format!("fit_dr_{}.json", self.pretrain))
    }

    pub fn results(&self) -> PathBuf {
        self.dir.join("results.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn matrix(&self, m: Method) -> PathBuf {
        self.dir.join(format!("matrix_{}.csv", m.name()))
    }

    pub fn usage(&self, m: Method) -> PathBuf {
        self.dir.join(format!("usage_{}.csv", m.name()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub cache_hit: bool,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileRecord {
    file: String,
    sha256: String,
}

fn file_record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: file_checksum(path)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct TrainedRecord {
    instance: usize,
    team: String,
    seed: u64,
    timesteps: u64,
    episodes: u64,
    team_draws: Vec<u64>,
}

#[derive(Serialize)]
struct PretrainManifest<'a> {
    stage: &'static str,
    code_version: &'static str,
    pretrain_hash: String,
    env: &'a EnvSpec,
    source_teams: &'a [TeamSpec],
    training: &'a SfHyperparams,
    replicate_mode: ReplicateMode,
    base_seed: u64,
    policies: Vec<TrainedRecord>,
    library_timesteps: u64,
    robust_timesteps: u64,
    files: Vec<FileRecord>,
}

/// Step 1: one learner per source team, plus the Robust baseline, for every
/// training instance.
pub fn pretrain<E: ExperimentEnv>(env: &E, cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<StageOutcome> {
    cfg.validate()?;
    let layout = Layout::new(dir, cfg);
    let insts = cfg.instances();
    let mut files: Vec<PathBuf> = (0..insts).flat_map(|i| [layout.library(i), layout.robust(i)]).collect();
    files.push(layout.pretrain_manifest());
    if cfg.reuse && files.iter().all(|f| f.exists()) {
        return Ok(StageOutcome { cache_hit: true, files });
    }
    let teams: Vec<Team<E>> = cfg.source_teams.iter().map(|t| build_team(env, t, &cfg.training)).collect::<Result<_>>()?;
    let n_teams = teams.len();
    let encoding = env.default_encoding();
    let hp_hash = cfg.training.hash();
    let trained = par::try_map_range(insts * (n_teams + 1), jobs, |k| -> Result<(SfLearnerPolicy, TrainingMeta)> {
        let (inst, t) = (k / (n_teams + 1), k % (n_teams + 1));
        if t < n_teams {
            let seed = derive_seed(cfg.seed, &[tag::PRETRAIN, inst as u64, t as u64, cfg.source_teams[t].seed]);
            let mut rng = Rng64::seed_from_u64(seed);
            let (policy, report) = sfql_train(env, &refs(&teams[t]), env.team_weight(), &cfg.training, encoding, &mut rng)?;
            let meta = TrainingMeta {
                seed,
                timesteps: report.steps,
                episodes: report.episodes,
                hyperparams_hash: hp_hash.clone(),
                team_draws: report.team_draws,
            };
            Ok((policy, meta))
        } else {
            let seed = derive_seed(cfg.seed, &[tag::ROBUST, inst as u64]);
            let mut rng = Rng64::seed_from_u64(seed);
            let hp = SfHyperparams { total_timesteps: cfg.training.total_timesteps * n_teams as u64, ..cfg.training.clone() };
            let all: Vec<Vec<&dyn Policy<E>>> = teams.iter().map(refs).collect();
            let (policy, report) = train_robust(env, &all, &hp, encoding, &mut rng)?;
            let meta = TrainingMeta {
                seed,
                timesteps: report.steps,
                episodes: report.episodes,
                hyperparams_hash: hp.hash(),
                team_draws: report.team_draws,
            };
            Ok((policy, meta))
        }
    })?;
    let mut records = Vec::new();
    let (mut library_steps, mut robust_steps) = (0, 0);
    let mut it = trained.into_iter();
    for inst in 0..insts {
        let mut lib = PolicyLibrary::new(env.feature_dim(), env.n_actions(), cfg.training.gamma);
        for team in &cfg.source_teams {
            let (policy, meta) = it.next().expect("one result per task");
            library_steps += meta.timesteps;
            records.push(TrainedRecord {
                instance: inst,
                team: team.id.clone(),
                seed: meta.seed,
                timesteps: meta.timesteps,
                episodes: meta.episodes,
                team_draws: meta.team_draws.clone(),
            });
            lib.push(PolicyLibraryEntry::new(EntryKind::Learner, policy, team.id.clone(), meta))?;
        }
        let (policy, meta) = it.next().expect("one result per task");
        robust_steps += meta.timesteps;
        records.push(TrainedRecord {
            instance: inst,
            team: "robust".into(),
            seed: meta.seed,
            timesteps: meta.timesteps,
            episodes: meta.episodes,
            team_draws: meta.team_draws.clone(),
        });
        let robust_id = cfg.source_teams.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join("+");
        let mut robust = PolicyLibrary::new(env.feature_dim(), env.n_actions(), cfg.training.gamma);
        robust.push(PolicyLibraryEntry::new(EntryKind::Robust, policy, robust_id, meta))?;
        lib.save(&layout.library(inst))?;
        robust.save(&layout.robust(inst))?;
    }
    if library_steps != robust_steps {
        return Err(Error::Invariant(format!(
            "robust baseline consumed {robust_steps} steps, the libraries {library_steps}"
        )));
    }
    let manifest = PretrainManifest {
        stage: "pretrain",
        code_version: CODE_VERSION,
        pretrain_hash: cfg.pretrain_hash(),
        env: &cfg.env,
        source_teams: &cfg.source_teams,
        training: &cfg.training,
        replicate_mode: cfg.replicate_mode,
        base_seed: cfg.seed,
        policies: records,
        library_timesteps: library_steps,
        robust_timesteps: robust_steps,
        files: files[..files.len() - 1].iter().map(|f| file_record(f)).collect::<Result<_>>()?,
    };
    write_json(&layout.pretrain_manifest(), &manifest)?;
    Ok(StageOutcome { cache_hit: false, files })
}

#[derive(Serialize)]
struct DrEntryReport {
    instance: usize,
    entry: usize,
    source_team: String,
    rollout_team: String,
    branch: DrBranch,
    seed: u64,
    weights: Option<Vec<f64>>,
    residual_rms: Option<f64>,
    rank: Option<usize>,
    samples: Option<usize>,
    ridge: Option<f64>,
    td_episodes: Option<usize>,
    td_rows: Option<usize>,
}

#[derive(Serialize)]
struct DrReport<'a> {
    stage: &'static str,
    code_version: &'static str,
    pretrain_hash: String,
    dr: &'a DrConfig,
    entries: Vec<DrEntryReport>,
    files: Vec<FileRecord>,
}

/// Team used for an entry's DR rollouts: its own source team, unless
/// `rollout_teams` restricts the choice.
fn rollout_team<'a>(cfg: &'a ExperimentConfig, source_id: &str) -> Result<(usize, &'a TeamSpec)> {
    let pos = cfg
        .source_teams
        .iter()
        .position(|t| t.id == source_id)
        .ok_or_else(|| Error::config(format!("library entry names unknown source team `{source_id}`")))?;
    if !cfg.dr.rollout_teams.is_empty() && !cfg.dr.rollout_teams.iter().any(|t| t == source_id) {
        return Err(Error::config(format!("source team `{source_id}` is not listed in dr.rollout_teams")));
    }
    Ok((pos, &cfg.source_teams[pos]))
}

/// Step 2: attaches a difference-reward value function to every entry.
pub fn fit_dr<E: ExperimentEnv>(env: &E, cfg: &ExperimentConfig, dir: &Path, jobs: usize, force: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    let layout = Layout::new(dir, cfg);
    let insts = cfg.instances();
    let mut libs = Vec::with_capacity(insts);
    for inst in 0..insts {
        let lib = PolicyLibrary::load(&layout.library(inst))?;
        if !force && lib.entries.iter().any(|e| e.dr_evaluated()) {
            if cfg.reuse && lib.entries.iter().all(|e| e.dr_evaluated()) && layout.dr_report().exists() {
                continue;
            }
            return Err(Error::config(format!(
                "{} already has difference-reward values; pass --force to refit",
                layout.library(inst).display()
            )));
        }
        libs.push((inst, lib));
    }
    let mut files: Vec<PathBuf> = (0..insts).map(|i| layout.library(i)).collect();
    files.push(layout.dr_report());
    if libs.is_empty() {
        return Ok(StageOutcome { cache_hit: true, files });
    }
    let teams: Vec<Team<E>> = cfg.source_teams.iter().map(|t| build_team(env, t, &cfg.training)).collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> = libs.iter().enumerate().flat_map(|(li, (_, lib))| (0..lib.len()).map(move |e| (li, e))).collect();
    let fitted = par::try_map_range(tasks.len(), jobs, |k| -> Result<(PolicyLibraryEntry, DrEntryReport)> {
        let (li, e) = tasks[k];
        let (inst, lib) = &libs[li];
        let mut entry = lib.entries[e].clone();
        let (pos, team) = rollout_team(cfg, &entry.source_team_id)?;
        let mates = refs(&teams[pos]);
        let seed = derive_seed(cfg.seed, &[tag::DR, *inst as u64, e as u64]);
        let mut rng = Rng64::seed_from_u64(seed);
        let mut report = DrEntryReport {
            instance: *inst,
            entry: e,
            source_team: entry.source_team_id.clone(),
            rollout_team: team.id.clone(),
            branch: cfg.dr.branch,
            seed,
            weights: None,
            residual_rms: None,
            rank: None,
            samples: None,
            ridge: None,
            td_episodes: None,
            td_rows: None,
        };
        match cfg.dr.branch {
            DrBranch::Linear => {
                let samples = collect_dr_dataset(env, &entry.policy, &mates, cfg.dr.episodes, cfg.dr.counterfactual, &mut rng)?;
                let mut w = fit_dr_weights(&samples)?;
                w.source_team_id = team.id.clone();
                report.weights = Some(w.weights.0.clone());
                report.residual_rms = Some(w.residual_rms);
                report.rank = Some(w.rank);
                report.samples = Some(w.samples);
                report.ridge = Some(w.ridge);
                entry.dr_weight = Some(w);
                entry.dr_q = None;
            }
            DrBranch::General => {
                let q = td_policy_eval_dr(
                    env,
                    &entry.policy,
                    &mates,
                    &team.id,
                    cfg.dr.td_episodes,
                    cfg.dr.td_alpha,
                    cfg.training.gamma,
                    cfg.dr.counterfactual,
                    &mut rng,
                )?;
                report.td_episodes = Some(q.episodes_used);
                report.td_rows = Some(q.values.len());
                entry.dr_q = Some(q);
                entry.dr_weight = None;
            }
        }
        Ok((entry, report))
    })?;
    let mut reports = Vec::new();
    let mut it = fitted.into_iter();
    for (inst, lib) in &mut libs {
        for slot in lib.entries.iter_mut() {
            let (entry, report) = it.next().expect("one result per task");
            *slot = entry;
            reports.push(report);
        }
        lib.save(&layout.library(*inst))?;
    }
    let report = DrReport {
        stage: "fit_dr",
        code_version: CODE_VERSION,
        pretrain_hash: cfg.pretrain_hash(),
        dr: &cfg.dr,
        entries: reports,
        files: files[..files.len() - 1].iter().map(|f| file_record(f)).collect::<Result<_>>()?,
    };
    write_json(&layout.dr_report(), &report)?;
    Ok(StageOutcome { cache_hit: false, files })
}

/// Output format for trajectory renders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    Svg,
    Ascii,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Overrides `eval.methods`.
    pub methods: Option<Vec<Method>>,
    pub render: Option<RenderFormat>,
}

#[derive(Serialize)]
struct EvalManifest {
    stage: &'static str,
    code_version: &'static str,
    config_hash: String,
    pretrain_hash: String,
    methods: Vec<&'static str>,
    replicate_seeds: Vec<u64>,
    bootstrap_seeds: BTreeMap<String, u64>,
    plastic_selection: BTreeMap<String, Vec<usize>>,
    decisions: BTreeMap<&'static str, String>,
    libraries: Vec<FileRecord>,
    config_toml: String,
}

struct MethodRun {
    logs: Vec<EpisodeLog>,
    usage: Option<UsageStats>,
    selected: Option<usize>,
}

fn load_library(path: &Path) -> Result<PolicyLibrary> {
    PolicyLibrary::load(path)
}

fn single_entry(lib: &PolicyLibrary, path: &Path) -> Result<SfLearnerPolicy> {
    lib.entries
        .first()
        .map(|e| e.policy.clone())
        .ok_or_else(|| Error::Load(format!("{} has no entries", path.display())))
}

/// Oracle policies, trained on demand and cached next to the libraries.
fn oracle_policies<E: ExperimentEnv>(env: &E, cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> Result<Vec<SfLearnerPolicy>> {
    let insts = cfg.instances();
    let target = build_team(env, &cfg.target_team, &cfg.training)?;
    let encoding = env.default_encoding();
    par::try_map_range(insts, jobs, |inst| {
        let path = layout.oracle(inst);
        if cfg.reuse && path.exists() {
            return single_entry(&load_library(&path)?, &path);
        }
        let seed = derive_seed(cfg.seed, &[tag::ORACLE, inst as u64, cfg.target_team.seed]);
        let mut rng = Rng64::seed_from_u64(seed);
        let (policy, report) = train_oracle(env, &refs(&target), &cfg.training, encoding, &mut rng)?;
        let meta = TrainingMeta {
            seed,
            timesteps: report.steps,
            episodes: report.episodes,
            hyperparams_hash: cfg.training.hash(),
            team_draws: report.team_draws,
        };
        let mut lib = PolicyLibrary::new(env.feature_dim(), env.n_actions(), cfg.training.gamma);
        lib.push(PolicyLibraryEntry::new(EntryKind::Oracle, policy.clone(), cfg.target_team.id.clone(), meta))?;
        lib.save(&path)?;
        Ok(policy)
    })
}

/// Step 3 plus baselines: evaluates every method with the target team and
/// writes the result tables.
pub fn evaluate<E: ExperimentEnv>(env: &E, cfg: &ExperimentConfig, dir: &Path, jobs: usize, opts: &EvalOptions) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let layout = Layout::new(dir, cfg);
    let mut methods = opts.methods.clone().unwrap_or_else(|| cfg.eval.methods.clone());
    methods.sort();
    methods.dedup();
    let insts = cfg.instances();
    let needs_library = methods.iter().any(|m| matches!(m, Method::Gpat | Method::GpatNodr | Method::Plastic));
    let mut libraries = Vec::new();
    if needs_library {
        for inst in 0..insts {
            let lib = load_library(&layout.library(inst))?;
            if methods.contains(&Method::Gpat) && !lib.entries.iter().all(|e| e.dr_evaluated()) {
                return Err(Error::MissingArtifact(layout.dr_report()));
            }
            libraries.push(lib);
        }
    }
    let mut robust = Vec::new();
    if methods.contains(&Method::Robust) {
        for inst in 0..insts {
            let path = layout.robust(inst);
            robust.push(single_entry(&load_library(&path)?, &path)?);
        }
    }
    let oracle = if methods.contains(&Method::Oracle) {
        oracle_policies(env, cfg, &layout, jobs)?
    } else {
        Vec::new()
    };
    let target = build_team(env, &cfg.target_team, &cfg.training)?;
    let mates = refs(&target);
    let gamma = cfg.training.gamma;
    let ev = &cfg.eval;
    let mut rollout = RolloutOptions::new(env.horizon());
    rollout.team_id = cfg.target_team.id.clone();

    let mut rows = Vec::new();
    let mut plastic_selection = BTreeMap::new();
    let mut bootstrap_seeds = BTreeMap::new();
    fs::create_dir_all(dir)?;
    for &method in &methods {
        let mut matrix = Vec::with_capacity(ev.replicates);
        let mut usage_rows: Vec<(usize, UsageStats)> = Vec::new();
        let mut all_logs = Vec::new();
        let mut selected = Vec::new();
        for rep in 0..ev.replicates {
            let inst = cfg.instance_of(rep);
            let path = [tag::EVAL, rep as u64];
            let run = match method {
                Method::Oracle => MethodRun {
                    logs: run_episodes(env, &oracle[inst], &mates, ev.episodes, cfg.seed, &path, &rollout, jobs)?,
                    usage: None,
                    selected: None,
                },
                Method::Robust => MethodRun {
                    logs: run_episodes(env, &robust[inst], &mates, ev.episodes, cfg.seed, &path, &rollout, jobs)?,
                    usage: None,
                    selected: None,
                },
                Method::Gpat | Method::GpatNodr => {
                    let mode = if method == Method::Gpat { GpiMode::WithDr } else { GpiMode::WithoutDr };
                    let ex = GpiExecutor::new(libraries[inst].clone(), mode, env.team_weight().clone())?;
                    let (logs, usage) =
                        evaluate_zero_shot(&ex, env, &mates, &cfg.target_team.id, ev.episodes, cfg.seed, &path, jobs)?;
                    MethodRun { logs, usage: Some(usage), selected: None }
                }
                Method::Plastic => {
                    let lib = &libraries[inst];
                    let choice = plastic_best(lib, env, &mates, ev.plastic_episodes, gamma, cfg.seed, &[tag::PLASTIC, rep as u64], jobs)?;
                    let policy = &lib.entries[choice.index].policy;
                    MethodRun {
                        logs: run_episodes(env, policy, &mates, ev.episodes, cfg.seed, &path, &rollout, jobs)?,
                        usage: None,
                        selected: Some(choice.index),
                    }
                }
            };
            matrix.push(run.logs.iter().map(|l| discounted_return(l, gamma)).collect::<Vec<_>>());
            if let Some(u) = run.usage {
                usage_rows.push((rep, u));
            }
            if let Some(s) = run.selected {
                selected.push(s);
            }
            if rep == 0 {
                if let Some(fmt) = opts.render {
                    render_episodes(env, cfg, &layout, method, &oracle, &robust, &libraries, &selected, fmt, &mates)?;
                }
                if ev.write_logs {
                    let mut buf = Vec::new();
                    write_logs(&run.logs, &mut buf)?;
                    write_atomic(&dir.join(format!("logs_{}.jsonl", method.name())), &buf)?;
                }
            }
            if env.id() == "foraging" {
                all_logs.extend(run.logs);
            }
        }
        let matrix = ReplicateMatrix::new(matrix)?;
        let boot_seed = derive_seed(cfg.seed, &[tag::BOOTSTRAP, method as u64]);
        bootstrap_seeds.insert(method.name().to_string(), boot_seed);
        let mut row = ResultRow::from_matrix(method.name(), &matrix, ev.resamples, ev.level, boot_seed, jobs)?;
        if !usage_rows.is_empty() {
            let mut total = UsageStats::new(usage_rows[0].1.wins.len());
            for (_, u) in &usage_rows {
                total.merge(u);
            }
            row.usage = Some(join_values(&total.fractions()));
            write_usage_csv(&layout.usage(method), &usage_rows)?;
        }
        if !selected.is_empty() {
            row.selected_entry = Some(mode_of(&selected));
            plastic_selection.insert(method.name().to_string(), selected);
        }
        if !all_logs.is_empty() {
            let objects = objects_collected_stats(&all_logs)?;
            row.objects_team = Some(join_values(&objects.team));
            row.objects_learner = objects.per_agent.first().map(|v| join_values(v));
        }
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf)?;
        write_atomic(&layout.matrix(method), &buf)?;
        rows.push(row);
    }
    fill_pct_optimality(&mut rows);
    let mut buf = Vec::new();
    write_results_csv(&rows, &mut buf)?;
    write_atomic(&layout.results(), &buf)?;

    let mut lib_files = Vec::new();
    for inst in 0..insts {
        for p in [layout.library(inst), layout.robust(inst), layout.oracle(inst)] {
            if p.exists() {
                lib_files.push(file_record(&p)?);
            }
        }
    }
    let mut decisions = BTreeMap::new();
    decisions.insert("metric", format!("discounted team return, gamma {gamma}"));
    decisions.insert("iqm", "fractional trimmed mean of the middle 50%".to_string());
    decisions.insert("ci", format!("stratified percentile bootstrap, type-7 quantiles, {} resamples", ev.resamples));
    decisions.insert("gpi_tie_break", "lowest (entry, action)".to_string());
    decisions.insert("dr_branch", format!("{:?}", cfg.dr.branch).to_lowercase());
    decisions.insert("dr_counterfactual", format!("{:?}", cfg.dr.counterfactual));
    decisions.insert("encoding", env.default_encoding().tag());
    decisions.insert("replicate_mode", format!("{:?}", cfg.replicate_mode).to_lowercase());
    decisions.insert("plastic_episodes", ev.plastic_episodes.to_string());
    let manifest = EvalManifest {
        stage: "eval",
        code_version: CODE_VERSION,
        config_hash: cfg.config_hash(),
        pretrain_hash: cfg.pretrain_hash(),
        methods: methods.iter().map(|m| m.name()).collect(),
        replicate_seeds: (0..ev.replicates).map(|r| derive_seed(cfg.seed, &[tag::EVAL, r as u64])).collect(),
        bootstrap_seeds,
        plastic_selection,
        decisions,
        libraries: lib_files,
        config_toml: cfg.to_toml()?,
    };
    write_json(&layout.manifest(), &manifest)?;
    Ok(rows)
}

fn mode_of(values: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|&(_, c)| c == best).map_or(0, |(v, _)| v)
}

fn write_usage_csv(path: &Path, rows: &[(usize, UsageStats)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["replicate", "entry", "wins", "fraction", "agreement", "agreement_fraction"])?;
    for (rep, u) in rows {
        let (f, af) = (u.fractions(), u.agreement_fractions());
        for i in 0..u.wins.len() {
            out.write_record([
                rep.to_string(),
                i.to_string(),
                u.wins[i].to_string(),
                format!("{:.6}", f[i]),
                u.agreement[i].to_string(),
                format!("{:.6}", af[i]),
            ])?;
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[allow(clippy::too_many_arguments)]
fn render_episodes<E: ExperimentEnv>(
    env: &E,
    cfg: &ExperimentConfig,
    layout: &Layout,
    method: Method,
    oracle: &[SfLearnerPolicy],
    robust: &[SfLearnerPolicy],
    libraries: &[PolicyLibrary],
    selected: &[usize],
    fmt: RenderFormat,
    mates: &[&dyn Policy<E>],
) -> Result<()> {
    let executor;
    let learner: &dyn Policy<E> = match method {
        Method::Oracle => &oracle[0],
        Method::Robust => &robust[0],
        Method::Plastic => &libraries[0].entries[selected.first().copied().unwrap_or(0)].policy,
        Method::Gpat | Method::GpatNodr => {
            let mode = if method == Method::Gpat { GpiMode::WithDr } else { GpiMode::WithoutDr };
            executor = GpiExecutor::new(libraries[0].clone(), mode, env.team_weight().clone())?;
            &executor
        }
    };
    let dir = layout.dir.join("renders");
    fs::create_dir_all(&dir)?;
    for ep in 0..cfg.eval.render_episodes.min(cfg.eval.episodes) {
        let mut rng = rng_for(cfg.seed, &[tag::EVAL, 0, ep as u64]);
        let mut opts = RolloutOptions::new(env.horizon());
        opts.keep_states = true;
        let trace = rollout_with(env, &opts, learner, mates, &mut rng)?;
        let (name, body) = match fmt {
            RenderFormat::Svg => (format!("{}_ep{ep}.svg", method.name()), env.svg(&trace.states, 0)),
            RenderFormat::Ascii => (format!("{}_ep{ep}.txt", method.name()), crate::env::render::ascii_frames(env, &trace.states)),
        };
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

/// Runs `$body` with `$env` bound to the configured environment.
macro_rules! with_env {
    ($cfg:expr, $env:ident => $body:expr) => {
        match &$cfg.env {
            EnvSpec::Foraging(c) => {
                let $env = Foraging::new(c.clone())?;
                $body
            }
            EnvSpec::Pursuit(p) => {
                let $env = Pursuit::new(p.to_config())?;
                $body
            }
        }
    };
}

pub fn run_pretrain(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<StageOutcome> {
    with_env!(cfg, env => pretrain(&env, cfg, dir, jobs))
}

pub fn run_fit_dr(cfg: &ExperimentConfig, dir: &Path, jobs: usize, force: bool) -> Result<StageOutcome> {
    with_env!(cfg, env => fit_dr(&env, cfg, dir, jobs, force))
}

pub fn run_eval(cfg: &ExperimentConfig, dir: &Path, jobs: usize, opts: &EvalOptions) -> Result<Vec<ResultRow>> {
    with_env!(cfg, env => evaluate(&env, cfg, dir, jobs, opts))
}

/// All three stages in sequence. Existing DR values are refit unless
/// `reuse` is set.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<ResultRow>> {
    run_pretrain(cfg, dir, jobs)?;
    let needs_dr = cfg.eval.methods.contains(&Method::Gpat);
    if needs_dr {
        run_fit_dr(cfg, dir, jobs, !cfg.reuse)?;
    }
    run_eval(cfg, dir, jobs, &EvalOptions::default())
}

/// Human-readable table of a results file.
pub fn report(dir: &Path) -> Result<String> {
    let path = dir.join("results.csv");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let rows = crate::stats::read_results_csv(fs::File::open(&path)?)?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>9} {:>21} {:>8}  {:<16} objects(team)", "method", "iqm", "95% ci", "%opt", "usage");
    for r in rows {
        let pct = r.pct_optimality.map(|p| format!("{p:.1}%")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<10} {:>9.3} [{:>8.3}, {:>8.3}] {:>8}  {:<16} {}",
            r.method,
            r.iqm,
            r.ci_low,
            r.ci_high,
            pct,
            r.usage.as_deref().unwrap_or("-"),
            r.objects_team.as_deref().unwrap_or("-")
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for name in ExperimentConfig::PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{name}");
        }
        assert!(matches!(ExperimentConfig::preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn config_errors() {
        let mut cfg = ExperimentConfig::preset("exp1").unwrap();
        cfg.source_teams.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::preset("exp1").unwrap();
        cfg.target_team.id = "source1".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::preset("exp1").unwrap();
        cfg.dr.rollout_teams = vec!["target".into()];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::preset("pursuit").unwrap();
        cfg.target_team.teammates.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_hash_ignores_target_and_eval() {
        let a = ExperimentConfig::preset("exp1").unwrap();
        let mut b = a.clone();
        b.target_team.teammates = vec![TeammateSpec::Stationary];
        b.eval.resamples = 10;
        assert_eq!(a.pretrain_hash(), b.pretrain_hash());
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn method_lists() {
        assert_eq!(Method::parse_list("gpat_nodr,gpat,gpat").unwrap(), vec![Method::Gpat, Method::GpatNodr]);
        assert!(Method::parse_list("gpat,bogus").is_err());
        assert!(Method::parse_list("").is_err());
    }
}
