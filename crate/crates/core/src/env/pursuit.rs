//! Predator–prey pursuit: predators capture easy prey alone and hard prey in
//! pairs; prey random-walk inside their own regions.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{apply_move, clipped_offset, shifted, Region, ABSENT, DOWN, LEFT, N_MOVES, RIGHT, STAY, UP};
use crate::error::{Error, Result};
use crate::mmdp::{Cell, Environment, JointAction, ObsEncoding, ObsKey, Policy, Rng64, StepOutcome};
use crate::vector::{FeatureVector, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreyKind {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreySpec {
    pub kind: PreyKind,
    pub spawn: Cell,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitConfig {
    pub grid_size: usize,
    pub n_predators: usize,
    pub prey: Vec<PreySpec>,
    pub horizon: usize,
    pub team_weight: Vec<f64>,
    pub encoding: ObsEncoding,
    pub predator_spawn: Region,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        PursuitConfig::with_grid(13)
    }
}

impl PursuitConfig {
    /// Four prey in the four corner quadrants (easy top-left and bottom-right,
    /// hard top-right and bottom-left), predators spawning in the centre 3x3.
    pub fn with_grid(g: usize) -> Self {
        let h = g / 2;
        let quadrant = |top: bool, left: bool| {
            let (r0, r1) = if top { (0, h) } else { (h + 1, g) };
            let (c0, c1) = if left { (0, h) } else { (h + 1, g) };
            Region::new(r0, c0, r1, c1)
        };
        let prey = [(true, true, PreyKind::Easy), (true, false, PreyKind::Hard), (false, true, PreyKind::Hard), (false, false, PreyKind::Easy)]
            .into_iter()
            .map(|(top, left, kind)| {
                let region = quadrant(top, left);
                let spawn = Cell::new((region.row0 + region.row1) / 2, (region.col0 + region.col1) / 2);
                PreySpec { kind, spawn, region }
            })
            .collect();
        PursuitConfig {
            grid_size: g,
            n_predators: 3,
            prey,
            horizon: if g >= 13 { 60 } else { 40 },
            team_weight: vec![1.0; 4],
            encoding: ObsEncoding::Nearest { radius: 3, teammates: false },
            predator_spawn: Region::new(h.saturating_sub(1), h.saturating_sub(1), (h + 2).min(g), (h + 2).min(g)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PursuitState {
    pub predators: Vec<Cell>,
    pub prey: Vec<Cell>,
    pub alive: Vec<bool>,
    pub step: usize,
    /// Prey movement stream; cloning the state forks it.
    pub rng: Rng64,
}

#[derive(Clone, Debug)]
pub struct Pursuit {
    cfg: PursuitConfig,
    weight: WeightVector,
}

impl Pursuit {
    pub fn new(cfg: PursuitConfig) -> Result<Self> {
        let g = cfg.grid_size;
        if g < 5 {
            return Err(Error::config("pursuit grid_size must be at least 5"));
        }
        if cfg.n_predators < 2 {
            return Err(Error::config("pursuit needs at least two predators"));
        }
        if cfg.prey.is_empty() {
            return Err(Error::config("pursuit needs at least one prey"));
        }
        if cfg.team_weight.len() != cfg.prey.len() {
            return Err(Error::config(format!(
                "team_weight has length {}, expected one slot per prey ({})",
                cfg.team_weight.len(),
                cfg.prey.len()
            )));
        }
        for (i, p) in cfg.prey.iter().enumerate() {
            if !p.region.within(g) || !p.region.contains(p.spawn) {
                return Err(Error::config(format!("prey {i} region or spawn lies outside the grid")));
            }
        }
        if !cfg.predator_spawn.within(g) {
            return Err(Error::config("predator spawn region lies outside the grid"));
        }
        if cfg.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        let weight = WeightVector(cfg.team_weight.clone());
        Ok(Pursuit { cfg, weight })
    }

    pub fn config(&self) -> &PursuitConfig {
        &self.cfg
    }

    pub fn state_from(&self, predators: Vec<Cell>, prey: Vec<Cell>, seed: u64) -> Result<PursuitState> {
        if predators.len() != self.cfg.n_predators || prey.len() != self.cfg.prey.len() {
            return Err(Error::input("predator or prey count mismatch"));
        }
        let alive = vec![true; prey.len()];
        Ok(PursuitState { predators, prey, alive, step: 0, rng: Rng64::seed_from_u64(seed) })
    }

    /// Whether the prey at `cell` is caught by predators standing at `positions`.
    pub fn captured(&self, kind: PreyKind, cell: Cell, positions: &[Cell]) -> bool {
        match kind {
            PreyKind::Easy => positions.contains(&cell),
            PreyKind::Hard => positions.iter().filter(|&&p| p.manhattan(cell) <= 1).count() >= 2,
        }
    }

    fn capturer(&self, kind: PreyKind, cell: Cell, positions: &[Cell]) -> usize {
        positions
            .iter()
            .position(|&p| match kind {
                PreyKind::Easy => p == cell,
                PreyKind::Hard => p.manhattan(cell) <= 1,
            })
            .unwrap_or(0)
    }
}

impl Environment for Pursuit {
    type State = PursuitState;

    fn id(&self) -> &'static str {
        "pursuit"
    }

    fn n_agents(&self) -> usize {
        self.cfg.n_predators
    }

    fn n_actions(&self) -> usize {
        N_MOVES
    }

    fn feature_dim(&self) -> usize {
        self.cfg.prey.len()
    }

    fn team_weight(&self) -> &WeightVector {
        &self.weight
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn default_encoding(&self) -> ObsEncoding {
        self.cfg.encoding
    }

    fn factor_segment(&self, enc: ObsEncoding) -> Option<usize> {
        matches!(enc, ObsEncoding::Nearest { .. }).then_some(3)
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn reset(&self, rng: &mut Rng64) -> Result<PursuitState> {
        let spawn: Vec<Cell> = self.cfg.predator_spawn.cells().collect();
        let predators = (0..self.cfg.n_predators)
            .map(|_| spawn[rng.gen_range(0..spawn.len())])
            .collect();
        let prey = self.cfg.prey.iter().map(|p| p.spawn).collect();
        self.state_from(predators, prey, rng.gen())
    }

    fn step(&self, state: &PursuitState, joint: &JointAction) -> Result<StepOutcome<PursuitState>> {
        if self.is_terminal(state) {
            return Err(Error::state("step called on a terminal pursuit state"));
        }
        self.check_joint(joint)?;
        let g = self.cfg.grid_size;
        let predators: Vec<Cell> = state
            .predators
            .iter()
            .zip(&joint.0)
            .map(|(&c, &a)| apply_move(c, a, g))
            .collect();
        let d = self.cfg.prey.len();
        let mut features = FeatureVector::zeros(d);
        let mut credit = vec![FeatureVector::zeros(d); predators.len()];
        let mut alive = state.alive.clone();
        for (i, spec) in self.cfg.prey.iter().enumerate() {
            if alive[i] && self.captured(spec.kind, state.prey[i], &predators) {
                alive[i] = false;
                features.0[i] = 1.0;
                credit[self.capturer(spec.kind, state.prey[i], &predators)].0[i] = 1.0;
            }
        }
        let mut rng = state.rng.clone();
        let prey = state
            .prey
            .iter()
            .zip(&self.cfg.prey)
            .zip(&alive)
            .map(|((&c, spec), &live)| {
                if !live {
                    return c;
                }
                let a = rng.gen_range(0..N_MOVES);
                shifted(c, a, &spec.region).unwrap_or(c)
            })
            .collect();
        let next = PursuitState { predators, prey, alive, step: state.step + 1, rng };
        let cleared = next.alive.iter().all(|a| !a);
        let timed_out = next.step >= self.cfg.horizon;
        Ok(StepOutcome {
            reward: features.reward(&self.weight),
            features,
            credit,
            terminal: cleared || timed_out,
            truncated: timed_out && !cleared,
            next_state: next,
        })
    }

    fn is_terminal(&self, state: &PursuitState) -> bool {
        state.alive.iter().all(|a| !a) || state.step >= self.cfg.horizon
    }

    fn step_count(&self, state: &PursuitState) -> usize {
        state.step
    }

    fn encode(&self, state: &PursuitState, agent: usize, enc: ObsEncoding) -> ObsKey {
        let me = state.predators[agent];
        let others = || state.predators.iter().enumerate().filter(move |(i, _)| *i != agent).map(|(_, &c)| c);
        match enc {
            ObsEncoding::Toroidal => {
                let g = self.cfg.grid_size;
                let channels = self.cfg.prey.len() + 2;
                let mut bits = vec![0u8; channels * g * g];
                let wrap = |c: Cell| ((c.row + g - me.row) % g, (c.col + g - me.col) % g);
                for (i, &c) in state.prey.iter().enumerate() {
                    if state.alive[i] {
                        let (r, col) = wrap(c);
                        bits[(i * g + r) * g + col] = 1;
                    }
                }
                let mates = self.cfg.prey.len();
                for c in others() {
                    let (r, col) = wrap(c);
                    bits[(mates * g + r) * g + col] = 1;
                }
                ObsKey(bits.chunks(8).map(|ch| ch.iter().enumerate().fold(0u8, |a, (i, &b)| a | (b << i))).collect())
            }
            ObsEncoding::Absolute => {
                let mut key = vec![me.row as u8, me.col as u8];
                for c in others() {
                    key.extend([c.row as u8, c.col as u8]);
                }
                for (i, &c) in state.prey.iter().enumerate() {
                    key.extend(if state.alive[i] { [c.row as u8, c.col as u8] } else { ABSENT });
                }
                ObsKey(key)
            }
            ObsEncoding::Nearest { radius, teammates } => {
                let mut key = Vec::with_capacity(3 * self.cfg.prey.len() + 2 * self.cfg.n_predators);
                for (i, spec) in self.cfg.prey.iter().enumerate() {
                    if !state.alive[i] {
                        key.extend(ABSENT);
                        key.push(0);
                        continue;
                    }
                    key.extend(clipped_offset(me, state.prey[i], radius));
                    let helpers = match spec.kind {
                        PreyKind::Easy => 0,
                        PreyKind::Hard => others().filter(|c| c.manhattan(state.prey[i]) <= 1).count().min(2) as u8,
                    };
                    key.push(helpers);
                }
                if teammates {
                    for c in others() {
                        key.extend(clipped_offset(me, c, radius));
                    }
                }
                ObsKey(key)
            }
        }
    }

    fn frozen_features(
        &self,
        state: &PursuitState,
        joint: &JointAction,
        next: &PursuitState,
    ) -> Result<FeatureVector> {
        self.check_joint(joint)?;
        let g = self.cfg.grid_size;
        let positions: Vec<Cell> = state
            .predators
            .iter()
            .zip(&joint.0)
            .map(|(&c, &a)| apply_move(c, a, g))
            .collect();
        let mut phi = FeatureVector::zeros(self.cfg.prey.len());
        for (i, spec) in self.cfg.prey.iter().enumerate() {
            if state.alive[i] && !next.alive[i] && self.captured(spec.kind, state.prey[i], &positions) {
                phi.0[i] = 1.0;
            }
        }
        Ok(phi)
    }

    fn grid_size(&self) -> usize {
        self.cfg.grid_size
    }

    fn agent_positions(&self, state: &PursuitState) -> Vec<Cell> {
        state.predators.clone()
    }

    fn with_agent_at(&self, state: &PursuitState, agent: usize, cell: Cell) -> Option<PursuitState> {
        let g = self.cfg.grid_size;
        let occupied = state.prey.iter().zip(&state.alive).any(|(&p, &a)| a && p == cell);
        if cell.row >= g || cell.col >= g || occupied {
            return None;
        }
        let mut s = state.clone();
        s.predators[agent] = cell;
        Some(s)
    }
}

/// Greedy pursuit of the nearest alive preferred prey (ties by prey index).
/// Closes the larger axis gap first, vertical on ties.
#[derive(Clone, Debug, PartialEq)]
pub struct PredatorPolicy {
    pub preferred: Vec<usize>,
}

impl PredatorPolicy {
    pub fn new(preferred: Vec<usize>) -> Self {
        PredatorPolicy { preferred }
    }
}

impl Policy<Pursuit> for PredatorPolicy {
    fn act(&self, _: &Pursuit, state: &PursuitState, agent: usize, _: &mut Rng64) -> usize {
        let me = state.predators[agent];
        let target = self
            .preferred
            .iter()
            .filter(|&&i| state.alive.get(i).copied().unwrap_or(false))
            .map(|&i| (me.manhattan(state.prey[i]), i))
            .min();
        let Some((_, i)) = target else {
            return STAY;
        };
        let to = state.prey[i];
        let dr = to.row as isize - me.row as isize;
        let dc = to.col as isize - me.col as isize;
        if dr == 0 && dc == 0 {
            STAY
        } else if dr.abs() >= dc.abs() {
            if dr < 0 { UP } else { DOWN }
        } else if dc < 0 {
            LEFT
        } else {
            RIGHT
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmdp::{rollout, ConstantPolicy};

    fn env() -> Pursuit {
        Pursuit::new(PursuitConfig::with_grid(9)).unwrap()
    }

    #[test]
    fn easy_capture_by_one_predator() {
        let e = env();
        let s = e
            .state_from(vec![Cell::new(2, 1), Cell::new(4, 4), Cell::new(4, 4)], vec![Cell::new(2, 2), Cell::new(2, 6), Cell::new(6, 2), Cell::new(6, 6)], 0)
            .unwrap();
        let out = e.step(&s, &JointAction(vec![RIGHT, STAY, STAY])).unwrap();
        assert_eq!(out.features.0, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.reward, 1.0);
        assert!(!out.next_state.alive[0]);
        let out = e.step(&s, &JointAction(vec![STAY, STAY, STAY])).unwrap();
        assert_eq!(out.features.0, vec![0.0; 4]);
    }

    #[test]
    fn hard_capture_needs_two() {
        let e = env();
        let prey = vec![Cell::new(2, 2), Cell::new(2, 6), Cell::new(6, 2), Cell::new(6, 6)];
        let alone = e.state_from(vec![Cell::new(2, 5), Cell::new(4, 4), Cell::new(4, 4)], prey.clone(), 0).unwrap();
        let out = e.step(&alone, &JointAction(vec![STAY, STAY, STAY])).unwrap();
        assert_eq!(out.features.0[1], 0.0);
        let pair = e.state_from(vec![Cell::new(2, 4), Cell::new(3, 7), Cell::new(4, 4)], prey, 0).unwrap();
        let out = e.step(&pair, &JointAction(vec![RIGHT, UP, STAY])).unwrap();
        assert_eq!(out.features.0, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn prey_stay_in_regions_and_captures_are_final() {
        let e = env();
        let mate = PredatorPolicy::new(vec![0, 1, 2, 3]);
        for seed in 0..20 {
            let mut rng = Rng64::seed_from_u64(seed);
            let mut s = e.reset(&mut rng).unwrap();
            let mut captured = [0.0; 4];
            while !e.is_terminal(&s) {
                let joint = JointAction((0..3).map(|i| mate.act(&e, &s, i, &mut rng)).collect());
                let out = e.step(&s, &joint).unwrap();
                for (i, spec) in e.config().prey.iter().enumerate() {
                    assert!(spec.region.contains(out.next_state.prey[i]));
                    if !s.alive[i] {
                        assert_eq!(out.next_state.prey[i], s.prey[i]);
                    }
                }
                for (c, f) in captured.iter_mut().zip(out.features.as_slice()) {
                    *c += f;
                }
                s = out.next_state;
            }
            assert!(captured.iter().all(|&c| c == 0.0 || c == 1.0));
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let e = env();
        let mate = PredatorPolicy::new(vec![0, 2]);
        let learner = ConstantPolicy(STAY);
        let a = rollout(&e, &learner, &[&mate, &mate], &mut Rng64::seed_from_u64(5), 40).unwrap();
        let b = rollout(&e, &learner, &[&mate, &mate], &mut Rng64::seed_from_u64(5), 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scripted_predator_choices() {
        let e = env();
        let prey = vec![Cell::new(1, 4), Cell::new(2, 6), Cell::new(6, 2), Cell::new(6, 6)];
        let mut s = e.state_from(vec![Cell::new(4, 4), Cell::new(4, 4), Cell::new(4, 4)], prey, 0).unwrap();
        let mut rng = Rng64::seed_from_u64(0);
        assert_eq!(PredatorPolicy::new(vec![0]).act(&e, &s, 0, &mut rng), UP);
        s.alive = vec![false; 4];
        assert_eq!(PredatorPolicy::new(vec![0, 1]).act(&e, &s, 0, &mut rng), STAY);
    }

    #[test]
    fn left_preferring_team_ignores_right_prey() {
        let e = env();
        let mate = PredatorPolicy::new(vec![0, 2]);
        let learner = ConstantPolicy(STAY);
        for seed in 0..10 {
            let log = rollout(&e, &learner, &[&mate, &mate], &mut Rng64::seed_from_u64(seed), 40).unwrap();
            let total = log.feature_totals();
            assert_eq!((total[1], total[3]), (0.0, 0.0));
        }
    }
}
