//! Cooperative foraging: agents collect three object types (red, orange,
//! yellow) clustered in separate quadrants of a square grid.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_move, clipped_offset, Region, ABSENT, N_MOVES, STAY};
use crate::error::{Error, Result};
use crate::mmdp::{Cell, Environment, JointAction, ObsEncoding, ObsKey, Policy, Rng64, StepOutcome};
use crate::vector::{FeatureVector, WeightVector};

pub const TYPE_NAMES: [&str; 3] = ["red", "orange", "yellow"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub cell: Cell,
    pub kind: usize,
}

/// Fixed start state, replacing the random spawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedLayout {
    pub agents: Vec<Cell>,
    pub objects: Vec<PlacedObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForagingConfig {
    pub grid_size: usize,
    pub objects_per_type: usize,
    pub n_types: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub team_weight: Vec<f64>,
    pub encoding: ObsEncoding,
    pub layout: Option<FixedLayout>,
}

impl Default for ForagingConfig {
    fn default() -> Self {
        ForagingConfig {
            grid_size: 8,
            objects_per_type: 5,
            n_types: 3,
            n_agents: 2,
            horizon: 50,
            team_weight: vec![1.0; 3],
            encoding: ObsEncoding::Nearest { radius: 2, teammates: false },
            layout: None,
        }
    }
}

impl ForagingConfig {
    /// A smaller board with a 30-step horizon.
    pub fn reduced(grid_size: usize, objects_per_type: usize) -> Self {
        ForagingConfig { grid_size, objects_per_type, horizon: 30, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForagingState {
    pub agents: Vec<Cell>,
    /// Row-major; 0 is empty, `k + 1` holds an object of type `k`.
    pub grid: Vec<u8>,
    pub remaining: Vec<u32>,
    pub step: usize,
}

impl ForagingState {
    pub fn object_at(&self, c: Cell, size: usize) -> Option<usize> {
        match self.grid[c.row * size + c.col] {
            0 => None,
            k => Some(k as usize - 1),
        }
    }

    pub fn objects_left(&self) -> u32 {
        self.remaining.iter().sum()
    }
}

/// Agent-centric toroidal channel stack: one channel per object type, one
/// for teammates, one for walls.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn get(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.data[(channel * self.size + row) * self.size + col]
    }

    fn set(&mut self, channel: usize, row: usize, col: usize) {
        self.data[(channel * self.size + row) * self.size + col] = 1;
    }

    /// Bit-packed bytes, usable as a table key.
    pub fn pack(&self) -> Vec<u8> {
        self.data
            .chunks(8)
            .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << i)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Foraging {
    cfg: ForagingConfig,
    weight: WeightVector,
    quadrants: Vec<Region>,
    spawn: Region,
}

impl Foraging {
    pub fn new(cfg: ForagingConfig) -> Result<Self> {
        let g = cfg.grid_size;
        if g < 4 {
            return Err(Error::config("foraging grid_size must be at least 4"));
        }
        if cfg.objects_per_type == 0 {
            return Err(Error::config("objects_per_type must be at least 1"));
        }
        if !(1..=3).contains(&cfg.n_types) {
            return Err(Error::config("foraging supports 1 to 3 object types"));
        }
        if cfg.n_agents < 2 {
            return Err(Error::config("foraging needs at least two agents"));
        }
        if cfg.team_weight.len() != cfg.n_types {
            return Err(Error::config(format!(
                "team_weight has length {}, expected {}",
                cfg.team_weight.len(),
                cfg.n_types
            )));
        }
        if cfg.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        let h = g / 2;
        // red upper-left, orange upper-right, yellow lower-right; agents lower-left
        let quadrants = vec![Region::new(0, 0, h, h), Region::new(0, h, h, g), Region::new(h, h, g, g)];
        let spawn = Region::new(h, 0, g, h);
        if cfg.layout.is_none() {
            let smallest = quadrants.iter().map(Region::area).min().unwrap_or(0);
            if cfg.objects_per_type > smallest {
                return Err(Error::config(format!(
                    "quadrant of {smallest} cells cannot hold {} objects",
                    cfg.objects_per_type
                )));
            }
        }
        if let Some(layout) = &cfg.layout {
            if layout.agents.len() != cfg.n_agents {
                return Err(Error::config("fixed layout agent count mismatch"));
            }
            let inside = |c: &Cell| c.row < g && c.col < g;
            if !layout.agents.iter().all(inside) || !layout.objects.iter().all(|o| inside(&o.cell)) {
                return Err(Error::config("fixed layout cell outside the grid"));
            }
            if layout.objects.iter().any(|o| o.kind >= cfg.n_types) {
                return Err(Error::config("fixed layout object type out of range"));
            }
            for o in &layout.objects {
                if layout.agents.contains(&o.cell) {
                    return Err(Error::config("fixed layout places an agent on an object"));
                }
            }
        }
        let weight = WeightVector(cfg.team_weight.clone());
        Ok(Foraging { cfg, weight, quadrants, spawn })
    }

    pub fn config(&self) -> &ForagingConfig {
        &self.cfg
    }

    pub fn n_types(&self) -> usize {
        self.cfg.n_types
    }

    pub fn quadrant(&self, kind: usize) -> Region {
        self.quadrants[kind]
    }

    pub fn spawn_region(&self) -> Region {
        self.spawn
    }

    /// Builds a state directly, for constructed test boards.
    pub fn state_from(&self, agents: Vec<Cell>, objects: &[PlacedObject]) -> Result<ForagingState> {
        let g = self.cfg.grid_size;
        if agents.len() != self.cfg.n_agents {
            return Err(Error::input("agent count mismatch"));
        }
        let mut grid = vec![0u8; g * g];
        let mut remaining = vec![0u32; self.cfg.n_types];
        for o in objects {
            if o.kind >= self.cfg.n_types || o.cell.row >= g || o.cell.col >= g {
                return Err(Error::input("object outside grid or of unknown type"));
            }
            let slot = &mut grid[o.cell.row * g + o.cell.col];
            if *slot != 0 {
                return Err(Error::input("two objects in one cell"));
            }
            *slot = o.kind as u8 + 1;
            remaining[o.kind] += 1;
        }
        Ok(ForagingState { agents, grid, remaining, step: 0 })
    }

    /// Agent-centric toroidal view: world cell `(x, y)` appears at
    /// `((x - r) mod G, (y - c) mod G)` for an agent at `(r, c)`.
    pub fn observe(&self, state: &ForagingState, agent: usize) -> Observation {
        let g = self.cfg.grid_size;
        let nt = self.cfg.n_types;
        let mut obs = Observation { size: g, channels: nt + 2, data: vec![0; (nt + 2) * g * g] };
        let me = state.agents[agent];
        let wrap = |c: Cell| ((c.row + g - me.row) % g, (c.col + g - me.col) % g);
        for row in 0..g {
            for col in 0..g {
                if let Some(k) = state.object_at(Cell::new(row, col), g) {
                    let (r, c) = wrap(Cell::new(row, col));
                    obs.set(k, r, c);
                }
            }
        }
        for (i, &pos) in state.agents.iter().enumerate() {
            if i != agent {
                let (r, c) = wrap(pos);
                obs.set(nt, r, c);
            }
        }
        obs
    }

    fn nearest_of_type(&self, state: &ForagingState, from: Cell, kind: usize) -> Option<Cell> {
        if state.remaining[kind] == 0 {
            return None;
        }
        let g = self.cfg.grid_size;
        let target = kind as u8 + 1;
        (0..g * g)
            .filter(|&i| state.grid[i] == target)
            .map(|i| Cell::new(i / g, i % g))
            .min_by_key(|&c| (from.manhattan(c), c))
    }

    fn collected_by(&self, state: &ForagingState, positions: &[Cell]) -> (FeatureVector, Vec<FeatureVector>, Vec<u8>) {
        let g = self.cfg.grid_size;
        let nt = self.cfg.n_types;
        let mut grid = state.grid.clone();
        let mut phi = FeatureVector::zeros(nt);
        let mut credit = vec![FeatureVector::zeros(nt); positions.len()];
        for (agent, p) in positions.iter().enumerate() {
            let cell = &mut grid[p.row * g + p.col];
            if *cell != 0 {
                let k = *cell as usize - 1;
                phi.0[k] += 1.0;
                credit[agent].0[k] += 1.0;
                *cell = 0;
            }
        }
        (phi, credit, grid)
    }
}

impl Environment for Foraging {
    type State = ForagingState;

    fn id(&self) -> &'static str {
        "foraging"
    }

    fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    fn n_actions(&self) -> usize {
        N_MOVES
    }

    fn feature_dim(&self) -> usize {
        self.cfg.n_types
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
        true
    }

    fn reset(&self, rng: &mut Rng64) -> Result<ForagingState> {
        if let Some(layout) = &self.cfg.layout {
            return self.state_from(layout.agents.clone(), &layout.objects);
        }
        let mut objects = Vec::with_capacity(self.cfg.n_types * self.cfg.objects_per_type);
        for kind in 0..self.cfg.n_types {
            let q = self.quadrants[kind];
            let cells: Vec<Cell> = q.cells().collect();
            for i in sample(rng, cells.len(), self.cfg.objects_per_type) {
                objects.push(PlacedObject { cell: cells[i], kind });
            }
        }
        let spawn: Vec<Cell> = self.spawn.cells().collect();
        let agents = (0..self.cfg.n_agents)
            .map(|_| spawn[rng.gen_range(0..spawn.len())])
            .collect();
        self.state_from(agents, &objects)
    }

    fn step(&self, state: &ForagingState, joint: &JointAction) -> Result<StepOutcome<ForagingState>> {
        if self.is_terminal(state) {
            return Err(Error::state("step called on a terminal foraging state"));
        }
        self.check_joint(joint)?;
        let g = self.cfg.grid_size;
        let agents: Vec<Cell> = state
            .agents
            .iter()
            .zip(&joint.0)
            .map(|(&c, &a)| apply_move(c, a, g))
            .collect();
        let (features, credit, grid) = self.collected_by(state, &agents);
        let remaining = state
            .remaining
            .iter()
            .zip(&features.0)
            .map(|(&r, &f)| r - f as u32)
            .collect::<Vec<_>>();
        let next = ForagingState { agents, grid, remaining, step: state.step + 1 };
        let cleared = next.objects_left() == 0;
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

    fn is_terminal(&self, state: &ForagingState) -> bool {
        state.objects_left() == 0 || state.step >= self.cfg.horizon
    }

    fn step_count(&self, state: &ForagingState) -> usize {
        state.step
    }

    fn encode(&self, state: &ForagingState, agent: usize, enc: ObsEncoding) -> ObsKey {
        match enc {
            ObsEncoding::Toroidal => ObsKey(self.observe(state, agent).pack()),
            ObsEncoding::Absolute => {
                let mut key = Vec::with_capacity(2 * state.agents.len() + state.grid.len());
                let me = state.agents[agent];
                key.extend([me.row as u8, me.col as u8]);
                for (i, c) in state.agents.iter().enumerate() {
                    if i != agent {
                        key.extend([c.row as u8, c.col as u8]);
                    }
                }
                key.extend_from_slice(&state.grid);
                ObsKey(key)
            }
            ObsEncoding::Nearest { radius, teammates } => {
                let me = state.agents[agent];
                let mut key = Vec::with_capacity(3 * self.cfg.n_types + 2 * state.agents.len());
                for kind in 0..self.cfg.n_types {
                    let off = self
                        .nearest_of_type(state, me, kind)
                        .map_or(ABSENT, |c| clipped_offset(me, c, radius));
                    key.extend(off);
                    key.push(state.remaining[kind].min(u8::MAX as u32) as u8);
                }
                if teammates {
                    for (i, &c) in state.agents.iter().enumerate() {
                        if i != agent {
                            key.extend(clipped_offset(me, c, radius));
                        }
                    }
                }
                ObsKey(key)
            }
        }
    }

    fn frozen_features(
        &self,
        state: &ForagingState,
        joint: &JointAction,
        next: &ForagingState,
    ) -> Result<FeatureVector> {
        self.check_joint(joint)?;
        let g = self.cfg.grid_size;
        let positions: Vec<Cell> = state
            .agents
            .iter()
            .zip(&joint.0)
            .map(|(&c, &a)| apply_move(c, a, g))
            .collect();
        let mut phi = FeatureVector::zeros(self.cfg.n_types);
        for i in 0..g * g {
            let (before, after) = (state.grid[i], next.grid[i]);
            if before != 0 && after == 0 && positions.contains(&Cell::new(i / g, i % g)) {
                phi.0[before as usize - 1] += 1.0;
            }
        }
        Ok(phi)
    }

    fn grid_size(&self) -> usize {
        self.cfg.grid_size
    }

    fn agent_positions(&self, state: &ForagingState) -> Vec<Cell> {
        state.agents.clone()
    }

    fn with_agent_at(&self, state: &ForagingState, agent: usize, cell: Cell) -> Option<ForagingState> {
        let g = self.cfg.grid_size;
        if cell.row >= g || cell.col >= g || state.object_at(cell, g).is_some() {
            return None;
        }
        let mut s = state.clone();
        s.agents[agent] = cell;
        Some(s)
    }
}

/// Greedy scripted forager: walks a shortest path to the nearest object whose
/// preference weight is positive, treating objects it dislikes (weight ≤ 0)
/// as obstacles. Ties break by (row, col, type), then by action index.
#[derive(Clone, Debug, PartialEq)]
pub struct ForagerPolicy {
    pub preference: Vec<f64>,
}

impl ForagerPolicy {
    pub fn new(preference: Vec<f64>) -> Self {
        ForagerPolicy { preference }
    }

    fn likes(&self, kind: usize) -> bool {
        self.preference.get(kind).is_some_and(|&w| w > 0.0)
    }

    fn passable(&self, state: &ForagingState, g: usize, c: Cell) -> bool {
        state.object_at(c, g).is_none_or(|k| self.likes(k))
    }

    fn distances(&self, state: &ForagingState, g: usize, from: Cell) -> Vec<usize> {
        let mut dist = vec![usize::MAX; g * g];
        dist[from.row * g + from.col] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[c.row * g + c.col];
            for a in 0..4 {
                let n = apply_move(c, a, g);
                if n != c && dist[n.row * g + n.col] == usize::MAX && self.passable(state, g, n) {
                    dist[n.row * g + n.col] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

impl Policy<Foraging> for ForagerPolicy {
    fn act(&self, env: &Foraging, state: &ForagingState, agent: usize, _: &mut Rng64) -> usize {
        let g = env.grid_size();
        let me = state.agents[agent];
        let from_me = self.distances(state, g, me);
        let target = (0..g * g)
            .filter_map(|i| {
                let c = Cell::new(i / g, i % g);
                let k = state.object_at(c, g)?;
                (self.likes(k) && from_me[i] != usize::MAX).then_some((from_me[i], c.row, c.col, k))
            })
            .min();
        let Some((d, row, col, _)) = target else {
            return STAY;
        };
        let to_target = self.distances(state, g, Cell::new(row, col));
        (0..4)
            .find(|&a| {
                let n = apply_move(me, a, g);
                n != me && to_target[n.row * g + n.col] == d - 1
            })
            .unwrap_or(STAY)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DOWN, LEFT, RIGHT, UP};
    use crate::mmdp::ConstantPolicy;
    use rand::SeedableRng;

    fn obj(row: usize, col: usize, kind: usize) -> PlacedObject {
        PlacedObject { cell: Cell::new(row, col), kind }
    }

    fn env(g: usize, per: usize) -> Foraging {
        Foraging::new(ForagingConfig::reduced(g, per)).unwrap()
    }

    #[test]
    fn default_reset_clusters_types_in_quadrants() {
        let e = Foraging::new(ForagingConfig::default()).unwrap();
        for seed in 0..20 {
            let s = e.reset(&mut Rng64::seed_from_u64(seed)).unwrap();
            assert_eq!(s.remaining, vec![5, 5, 5]);
            for row in 0..8 {
                for col in 0..8 {
                    if let Some(k) = s.object_at(Cell::new(row, col), 8) {
                        assert!(e.quadrant(k).contains(Cell::new(row, col)));
                    }
                }
            }
            assert!(s.agents.iter().all(|&a| e.spawn_region().contains(a)));
        }
    }

    #[test]
    fn small_board_has_one_object_per_quadrant() {
        let e = env(4, 1);
        let s = e.reset(&mut Rng64::seed_from_u64(3)).unwrap();
        assert_eq!(s.objects_left(), 3);
        let a = e.reset(&mut Rng64::seed_from_u64(9)).unwrap();
        let b = e.reset(&mut Rng64::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_quadrant_request_is_a_config_error() {
        let err = Foraging::new(ForagingConfig::reduced(4, 5)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn collecting_rules() {
        let e = env(6, 2);
        let s = e
            .state_from(vec![Cell::new(1, 1), Cell::new(4, 4)], &[obj(1, 2, 0), obj(4, 5, 2), obj(0, 4, 1)])
            .unwrap();
        let out = e.step(&s, &JointAction(vec![RIGHT, STAY])).unwrap();
        assert_eq!(out.features.0, vec![1.0, 0.0, 0.0]);
        assert_eq!(out.reward, 1.0);
        let out = e.step(&s, &JointAction(vec![STAY, STAY])).unwrap();
        assert_eq!(out.features.0, vec![0.0; 3]);
        let out = e.step(&s, &JointAction(vec![RIGHT, RIGHT])).unwrap();
        assert_eq!(out.features.0, vec![1.0, 0.0, 1.0]);
        assert_eq!(out.reward, 2.0);
        assert_eq!(out.credit[0].0, vec![1.0, 0.0, 0.0]);
        assert_eq!(out.credit[1].0, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_object_counts_once() {
        let e = env(6, 2);
        let s = e
            .state_from(vec![Cell::new(1, 1), Cell::new(1, 3)], &[obj(1, 2, 0), obj(5, 5, 2)])
            .unwrap();
        let out = e.step(&s, &JointAction(vec![RIGHT, LEFT])).unwrap();
        assert_eq!(out.features.0, vec![1.0, 0.0, 0.0]);
        assert_eq!(out.credit[0].0, vec![1.0, 0.0, 0.0]);
        assert_eq!(out.credit[1].0, vec![0.0; 3]);
    }

    #[test]
    fn bad_action_and_terminal_step_are_errors() {
        let e = env(4, 1);
        let s = e.reset(&mut Rng64::seed_from_u64(0)).unwrap();
        assert!(matches!(e.step(&s, &JointAction(vec![7, 0])), Err(Error::Input(_))));
        let mut done = s.clone();
        done.step = e.horizon();
        assert!(matches!(e.step(&done, &JointAction(vec![0, 0])), Err(Error::State(_))));
    }

    #[test]
    fn observation_translation() {
        let e = env(6, 2);
        let objs = [obj(0, 1, 0), obj(2, 4, 1), obj(5, 5, 2)];
        let at_origin = e.state_from(vec![Cell::new(0, 0), Cell::new(3, 2)], &objs).unwrap();
        let o = e.observe(&at_origin, 0);
        assert_eq!(o.get(0, 0, 1), 1);
        assert_eq!(o.get(1, 2, 4), 1);
        assert_eq!(o.get(2, 5, 5), 1);
        assert_eq!(o.get(3, 3, 2), 1);
        assert_eq!(o.data.iter().map(|&b| b as usize).sum::<usize>(), 4);
        let moved = e.state_from(vec![Cell::new(4, 3), Cell::new(3, 2)], &objs).unwrap();
        let o = e.observe(&moved, 0);
        // (x - r) mod G
        assert_eq!(o.get(0, 2, 4), 1);
        assert_eq!(o.get(3, 5, 5), 1);
        let walls: u32 = (0..6).flat_map(|r| (0..6).map(move |c| (r, c))).map(|(r, c)| o.get(4, r, c) as u32).sum();
        assert_eq!(walls, 0);
    }

    #[test]
    fn scripted_forager_moves_toward_preferred() {
        let e = env(6, 2);
        let p = ForagerPolicy::new(vec![1.0, 0.0, 0.0]);
        let s = e.state_from(vec![Cell::new(1, 1), Cell::new(5, 0)], &[obj(1, 2, 0)]).unwrap();
        assert_eq!(p.act(&e, &s, 0, &mut Rng64::seed_from_u64(0)), RIGHT);
        let s = e.state_from(vec![Cell::new(2, 2), Cell::new(5, 0)], &[obj(0, 2, 0)]).unwrap();
        assert_eq!(p.act(&e, &s, 0, &mut Rng64::seed_from_u64(0)), UP);
        // a disliked object blocks the direct route
        let s = e
            .state_from(vec![Cell::new(3, 0), Cell::new(5, 5)], &[obj(0, 0, 0), obj(2, 0, 1)])
            .unwrap();
        let a = p.act(&e, &s, 0, &mut Rng64::seed_from_u64(0));
        assert_eq!(a, RIGHT);
        let nothing = ForagerPolicy::new(vec![-0.5, -0.5, -0.5]);
        assert_eq!(nothing.act(&e, &s, 0, &mut Rng64::seed_from_u64(0)), STAY);
        let _ = DOWN;
    }

    fn run_pref(pref: Vec<f64>, seeds: u64) -> Vec<f64> {
        let e = Foraging::new(ForagingConfig::default()).unwrap();
        let mate = ForagerPolicy::new(pref);
        let learner = ConstantPolicy(STAY);
        let mut totals = vec![0.0; 3];
        for seed in 0..seeds {
            let mut rng = Rng64::seed_from_u64(seed);
            let log = crate::mmdp::rollout(&e, &learner, &[&mate], &mut rng, e.horizon()).unwrap();
            let c = log.credit_totals(1);
            for k in 0..3 {
                totals[k] += c[k];
            }
            assert_eq!(log.credit_totals(0).0, vec![0.0; 3]);
        }
        totals
    }

    #[test]
    fn preference_selects_collected_types() {
        let red = run_pref(vec![1.0, -0.5, -0.5], 10);
        assert_eq!(red[0], 50.0);
        assert_eq!((red[1], red[2]), (0.0, 0.0));
        let yellow = run_pref(vec![-0.5, -0.5, 1.0], 10);
        assert_eq!(yellow[2], 50.0);
        assert_eq!((yellow[0], yellow[1]), (0.0, 0.0));
    }

    #[test]
    fn encodings_are_distinct_per_state() {
        let e = env(6, 2);
        let a = e.state_from(vec![Cell::new(4, 1), Cell::new(5, 0)], &[obj(1, 1, 0)]).unwrap();
        let b = e.state_from(vec![Cell::new(4, 2), Cell::new(5, 0)], &[obj(1, 1, 0)]).unwrap();
        for enc in [ObsEncoding::Absolute, ObsEncoding::Toroidal] {
            assert_ne!(e.encode(&a, 0, enc), e.encode(&b, 0, enc));
        }
        let near = ObsEncoding::Nearest { radius: 2, teammates: false };
        let key = e.encode(&a, 0, near);
        assert_eq!(key.0, vec![0, 2, 1, 255, 255, 0, 255, 255, 0]);
        assert_eq!(e.factor_segment(near), Some(3));
        assert_eq!(e.factor_segment(ObsEncoding::Absolute), None);
    }
}
