//! Small hand-checkable environments shared by the integration tests.
#![allow(dead_code)]

use adhoc_core::error::{Error, Result};
use adhoc_core::mmdp::{Cell, Environment, JointAction, ObsEncoding, ObsKey, Rng64, StepOutcome};
use adhoc_core::{FeatureVector, WeightVector};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const STAY: usize = 2;

/// Two agents on a 1-D chain of `len` cells. Feature 0 fires when the
/// learner (slot 0) steps onto the last cell, which ends the episode; feature
/// 1 fires when the teammate does the same (it does not end the episode).
#[derive(Clone, Debug)]
pub struct ChainEnv {
    pub len: usize,
    pub horizon: usize,
    pub forkable: bool,
    pub weight: WeightVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub pos: [usize; 2],
    pub step: usize,
    pub done: bool,
}

impl ChainEnv {
    pub fn new(len: usize, horizon: usize) -> Self {
        ChainEnv { len, horizon, forkable: true, weight: WeightVector(vec![1.0, 0.5]) }
    }

    fn moved(&self, p: usize, a: usize) -> usize {
        match a {
            LEFT => p.saturating_sub(1),
            RIGHT => (p + 1).min(self.len - 1),
            _ => p,
        }
    }

    fn features(&self, state: &ChainState, next: &[usize; 2]) -> FeatureVector {
        let end = self.len - 1;
        FeatureVector(vec![
            f64::from(u8::from(next[0] == end && state.pos[0] != end)),
            f64::from(u8::from(next[1] == end && state.pos[1] != end)),
        ])
    }
}

impl Environment for ChainEnv {
    type State = ChainState;

    fn id(&self) -> &'static str {
        "chain"
    }

    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn team_weight(&self) -> &WeightVector {
        &self.weight
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn default_encoding(&self) -> ObsEncoding {
        ObsEncoding::Absolute
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn can_fork(&self) -> bool {
        self.forkable
    }

    fn reset(&self, _: &mut Rng64) -> Result<ChainState> {
        Ok(ChainState { pos: [0, 0], step: 0, done: false })
    }

    fn step(&self, state: &ChainState, joint: &JointAction) -> Result<StepOutcome<ChainState>> {
        self.check_joint(joint)?;
        if state.done {
            return Err(Error::state("step on a terminal chain state"));
        }
        let pos = [self.moved(state.pos[0], joint.0[0]), self.moved(state.pos[1], joint.0[1])];
        let features = self.features(state, &pos);
        let goal = pos[0] == self.len - 1;
        let step = state.step + 1;
        let truncated = !goal && step >= self.horizon;
        let credit = vec![
            FeatureVector(vec![features[0], 0.0]),
            FeatureVector(vec![0.0, features[1]]),
        ];
        Ok(StepOutcome {
            reward: features.reward(&self.weight),
            features,
            credit,
            next_state: ChainState { pos, step, done: goal || truncated },
            terminal: goal || truncated,
            truncated,
        })
    }

    fn is_terminal(&self, state: &ChainState) -> bool {
        state.done
    }

    fn step_count(&self, state: &ChainState) -> usize {
        state.step
    }

    fn encode(&self, state: &ChainState, agent: usize, _: ObsEncoding) -> ObsKey {
        ObsKey(vec![state.pos[agent] as u8, state.pos[1 - agent] as u8])
    }

    fn frozen_features(&self, state: &ChainState, joint: &JointAction, _: &ChainState) -> Result<FeatureVector> {
        let pos = [self.moved(state.pos[0], joint.0[0]), self.moved(state.pos[1], joint.0[1])];
        Ok(self.features(state, &pos))
    }

    fn grid_size(&self) -> usize {
        self.len
    }

    fn agent_positions(&self, state: &ChainState) -> Vec<Cell> {
        state.pos.iter().map(|&p| Cell::new(0, p)).collect()
    }

    fn with_agent_at(&self, state: &ChainState, agent: usize, cell: Cell) -> Option<ChainState> {
        (cell.row == 0 && cell.col < self.len).then(|| {
            let mut s = state.clone();
            s.pos[agent] = cell.col;
            s
        })
    }
}
