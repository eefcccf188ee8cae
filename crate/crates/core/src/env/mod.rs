//! Gridworld environments and their shared move/region machinery.

pub mod foraging;
pub mod pursuit;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::mmdp::Cell;

pub use foraging::{Foraging, ForagingConfig, ForagingState, ForagerPolicy, Observation};
pub use pursuit::{PredatorPolicy, PreyKind, PreySpec, Pursuit, PursuitConfig, PursuitState};
pub use render::Render;

/// Actions shared by every grid agent.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const N_MOVES: usize = 5;

pub const MOVE_NAMES: [&str; N_MOVES] = ["up", "down", "left", "right", "stay"];

/// Half-open axis-aligned box `[row0, row1) x [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Region {
    pub const fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Region { row0, col0, row1, col1 }
    }

    pub fn contains(&self, c: Cell) -> bool {
        (self.row0..self.row1).contains(&c.row) && (self.col0..self.col1).contains(&c.col)
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.row0..self.row1).flat_map(move |r| (self.col0..self.col1).map(move |c| Cell::new(r, c)))
    }

    pub fn within(&self, grid: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= grid && self.col1 <= grid
    }
}

/// Target cell of a move, or `None` when it leaves `region`.
pub fn shifted(c: Cell, action: usize, region: &Region) -> Option<Cell> {
    let (r, col) = (c.row as isize, c.col as isize);
    let (r, col) = match action {
        UP => (r - 1, col),
        DOWN => (r + 1, col),
        LEFT => (r, col - 1),
        RIGHT => (r, col + 1),
        _ => (r, col),
    };
    if r < 0 || col < 0 {
        return None;
    }
    let next = Cell::new(r as usize, col as usize);
    region.contains(next).then_some(next)
}

/// Applies a move on a `grid x grid` board; off-grid moves resolve to stay.
pub fn apply_move(c: Cell, action: usize, grid: usize) -> Cell {
    shifted(c, action, &Region::new(0, 0, grid, grid)).unwrap_or(c)
}

/// Signed offset from `from` to `to`, clipped to `[-radius, radius]` per axis
/// and shifted into a byte.
pub(crate) fn clipped_offset(from: Cell, to: Cell, radius: u8) -> [u8; 2] {
    let r = radius as isize;
    let dr = (to.row as isize - from.row as isize).clamp(-r, r);
    let dc = (to.col as isize - from.col as isize).clamp(-r, r);
    [(dr + r) as u8, (dc + r) as u8]
}

pub(crate) const ABSENT: [u8; 2] = [u8::MAX, u8::MAX];
