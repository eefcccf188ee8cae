//! ASCII frames and SVG trajectory overlays.

use std::fmt::Write;

use super::foraging::{Foraging, ForagingState};
use super::pursuit::{PreyKind, Pursuit, PursuitState};
use crate::mmdp::{Cell, Environment};

const CELL_PX: usize = 40;
const AGENT_COLORS: [&str; 4] = ["#2ca02c", "#1f77b4", "#9467bd", "#8c564b"];

/// An item drawn at a cell, ASCII glyph plus SVG fill.
struct Marker {
    cell: Cell,
    glyph: char,
    fill: &'static str,
    square: bool,
}

pub trait Render: Environment {
    fn ascii(&self, state: &Self::State) -> String;
    fn svg(&self, states: &[Self::State], learner_slot: usize) -> String;
}

fn ascii_grid(size: usize, items: &[Marker], agents: &[Cell]) -> String {
    let mut rows = vec![vec!['.'; size]; size];
    for m in items {
        rows[m.cell.row][m.cell.col] = m.glyph;
    }
    for (i, a) in agents.iter().enumerate() {
        rows[a.row][a.col] = char::from_digit(i as u32, 36).unwrap_or('A');
    }
    let mut out = String::new();
    for row in rows {
        out.extend(row);
        out.push('\n');
    }
    out
}

fn svg_paths(size: usize, items: &[Marker], paths: &[Vec<Cell>], learner_slot: usize) -> String {
    let px = size * CELL_PX;
    let centre = |c: Cell| (c.col * CELL_PX + CELL_PX / 2, c.row * CELL_PX + CELL_PX / 2);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="0 0 {px} {px}">"#);
    let _ = writeln!(s, r#"<rect width="{px}" height="{px}" fill="white" stroke="black"/>"#);
    for i in 1..size {
        let o = i * CELL_PX;
        let _ = writeln!(s, r##"<line x1="{o}" y1="0" x2="{o}" y2="{px}" stroke="#ccc"/>"##);
        let _ = writeln!(s, r##"<line x1="0" y1="{o}" x2="{px}" y2="{o}" stroke="#ccc"/>"##);
    }
    for m in items {
        let (x, y) = centre(m.cell);
        if m.square {
            let h = CELL_PX / 3;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#, x - h, y - h, 2 * h, 2 * h, m.fill);
        } else {
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="{}" fill="{}"/>"#, CELL_PX / 3, m.fill);
        }
    }
    for (i, path) in paths.iter().enumerate() {
        let color = if i == learner_slot { AGENT_COLORS[0] } else { AGENT_COLORS[1 + i % 3] };
        let points: Vec<String> = path.iter().map(|&c| {
            let (x, y) = centre(c);
            format!("{x},{y}")
        }).collect();
        let width = if i == learner_slot { 4 } else { 2 };
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="0.8"/>"#, points.join(" "));
        if let Some(&start) = path.first() {
            let (x, y) = centre(start);
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="6" fill="{color}"/>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn agent_paths<E: Environment>(env: &E, states: &[E::State]) -> Vec<Vec<Cell>> {
    let mut paths = vec![Vec::new(); env.n_agents()];
    for s in states {
        for (i, c) in env.agent_positions(s).into_iter().enumerate() {
            paths[i].push(c);
        }
    }
    paths
}

const OBJECT_FILL: [&str; 3] = ["#d62728", "#ff7f0e", "#e6c200"];
const OBJECT_GLYPH: [char; 3] = ['r', 'o', 'y'];

fn foraging_markers(env: &Foraging, state: &ForagingState) -> Vec<Marker> {
    let g = env.grid_size();
    (0..g * g)
        .filter_map(|i| {
            let cell = Cell::new(i / g, i % g);
            state.object_at(cell, g).map(|k| Marker {
                cell,
                glyph: OBJECT_GLYPH[k % 3],
                fill: OBJECT_FILL[k % 3],
                square: false,
            })
        })
        .collect()
}

impl Render for Foraging {
    fn ascii(&self, state: &ForagingState) -> String {
        ascii_grid(self.grid_size(), &foraging_markers(self, state), &state.agents)
    }

    fn svg(&self, states: &[ForagingState], learner_slot: usize) -> String {
        let items = states.first().map(|s| foraging_markers(self, s)).unwrap_or_default();
        svg_paths(self.grid_size(), &items, &agent_paths(self, states), learner_slot)
    }
}

fn prey_markers(env: &Pursuit, state: &PursuitState) -> Vec<Marker> {
    env.config()
        .prey
        .iter()
        .enumerate()
        .filter(|(i, _)| state.alive[*i])
        .map(|(i, spec)| Marker {
            cell: state.prey[i],
            glyph: if spec.kind == PreyKind::Easy { 'e' } else { 'h' },
            fill: if spec.kind == PreyKind::Easy { "#e6c200" } else { "#d62728" },
            square: true,
        })
        .collect()
}

impl Render for Pursuit {
    fn ascii(&self, state: &PursuitState) -> String {
        ascii_grid(self.grid_size(), &prey_markers(self, state), &state.predators)
    }

    fn svg(&self, states: &[PursuitState], learner_slot: usize) -> String {
        let items = states.first().map(|s| prey_markers(self, s)).unwrap_or_default();
        svg_paths(self.grid_size(), &items, &agent_paths(self, states), learner_slot)
    }
}

/// Concatenated ASCII frames, one per state, separated by step headers.
pub fn ascii_frames<E: Render>(env: &E, states: &[E::State]) -> String {
    let mut out = String::new();
    for (t, s) in states.iter().enumerate() {
        let _ = writeln!(out, "-- step {t}");
        out.push_str(&env.ascii(s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::foraging::{ForagingConfig, PlacedObject};

    #[test]
    fn ascii_and_svg_shapes() {
        let e = Foraging::new(ForagingConfig::reduced(4, 1)).unwrap();
        let s = e
            .state_from(vec![Cell::new(3, 0), Cell::new(2, 1)], &[PlacedObject { cell: Cell::new(0, 0), kind: 0 }])
            .unwrap();
        let text = e.ascii(&s);
        assert_eq!(text, "r...\n....\n.1..\n0...\n");
        let svg = e.svg(&[s.clone(), s], 0);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
