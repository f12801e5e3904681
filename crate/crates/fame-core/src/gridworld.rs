//! Procedural gridworld generator producing `TabularMdp`s.
//!
//! Distinct seeds with the same spec vary wall layout and goal placement,
//! which is how a task sequence gets its "related but different" members.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{FameError, Result};
use crate::mdp::TabularMdp;
use crate::rng::stream;

/// Action indices: 0 = up (+y), 1 = down (-y), 2 = left (-x), 3 = right (+x).
pub const GRID_ACTIONS: usize = 4;
const DELTAS: [(isize, isize); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

const MAX_SIDE: usize = 12;
const RETRY_BUDGET: usize = 64;

/// Where episodes begin.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum StartMode {
    /// Uniform over free, non-goal cells.
    UniformFree,
    /// A fixed cell.
    Cell(usize, usize),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Probability that a candidate cell becomes a wall.
    pub wall_density: f64,
    /// Probability mass diverted to the two perpendicular directions.
    pub slip: f64,
    pub gamma: f64,
    /// Fixed goal; None lets the seed place it.
    pub goal: Option<(usize, usize)>,
    /// Reward for entering the goal. Sets the Q-value scale, which is what
    /// the softmax temperature acts against.
    pub goal_reward: f64,
    pub start: StartMode,
    /// Number of seed-placed penalty cells.
    pub n_penalty: usize,
    pub penalty_reward: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            wall_density: 0.0,
            slip: 0.1,
            gamma: 0.95,
            goal: None,
            goal_reward: 1.0,
            start: StartMode::UniformFree,
            n_penalty: 0,
            penalty_reward: -1.0,
        }
    }
}

impl GridworldSpec {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > MAX_SIDE || self.height > MAX_SIDE {
            return Err(FameError::InvalidModel(format!(
                "grid sides must be in 1..={MAX_SIDE}"
            )));
        }
        if !(0.0..0.5).contains(&self.slip) {
            return Err(FameError::InvalidModel("slip must be in [0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.wall_density) {
            return Err(FameError::InvalidModel("wall density must be in [0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(FameError::InvalidModel("gamma must be in (0, 1)".into()));
        }
        if let Some((gx, gy)) = self.goal {
            if gx >= self.width || gy >= self.height {
                return Err(FameError::InvalidModel("goal outside the grid".into()));
            }
        }
        if let StartMode::Cell(sx, sy) = self.start {
            if sx >= self.width || sy >= self.height {
                return Err(FameError::InvalidModel("start outside the grid".into()));
            }
        }
        Ok(())
    }

    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Generates a connected gridworld MDP, deterministic in (spec, seed).
///
/// Layouts where some free cell cannot reach the goal are rejected and
/// regenerated from a derived stream, up to a retry budget.
pub fn generate_gridworld(spec: &GridworldSpec, seed: u64) -> Result<TabularMdp> {
    spec.validate()?;
    for attempt in 0..RETRY_BUDGET {
        let mut rng = stream(seed, &[0x6769, attempt as u64]);
        if let Some(mdp) = try_layout(spec, &mut rng) {
            return Ok(mdp);
        }
    }
    Err(FameError::GenerationFailed(format!(
        "no connected layout for seed {seed} within {RETRY_BUDGET} attempts"
    )))
}

fn try_layout<R: Rng + ?Sized>(spec: &GridworldSpec, rng: &mut R) -> Option<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    let n = w * h;

    let start_cell = match spec.start {
        StartMode::Cell(x, y) => Some(spec.cell_index(x, y)),
        StartMode::UniformFree => None,
    };

    // Walls first, then the goal among remaining free cells.
    let mut wall = vec![false; n];
    for (i, flag) in wall.iter_mut().enumerate() {
        let is_protected = Some(i) == start_cell || spec.goal.map(|(x, y)| spec.cell_index(x, y)) == Some(i);
        if !is_protected && rng.random::<f64>() < spec.wall_density {
            *flag = true;
        }
    }
    let free: Vec<usize> = (0..n).filter(|i| !wall[*i]).collect();
    if free.len() < 2 {
        return None;
    }

    let goal = match spec.goal {
        Some((x, y)) => spec.cell_index(x, y),
        None => loop {
            let c = free[rng.random_range(0..free.len())];
            if Some(c) != start_cell {
                break c;
            }
        },
    };
    if let Some(s) = start_cell {
        if s == goal {
            return None;
        }
    }

    // Every free cell must reach the goal.
    if !all_free_reach(spec, &wall, goal) {
        return None;
    }

    let mut entry_reward = vec![0.0; n];
    entry_reward[goal] = spec.goal_reward;
    let mut candidates: Vec<usize> = free
        .iter()
        .copied()
        .filter(|c| *c != goal && Some(*c) != start_cell)
        .collect();
    for _ in 0..spec.n_penalty {
        if candidates.is_empty() {
            break;
        }
        let idx = rng.random_range(0..candidates.len());
        let c = candidates.swap_remove(idx);
        entry_reward[c] = spec.penalty_reward;
    }

    Some(build_mdp(spec, &wall, goal, start_cell, &entry_reward))
}

fn all_free_reach(spec: &GridworldSpec, wall: &[bool], goal: usize) -> bool {
    let (w, h) = (spec.width, spec.height);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    seen[goal] = true;
    queue.push_back(goal);
    while let Some(c) = queue.pop_front() {
        let (x, y) = (c % w, c / w);
        for (dx, dy) in DELTAS {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let nc = ny as usize * w + nx as usize;
            if !wall[nc] && !seen[nc] {
                seen[nc] = true;
                queue.push_back(nc);
            }
        }
    }
    wall.iter().zip(&seen).all(|(is_wall, reached)| *is_wall || *reached)
}

fn build_mdp(
    spec: &GridworldSpec,
    wall: &[bool],
    goal: usize,
    start_cell: Option<usize>,
    entry_reward: &[f64],
) -> TabularMdp {
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let na = GRID_ACTIONS;
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na];
    let mut terminal = vec![false; n];

    // Goal is terminal; walls are unreachable and modeled as terminal
    // self-loops to keep the tensor row-stochastic.
    terminal[goal] = true;
    for (i, t) in terminal.iter_mut().enumerate() {
        if wall[i] {
            *t = true;
        }
    }

    let dest = |c: usize, dir: usize| -> usize {
        let (x, y) = (c % w, c / w);
        let (dx, dy) = DELTAS[dir];
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
            return c;
        }
        let nc = ny as usize * w + nx as usize;
        if wall[nc] {
            c
        } else {
            nc
        }
    };
    // Perpendicular slip directions for each intended direction.
    let perp = |dir: usize| -> [usize; 2] {
        if dir < 2 {
            [2, 3]
        } else {
            [0, 1]
        }
    };

    for c in 0..n {
        for a in 0..na {
            let base = (c * na + a) * n;
            if terminal[c] {
                transition[base + c] = 1.0;
                continue;
            }
            let mut add = |target: usize, p: f64| {
                transition[base + target] += p;
            };
            add(dest(c, a), 1.0 - spec.slip);
            for d in perp(a) {
                add(dest(c, d), spec.slip / 2.0);
            }
            let mut r = 0.0;
            for s2 in 0..n {
                let p = transition[base + s2];
                if p > 0.0 {
                    r += p * entry_reward[s2];
                }
            }
            reward[c * na + a] = r;
        }
    }

    let mut start_dist = vec![0.0; n];
    match start_cell {
        Some(s) => start_dist[s] = 1.0,
        None => {
            let starts: Vec<usize> = (0..n).filter(|c| !terminal[*c]).collect();
            let p = 1.0 / starts.len() as f64;
            for s in &starts {
                start_dist[*s] = p;
            }
            // remove accumulated rounding so the distribution sums to 1 exactly
            let z: f64 = start_dist.iter().sum();
            start_dist[starts[0]] += 1.0 - z;
        }
    }

    TabularMdp::new(n, na, transition, reward, spec.gamma, start_dist, terminal)
        .expect("generated layout satisfies all invariants")
}
