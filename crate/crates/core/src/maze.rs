//! Continuous 2-D block mazes with sparse goal-conditioned reward.
//!
//! Coordinates are in cell units: cell `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)`, and `row` is the line index of the ASCII
//! layout. The dynamics are deterministic; a move whose endpoint falls in a
//! block or outside the grid leaves the agent where it was.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 0.3;
pub const DEFAULT_MAX_SPEED: f64 = 1.0;
pub const MICROMAZE_MAX_CELLS: usize = 64;

const BUILTIN_MAZES: [(&str, &str); 3] = [
    ("maze_a", include_str!("../mazes/maze_a.txt")),
    ("maze_b", include_str!("../mazes/maze_b.txt")),
    ("maze_c", include_str!("../mazes/maze_c.txt")),
];

#[derive(Debug, thiserror::Error)]
pub enum MazeError {
    #[error("maze parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid maze configuration: {0}")]
    Config(String),
    #[error("episode protocol violation: {0}")]
    Protocol(String),
    #[error("reading maze file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MazeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Block,
}

/// A target position in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal(pub [f64; 2]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub t: usize,
}

/// Speed in `[0, 1]` (fraction of the maze's max speed) and heading in
/// `[-1, 1]` (multiples of pi radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub speed: f64,
    pub heading: f64,
}

impl Action {
    /// Builds an action, clamping both components into range. NaN maps to 0.
    pub fn new(speed: f64, heading: f64) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Self {
            speed: fix(speed, 0.0, 1.0),
            heading: fix(heading, -1.0, 1.0),
        }
    }

    /// Maps a point of `[-1, 1]^2` (network output space) to an action.
    pub fn from_unit(unit: [f64; 2]) -> Self {
        Self::new((unit[0] + 1.0) / 2.0, unit[1])
    }

    /// Inverse of [`Action::from_unit`].
    pub fn to_unit(self) -> [f64; 2] {
        [2.0 * self.speed - 1.0, self.heading]
    }

    pub fn displacement(self, max_speed: f64) -> [f64; 2] {
        let r = self.speed * max_speed;
        let angle = PI * self.heading;
        [r * angle.cos(), r * angle.sin()]
    }

    /// East, south (+row), west, north: the four unit moves between cell centers.
    pub fn unit_moves() -> [Action; 4] {
        [
            Action::new(1.0, 0.0),
            Action::new(1.0, 0.5),
            Action::new(1.0, 1.0),
            Action::new(1.0, -0.5),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Sparse reward: `0` strictly inside `success_radius` of the goal, `-1` otherwise.
pub fn sparse_reward(achieved: [f64; 2], goal: Goal, success_radius: f64) -> f64 {
    if distance(achieved, goal.0) < success_radius {
        0.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    free_cells: Vec<(usize, usize)>,
    pub start: [f64; 2],
    pub horizon: usize,
    pub success_radius: f64,
    pub max_speed: f64,
}

impl Maze {
    /// Parses an ASCII layout: `#` block, `.` free, `S` free start cell.
    /// Lines starting with `@` set `horizon=`, `eps=` or `max_speed=`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut horizon = DEFAULT_HORIZON;
        let mut success_radius = DEFAULT_SUCCESS_RADIUS;
        let mut max_speed = DEFAULT_MAX_SPEED;
        let mut rows: Vec<Vec<Cell>> = Vec::new();
        let mut start = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('@') {
                let err = |message: String| MazeError::Parse {
                    line: line_no,
                    column: 1,
                    message,
                };
                let (key, value) = header
                    .split_once('=')
                    .ok_or_else(|| err(format!("header {header:?} is not key=value")))?;
                let value = value.trim();
                match key.trim() {
                    "horizon" => {
                        horizon = value
                            .parse()
                            .map_err(|_| err(format!("bad horizon {value:?}")))?
                    }
                    "eps" => {
                        success_radius = value
                            .parse()
                            .map_err(|_| err(format!("bad eps {value:?}")))?
                    }
                    "max_speed" => {
                        max_speed = value
                            .parse()
                            .map_err(|_| err(format!("bad max_speed {value:?}")))?
                    }
                    other => return Err(err(format!("unknown header key {other:?}"))),
                }
                continue;
            }
            let row_index = rows.len();
            let mut row = Vec::with_capacity(line.len());
            for (col, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Block,
                    '.' => Cell::Free,
                    'S' => {
                        if start.is_some() {
                            return Err(MazeError::Parse {
                                line: line_no,
                                column: col + 1,
                                message: "second start cell 'S'".into(),
                            });
                        }
                        start = Some([col as f64 + 0.5, row_index as f64 + 0.5]);
                        Cell::Free
                    }
                    other => {
                        return Err(MazeError::Parse {
                            line: line_no,
                            column: col + 1,
                            message: format!("unknown character {other:?}"),
                        })
                    }
                };
                row.push(cell);
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(MazeError::Parse {
                        line: line_no,
                        column: row.len().min(first.len()) + 1,
                        message: format!("row has {} cells, expected {}", row.len(), first.len()),
                    });
                }
            }
            rows.push(row);
        }

        let start = start.ok_or_else(|| MazeError::Parse {
            line: 0,
            column: 0,
            message: "no start cell 'S'".into(),
        })?;
        let height = rows.len();
        let width = rows[0].len();
        let mut maze = Self::from_cells(width, height, rows.concat(), start)?;
        maze.horizon = horizon;
        maze.success_radius = success_radius;
        maze.max_speed = max_speed;
        maze.validate()?;
        Ok(maze)
    }

    fn from_cells(width: usize, height: usize, cells: Vec<Cell>, start: [f64; 2]) -> Result<Self> {
        let free_cells = (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .filter(|&(c, r)| cells[r * width + c] == Cell::Free)
            .collect();
        Ok(Self {
            width,
            height,
            cells,
            free_cells,
            start,
            horizon: DEFAULT_HORIZON,
            success_radius: DEFAULT_SUCCESS_RADIUS,
            max_speed: DEFAULT_MAX_SPEED,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(MazeError::Config("horizon must be at least 1".into()));
        }
        if !self.success_radius.is_finite() || self.success_radius <= 0.0 {
            return Err(MazeError::Config(format!(
                "success radius {} must be positive",
                self.success_radius
            )));
        }
        if !self.max_speed.is_finite() || self.max_speed <= 0.0 {
            return Err(MazeError::Config(format!("max speed {} must be positive", self.max_speed)));
        }
        if !self.is_free(self.start) {
            return Err(MazeError::Config("start lies outside the free cells".into()));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MazeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// One of the shipped layouts: `maze_a`, `maze_b`, `maze_c`.
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_MAZES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("shipped maze layouts parse"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_MAZES.iter().map(|(n, _)| *n)
    }

    /// Resolves `builtin:<name>` to a shipped layout, anything else as a path.
    pub fn load(spec: &str) -> Result<Self> {
        match spec.strip_prefix("builtin:") {
            Some(name) => Self::builtin(name).ok_or_else(|| {
                MazeError::Config(format!(
                    "unknown builtin maze {name:?} (have {})",
                    Self::builtin_names().collect::<Vec<_>>().join(", ")
                ))
            }),
            None => Self::from_file(spec),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self, col: usize, row: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn free_cells(&self) -> &[(usize, usize)] {
        &self.free_cells
    }

    pub fn cell_of(&self, position: [f64; 2]) -> Option<(usize, usize)> {
        let [x, y] = position;
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return None;
        }
        Some((x as usize, y as usize))
    }

    pub fn is_free(&self, position: [f64; 2]) -> bool {
        self.cell_of(position)
            .is_some_and(|(c, r)| self.cell(c, r) == Cell::Free)
    }

    pub fn cell_center(col: usize, row: usize) -> [f64; 2] {
        [col as f64 + 0.5, row as f64 + 0.5]
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            position: self.start,
            t: 0,
        }
    }

    pub fn reward(&self, achieved: [f64; 2], goal: Goal) -> f64 {
        sparse_reward(achieved, goal, self.success_radius)
    }

    /// Position reached from `position` under `action`, ignoring time.
    pub fn transition(&self, position: [f64; 2], action: Action) -> [f64; 2] {
        let action = Action::new(action.speed, action.heading);
        let [dx, dy] = action.displacement(self.max_speed);
        let proposed = [position[0] + dx, position[1] + dy];
        if self.is_free(proposed) {
            proposed
        } else {
            position
        }
    }

    pub fn step(&self, state: EnvState, action: Action, goal: Goal) -> Result<StepOutcome> {
        if state.t >= self.horizon {
            return Err(MazeError::Protocol(format!(
                "step at t = {} but the horizon is {}",
                state.t, self.horizon
            )));
        }
        let position = self.transition(state.position, action);
        let t = state.t + 1;
        Ok(StepOutcome {
            state: EnvState { position, t },
            reward: self.reward(position, goal),
            done: t == self.horizon,
        })
    }

    /// Uniform over the union of free cells, by rejection over the bounding box.
    pub fn sample_goal_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Goal {
        loop {
            let p = [
                rng.random_range(0.0..self.width as f64),
                rng.random_range(0.0..self.height as f64),
            ];
            if self.is_free(p) {
                return Goal(p);
            }
        }
    }

    /// Free cells reachable from the start. Any single move changes each cell
    /// coordinate by at most one, so 8-connectivity over-approximates the
    /// continuous dynamics.
    pub fn reachable_cells(&self) -> Vec<(usize, usize)> {
        let mut seen = vec![false; self.cells.len()];
        let (sc, sr) = self.cell_of(self.start).expect("start inside grid");
        let mut queue = VecDeque::from([(sc, sr)]);
        seen[sr * self.width + sc] = true;
        let mut out = Vec::new();
        while let Some((c, r)) = queue.pop_front() {
            out.push((c, r));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                    if nc < 0 || nr < 0 || nc >= self.width as i64 || nr >= self.height as i64 {
                        continue;
                    }
                    let (nc, nr) = (nc as usize, nr as usize);
                    let idx = nr * self.width + nc;
                    if !seen[idx] && self.cells[idx] == Cell::Free {
                        seen[idx] = true;
                        queue.push_back((nc, nr));
                    }
                }
            }
        }
        out.sort_by_key(|&(c, r)| (r, c));
        out
    }
}

/// Exact finite-horizon action values on a maze restricted to cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroQTable {
    pub cells: Vec<(usize, usize)>,
    pub actions: Vec<Action>,
    pub goals: Vec<Goal>,
    values: Vec<f64>,
}

impl MicroQTable {
    pub fn get(&self, cell: usize, action: usize, goal: usize) -> f64 {
        self.values[(cell * self.actions.len() + action) * self.goals.len() + goal]
    }

    pub fn cell_index(&self, cell: (usize, usize)) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }

    /// Value of the best action, per (cell, goal).
    pub fn state_value(&self, cell: usize, goal: usize) -> f64 {
        (0..self.actions.len())
            .map(|a| self.get(cell, a, goal))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Backward induction over `maze.horizon` steps with agents pinned to cell
/// centers. Each action must move between cell centers (or be blocked).
pub fn solve_micromaze(maze: &Maze, actions: &[Action], goals: &[Goal], gamma: f64) -> Result<MicroQTable> {
    if maze.width * maze.height > MICROMAZE_MAX_CELLS {
        return Err(MazeError::Config(format!(
            "micro-maze has {} cells, at most {MICROMAZE_MAX_CELLS} allowed",
            maze.width * maze.height
        )));
    }
    if actions.is_empty() || goals.is_empty() {
        return Err(MazeError::Config("need at least one action and one goal".into()));
    }
    let cells = maze.free_cells().to_vec();
    let index_of = |pos: [f64; 2]| -> Option<usize> {
        let (c, r) = maze.cell_of(pos)?;
        let center = Maze::cell_center(c, r);
        if distance(center, pos) > 1e-9 {
            return None;
        }
        cells.iter().position(|&x| x == (c, r))
    };
    let (n_cells, n_actions, n_goals) = (cells.len(), actions.len(), goals.len());

    // successor cell and immediate reward per (cell, action, goal)
    let mut next = vec![0usize; n_cells * n_actions];
    for (s, &(c, r)) in cells.iter().enumerate() {
        for (a, &action) in actions.iter().enumerate() {
            let pos = maze.transition(Maze::cell_center(c, r), action);
            next[s * n_actions + a] = index_of(pos).ok_or_else(|| {
                MazeError::Config(format!("action {action:?} from cell ({c}, {r}) does not land on a cell center"))
            })?;
        }
    }
    let reward = |s2: usize, g: usize| {
        let (c, r) = cells[s2];
        maze.reward(Maze::cell_center(c, r), goals[g])
    };

    let mut v = vec![0.0; n_cells * n_goals];
    let mut q = vec![0.0; n_cells * n_actions * n_goals];
    for _ in 0..maze.horizon {
        for s in 0..n_cells {
            for a in 0..n_actions {
                let s2 = next[s * n_actions + a];
                for g in 0..n_goals {
                    q[(s * n_actions + a) * n_goals + g] = reward(s2, g) + gamma * v[s2 * n_goals + g];
                }
            }
        }
        for s in 0..n_cells {
            for g in 0..n_goals {
                v[s * n_goals + g] = (0..n_actions)
                    .map(|a| q[(s * n_actions + a) * n_goals + g])
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    Ok(MicroQTable {
        cells,
        actions: actions.to_vec(),
        goals: goals.to_vec(),
        values: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open(n: usize) -> Maze {
        let mut text = String::new();
        for r in 0..n {
            for c in 0..n {
                text.push(if r == 0 && c == 0 { 'S' } else { '.' });
            }
            text.push('\n');
        }
        Maze::parse(&text).unwrap()
    }

    #[test]
    fn smallest_maze() {
        let m = Maze::parse("S.").unwrap();
        assert_eq!((m.width(), m.height()), (2, 1));
        assert_eq!(m.start, [0.5, 0.5]);
        assert_eq!(m.free_cells().len(), 2);
        assert_eq!(m.horizon, 50);
        assert_eq!(m.success_radius, 0.3);
        assert_eq!(m.max_speed, 1.0);
    }

    #[test]
    fn headers_override_defaults() {
        let m = Maze::parse("@horizon=7\n@eps=0.5\n@max_speed=0.5\nS.\n").unwrap();
        assert_eq!((m.horizon, m.success_radius, m.max_speed), (7, 0.5, 0.5));
    }

    #[test]
    fn parse_errors_carry_positions() {
        match Maze::parse("S..\n....\n") {
            Err(MazeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match Maze::parse("S.x\n") {
            Err(MazeError::Parse { line, column, .. }) => assert_eq!((line, column), (1, 3)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Maze::parse("...\n"), Err(MazeError::Parse { .. })));
        assert!(matches!(Maze::parse("S.S\n"), Err(MazeError::Parse { line: 1, column: 3, .. })));
        assert!(matches!(Maze::parse("@depth=3\nS.\n"), Err(MazeError::Parse { .. })));
        assert!(matches!(Maze::parse("@horizon=0\nS.\n"), Err(MazeError::Config(_))));
    }

    #[test]
    fn ringed_center_is_unreachable() {
        let m = Maze::parse(
            "S......\n\
             .#####.\n\
             .#...#.\n\
             .#...#.\n\
             .#...#.\n\
             .#####.\n\
             .......\n",
        )
        .unwrap();
        let reachable = m.reachable_cells();
        for r in 2..5 {
            for c in 2..5 {
                assert_eq!(m.cell(c, r), Cell::Free);
                assert!(!reachable.contains(&(c, r)));
            }
        }
        assert_eq!(reachable.len(), 24);
    }

    #[test]
    fn reset_is_fixed() {
        let m = Maze::builtin("maze_a").unwrap();
        let s = m.reset();
        assert_eq!(s.t, 0);
        assert_eq!(s.position, m.start);
        assert_eq!(m.reset(), s);
    }

    #[test]
    fn unobstructed_and_blocked_moves() {
        let m = Maze::parse("S...\n....\n....\n").unwrap();
        let state = EnvState {
            position: [1.5, 1.5],
            t: 0,
        };
        let far = Goal([0.5, 2.5]);
        let out = m.step(state, Action::new(1.0, 0.0), far).unwrap();
        assert_eq!(out.state.position, [2.5, 1.5]);
        assert_eq!(out.state.t, 1);
        assert_eq!(out.reward, -1.0);

        let blocked = Maze::parse("S...\n..#.\n....\n").unwrap();
        let out = blocked.step(state, Action::new(1.0, 0.0), far).unwrap();
        assert_eq!(out.state.position, [1.5, 1.5]);

        // leaving the grid also stays put
        let edge = EnvState {
            position: [0.5, 0.5],
            t: 0,
        };
        let out = m.step(edge, Action::new(1.0, 1.0), far).unwrap();
        assert_eq!(out.state.position, [0.5, 0.5]);
    }

    #[test]
    fn reward_uses_strict_radius() {
        let m = Maze::parse("S...\n").unwrap();
        let state = EnvState {
            position: [0.5, 0.5],
            t: 0,
        };
        let out = m.step(state, Action::new(1.0, 0.0), Goal([1.5, 0.75])).unwrap();
        assert_eq!(out.reward, 0.0);
        // 1.5 + 0.25 is exact in binary, so the distance is exactly 0.25
        let m = Maze::parse("@eps=0.25\nS...\n").unwrap();
        let out = m.step(state, Action::new(1.0, 0.0), Goal([1.75, 0.5])).unwrap();
        assert_eq!(out.reward, -1.0);
        assert_eq!(sparse_reward([0.0, 0.0], Goal([0.3, 0.0]), 0.3), -1.0);
        assert_eq!(sparse_reward([0.0, 0.0], Goal([0.0, 0.0]), 0.3), 0.0);
    }

    #[test]
    fn episode_runs_exactly_horizon_steps() {
        let m = Maze::parse("@horizon=5\nS..\n").unwrap();
        let goal = Goal([2.5, 0.5]);
        let mut s = m.reset();
        let mut dones = Vec::new();
        for _ in 0..5 {
            let out = m.step(s, Action::new(0.1, 0.0), goal).unwrap();
            dones.push(out.done);
            s = out.state;
        }
        assert_eq!(dones, [false, false, false, false, true]);
        assert!(matches!(m.step(s, Action::new(0.1, 0.0), goal), Err(MazeError::Protocol(_))));
    }

    #[test]
    fn action_clamping() {
        let a = Action::new(3.0, -7.0);
        assert_eq!((a.speed, a.heading), (1.0, -1.0));
        let a = Action::new(f64::NAN, 0.4);
        assert_eq!((a.speed, a.heading), (0.0, 0.4));
        let a = Action::from_unit([-1.0, 0.25]);
        assert_eq!(a.speed, 0.0);
        assert_eq!(a.to_unit(), [-1.0, 0.25]);
    }

    #[test]
    fn uniform_goals_split_evenly_between_two_cells() {
        let m = Maze::parse("S.\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let left = (0..n)
            .map(|_| m.sample_goal_uniform(&mut rng))
            .inspect(|g| assert!(m.is_free(g.0)))
            .filter(|g| g.0[0] < 1.0)
            .count();
        let frac = left as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn uniform_goals_only_in_free_cells_and_reproducible() {
        let m = Maze::builtin("maze_b").unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500).map(|_| m.sample_goal_uniform(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert!(a.iter().all(|g| m.is_free(g.0)));
        assert_eq!(a, draw(3));
    }

    #[test]
    fn builtins_parse_and_mostly_connect() {
        for name in Maze::builtin_names() {
            let m = Maze::builtin(name).unwrap();
            assert!(m.is_free(m.start));
            let reachable = m.reachable_cells().len();
            if name == "maze_c" {
                assert!(reachable < m.free_cells().len());
            } else {
                assert_eq!(reachable, m.free_cells().len(), "{name}");
            }
        }
        assert!(Maze::load("builtin:nope").is_err());
    }

    #[test]
    fn micromaze_goal_in_own_cell_is_zero() {
        let m = open(3);
        let goals: Vec<Goal> = m.free_cells().iter().map(|&(c, r)| Goal(Maze::cell_center(c, r))).collect();
        let table = solve_micromaze(&m, &Action::unit_moves(), &goals, 0.98).unwrap();
        let corner = table.cell_index((0, 0)).unwrap();
        let goal = goals.iter().position(|g| g.0 == [0.5, 0.5]).unwrap();
        // west and north are blocked by the border: the agent stays on the goal
        assert_eq!(table.get(corner, 2, goal), 0.0);
        assert_eq!(table.get(corner, 3, goal), 0.0);
        // stepping off costs one step then returns
        assert_eq!(table.get(corner, 0, goal), -1.0);
    }

    #[test]
    fn micromaze_unreachable_goal_is_geometric_sum() {
        let m = Maze::parse("@horizon=50\nS.#.\n").unwrap();
        let goals = [Goal([3.5, 0.5])];
        let table = solve_micromaze(&m, &Action::unit_moves(), &goals, 0.98).unwrap();
        let expect = -(1.0 - 0.98f64.powi(50)) / (1.0 - 0.98);
        for s in 0..table.cells.len() {
            for a in 0..4 {
                let v = table.get(s, a, 0);
                if table.cells[s] == (3, 0) {
                    continue;
                }
                assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn micromaze_rejects_large_and_off_grid() {
        assert!(matches!(
            solve_micromaze(&open(9), &Action::unit_moves(), &[Goal([0.5, 0.5])], 0.98),
            Err(MazeError::Config(_))
        ));
        assert!(matches!(
            solve_micromaze(&open(3), &[Action::new(0.5, 0.0)], &[Goal([0.5, 0.5])], 0.98),
            Err(MazeError::Config(_))
        ));
    }
}
