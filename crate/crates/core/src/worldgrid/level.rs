use std::collections::VecDeque;
use std::fmt;

use gradtape::Rng;
use serde::{Deserialize, Serialize};

pub const GRID: usize = 13;
pub const MAX_EPISODE_LEN: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Corridor,
    MazeI,
    #[serde(rename = "maze_ii")]
    MazeII,
    #[serde(rename = "maze_iii")]
    MazeIII,
    CorridorBlueGem,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Corridor,
        TaskId::MazeI,
        TaskId::MazeII,
        TaskId::MazeIII,
        TaskId::CorridorBlueGem,
    ];

    pub fn is_corridor(self) -> bool {
        matches!(self, TaskId::Corridor | TaskId::CorridorBlueGem)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Corridor => "corridor",
            TaskId::MazeI => "maze_i",
            TaskId::MazeII => "maze_ii",
            TaskId::MazeIII => "maze_iii",
            TaskId::CorridorBlueGem => "corridor_blue_gem",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Coin,
    Gem,
    DiagonalLine,
    StraightLine,
    Cheese,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Coin,
        Shape::Gem,
        Shape::DiagonalLine,
        Shape::StraightLine,
        Shape::Cheese,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Shape::Coin => "coin",
            Shape::Gem => "gem",
            Shape::DiagonalLine => "diagonal line",
            Shape::StraightLine => "straight line",
            Shape::Cheese => "cheese",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Yellow,
    Red,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Yellow, Color::Red, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Yellow => "yellow",
            Color::Red => "red",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Red => [1.0, 0.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn index(self) -> usize {
        self.row * GRID + self.col
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub cell: Cell,
    pub shape: Shape,
    pub color: Color,
}

/// The true goal: a shape, optionally restricted to one color.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoalPredicate {
    pub shape: Shape,
    pub color: Option<Color>,
}

impl GoalPredicate {
    pub fn matches(&self, obj: &Object) -> bool {
        obj.shape == self.shape && self.color.is_none_or(|c| c == obj.color)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    /// Expansion priority order used by the expert.
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// Target cell, or `None` when the move would leave the grid.
    pub fn apply(self, c: Cell) -> Option<Cell> {
        let (r, k) = (c.row as isize, c.col as isize);
        let (r, k) = match self {
            Action::Up => (r - 1, k),
            Action::Down => (r + 1, k),
            Action::Left => (r, k - 1),
            Action::Right => (r, k + 1),
        };
        let inside = |v: isize| (0..GRID as isize).contains(&v);
        (inside(r) && inside(k)).then(|| Cell::new(r as usize, k as usize))
    }
}

/// Immutable gridworld specification, reconstructible from
/// `(task, split, level_seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub task: TaskId,
    pub level_seed: u64,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    #[serde(with = "wall_rows")]
    pub walls: Vec<bool>,
    pub objects: Vec<Object>,
    pub agent_start: Cell,
    pub theme_hue: f64,
    pub goal: GoalPredicate,
}

mod wall_rows {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use super::GRID;

    pub fn serialize<S: Serializer>(walls: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<String> = walls
            .chunks(GRID)
            .map(|r| r.iter().map(|&w| if w { '#' } else { '.' }).collect())
            .collect();
        s.collect_seq(rows)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        if rows.len() != GRID || rows.iter().any(|r| r.chars().count() != GRID) {
            return Err(D::Error::custom("wall grid must be 13 rows of 13 cells"));
        }
        rows.iter()
            .flat_map(|r| r.chars())
            .map(|ch| match ch {
                '#' => Ok(true),
                '.' => Ok(false),
                other => Err(D::Error::custom(format!("bad wall cell `{other}`"))),
            })
            .collect()
    }
}

impl Level {
    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls[c.index()]
    }

    pub fn object_at(&self, c: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == c)
    }

    pub fn goal_object(&self) -> Option<&Object> {
        self.objects.iter().find(|o| self.goal.matches(o))
    }

    /// Cells that are neither walls nor the agent start, in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        (0..GRID * GRID)
            .map(|i| Cell::new(i / GRID, i % GRID))
            .filter(|&c| !self.is_wall(c) && c != self.agent_start)
            .collect()
    }

    /// Short human-readable identity, used in error messages and reports.
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.task, self.split, self.level_seed)
    }

    /// Breadth-first distances from `from`, treating walls and `blocked`
    /// cells as impassable. Unreached cells hold `usize::MAX`.
    pub fn distances(&self, from: Cell, blocked: &[Cell]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; GRID * GRID];
        dist[from.index()] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            for a in Action::ALL {
                let Some(n) = a.apply(c) else { continue };
                if self.is_wall(n) || blocked.contains(&n) || dist[n.index()] != usize::MAX {
                    continue;
                }
                dist[n.index()] = dist[c.index()] + 1;
                queue.push_back(n);
            }
        }
        dist
    }

    fn goal_reachable(&self) -> bool {
        let distractors: Vec<Cell> = self
            .objects
            .iter()
            .filter(|o| !self.goal.matches(o))
            .map(|o| o.cell)
            .collect();
        match self.goal_object() {
            Some(g) => self.distances(self.agent_start, &distractors)[g.cell.index()] <= MAX_EPISODE_LEN,
            None => false,
        }
    }

    /// Checks the structural invariants: one goal object, everything on
    /// free cells, goal reachable without touching a distractor.
    pub fn validate(&self) -> Result<(), String> {
        if self.width != GRID || self.height != GRID || self.walls.len() != GRID * GRID {
            return Err("grid must be 13×13".into());
        }
        let goals = self.objects.iter().filter(|o| self.goal.matches(o)).count();
        if goals != 1 {
            return Err(format!("{goals} objects satisfy the goal predicate"));
        }
        let mut cells: Vec<Cell> = self.objects.iter().map(|o| o.cell).collect();
        cells.push(self.agent_start);
        if cells.iter().any(|&c| c.row >= GRID || c.col >= GRID || self.is_wall(c)) {
            return Err("object or agent on a wall".into());
        }
        cells.sort();
        cells.dedup();
        if cells.len() != self.objects.len() + 1 {
            return Err("objects overlap".into());
        }
        if !self.goal_reachable() {
            return Err("goal unreachable".into());
        }
        Ok(())
    }
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

fn room_walls() -> Vec<bool> {
    (0..GRID * GRID)
        .map(|i| {
            let (r, c) = (i / GRID, i % GRID);
            r == 0 || c == 0 || r == GRID - 1 || c == GRID - 1
        })
        .collect()
}

/// Recursive-backtracker maze on the odd-coordinate lattice.
fn maze_walls(rng: &mut Rng) -> Vec<bool> {
    let mut walls = vec![true; GRID * GRID];
    let n = GRID / 2; // 6 maze cells per side
    let mut visited = vec![false; n * n];
    let mut stack = vec![(n - 1, 0)]; // bottom-left, where the agent starts
    visited[(n - 1) * n] = true;
    walls[Cell::new(2 * (n - 1) + 1, 1).index()] = false;
    while let Some(&(r, c)) = stack.last() {
        let mut options = Vec::with_capacity(4);
        if r > 0 && !visited[(r - 1) * n + c] {
            options.push((r - 1, c));
        }
        if r + 1 < n && !visited[(r + 1) * n + c] {
            options.push((r + 1, c));
        }
        if c > 0 && !visited[r * n + c - 1] {
            options.push((r, c - 1));
        }
        if c + 1 < n && !visited[r * n + c + 1] {
            options.push((r, c + 1));
        }
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let (nr, nc) = options[rng.below(options.len())];
        visited[nr * n + nc] = true;
        walls[Cell::new(2 * nr + 1, 2 * nc + 1).index()] = false;
        walls[Cell::new(r + nr + 1, c + nc + 1).index()] = false;
        stack.push((nr, nc));
    }
    walls
}

pub const CORRIDOR_START: Cell = Cell::new(6, 1);
pub const CORRIDOR_TRAIN_COIN: Cell = Cell::new(6, 11);
pub const MAZE_START: Cell = Cell::new(11, 1);
pub const MAZE_TRAIN_CHEESE: Cell = Cell::new(1, 11);

/// Builds the level for `(task, split, level_seed)`. Placements that leave
/// the goal unreachable are resampled from the same stream.
pub fn make_level(task: TaskId, split: Split, level_seed: u64) -> Level {
    let mut rng = Rng::new(level_seed, (task.code() << 1) | split_code(split));
    let theme_hue = match split {
        Split::Train => rng.uniform_range(0.0, 0.5),
        Split::Test => rng.uniform_range(0.5, 1.0),
    };
    let obj = |cell, shape, color| Object { cell, shape, color };
    let goal = |shape, color| GoalPredicate { shape, color };
    loop {
        let (walls, agent_start) = if task.is_corridor() {
            (room_walls(), corridor_start(split, &mut rng))
        } else {
            (maze_walls(&mut rng), MAZE_START)
        };
        let mut level = Level {
            task,
            level_seed,
            split,
            width: GRID,
            height: GRID,
            walls,
            objects: Vec::new(),
            agent_start,
            theme_hue,
            goal: goal(Shape::Coin, None),
        };
        let mut free = level.free_cells();
        let mut place = |rng: &mut Rng| free.swap_remove(rng.below(free.len()));
        use {Color::*, Shape::*};
        let (objects, predicate) = match (task, split) {
            (TaskId::Corridor | TaskId::CorridorBlueGem, Split::Train) => {
                (vec![obj(CORRIDOR_TRAIN_COIN, Coin, Yellow)], goal(Coin, None))
            }
            (TaskId::Corridor, Split::Test) => (vec![obj(place(&mut rng), Coin, Yellow)], goal(Coin, None)),
            (TaskId::CorridorBlueGem, Split::Test) => {
                (vec![obj(place(&mut rng), Gem, Blue)], goal(Gem, Some(Blue)))
            }
            (TaskId::MazeI, Split::Train) => (vec![obj(MAZE_TRAIN_CHEESE, Cheese, Yellow)], goal(Cheese, None)),
            (TaskId::MazeI, Split::Test) => (vec![obj(place(&mut rng), Cheese, Yellow)], goal(Cheese, None)),
            (TaskId::MazeII | TaskId::MazeIII, Split::Train) => {
                (vec![obj(place(&mut rng), DiagonalLine, Yellow)], goal(DiagonalLine, None))
            }
            (TaskId::MazeII, Split::Test) => (
                vec![obj(place(&mut rng), Gem, Yellow), obj(place(&mut rng), DiagonalLine, Red)],
                goal(DiagonalLine, None),
            ),
            (TaskId::MazeIII, Split::Test) => (
                vec![
                    obj(place(&mut rng), Gem, Yellow),
                    obj(place(&mut rng), DiagonalLine, Red),
                    obj(place(&mut rng), StraightLine, Red),
                ],
                goal(DiagonalLine, Some(Red)),
            ),
        };
        level.objects = objects;
        level.goal = predicate;
        if level.validate().is_ok() {
            return level;
        }
    }
}

/// Test levels start at the left end of the corridor. Train levels start
/// anywhere in the room except on the coin, so demonstrations cover every
/// approach direction to the far-right coin.
fn corridor_start(split: Split, rng: &mut Rng) -> Cell {
    match split {
        Split::Test => CORRIDOR_START,
        Split::Train => {
            let cells: Vec<Cell> = (1..GRID - 1)
                .flat_map(|r| (1..GRID - 1).map(move |c| Cell::new(r, c)))
                .filter(|&c| c != CORRIDOR_TRAIN_COIN)
                .collect();
            cells[rng.below(cells.len())]
        }
    }
}

/// Mixes a generator seed, split and record index into a level seed. The top
/// bit carries the split so train and test seed spaces never overlap.
pub fn derive_level_seed(seed: u64, split: Split, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 1) | (split_code(split) << 63)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub level: std::sync::Arc<Level>,
    pub agent: Cell,
    pub t: usize,
    pub done: bool,
    pub succeeded: bool,
}

impl EnvState {
    pub fn new(level: std::sync::Arc<Level>) -> Self {
        let agent = level.agent_start;
        Self {
            level,
            agent,
            t: 0,
            done: false,
            succeeded: false,
        }
    }
}

/// Advances one step. Walls and the grid boundary block movement; touching
/// the goal object succeeds, touching any other object fails.
pub fn step(state: &EnvState, action: Action) -> crate::Result<EnvState> {
    if state.done {
        return Err(crate::Error::EpisodeFinished);
    }
    let mut next = state.clone();
    if let Some(c) = action.apply(state.agent).filter(|&c| !state.level.is_wall(c)) {
        next.agent = c;
    }
    next.t += 1;
    if let Some(obj) = state.level.object_at(next.agent) {
        next.done = true;
        next.succeeded = state.level.goal.matches(obj);
    }
    if next.t >= MAX_EPISODE_LEN {
        next.done = true;
    }
    Ok(next)
}
