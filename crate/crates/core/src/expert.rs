//! Scripted shortest-path experts and demonstration datasets.

use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::jsonl::{self, Meta, SCHEMA_VERSION};
use crate::worldgrid::{
    derive_level_seed, instruction_for, make_level, render, step, Action, Cell, EnvState, Instruction, Level,
    Observation, Split, TaskId, GRID,
};

/// Shortest action sequence from the agent start to the goal object that
/// never enters a distractor cell. Neighbors are expanded in the order
/// up, down, left, right, so the first-found parent wins ties.
pub fn solve(level: &Level) -> Result<Vec<Action>> {
    let goal = level.goal_object().ok_or_else(|| Error::Unsolvable(level.label()))?.cell;
    let blocked = |c: Cell| level.object_at(c).is_some_and(|o| !level.goal.matches(o));
    let idx = |c: Cell| c.row * GRID + c.col;
    let mut parent: Vec<Option<(Cell, Action)>> = vec![None; GRID * GRID];
    let mut seen = vec![false; GRID * GRID];
    seen[idx(level.agent_start)] = true;
    let mut queue = VecDeque::from([level.agent_start]);
    while let Some(c) = queue.pop_front() {
        if c == goal {
            let mut actions = Vec::new();
            let mut cur = c;
            while let Some((prev, a)) = parent[idx(cur)] {
                actions.push(a);
                cur = prev;
            }
            actions.reverse();
            return Ok(actions);
        }
        for a in Action::ALL {
            let Some(n) = a.apply(c) else { continue };
            if level.is_wall(n) || seen[idx(n)] || blocked(n) {
                continue;
            }
            seen[idx(n)] = true;
            parent[idx(n)] = Some((c, a));
            queue.push_back(n);
        }
    }
    Err(Error::Unsolvable(level.label()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub level: Level,
    pub instruction: Instruction,
    pub actions: Vec<Action>,
    pub success: bool,
}

/// Result of stepping a stored action list through the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    /// Agent cell before each action, followed by the final cell.
    pub cells: Vec<Cell>,
    pub succeeded: bool,
    pub done: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn replay(&self) -> Result<Replay> {
        let mut state = EnvState::new(Arc::new(self.level.clone()));
        let mut cells = vec![state.agent];
        for &a in &self.actions {
            state = step(&state, a)?;
            cells.push(state.agent);
        }
        Ok(Replay {
            cells,
            succeeded: state.succeeded,
            done: state.done,
        })
    }

    /// Observations `o_0 … o_T`, one per action (the terminal frame after
    /// the last action is excluded).
    pub fn observations(&self) -> Result<Vec<Observation>> {
        let replay = self.replay()?;
        Ok(replay.cells[..self.actions.len()].iter().map(|&c| render(&self.level, c)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub schema_version: u32,
    pub task: TaskId,
    pub split: Split,
    pub seed: u64,
    pub count: usize,
}

impl Meta for DemoMeta {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn count(&self) -> usize {
        self.count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub meta: DemoMeta,
    pub records: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.meta, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, records): (DemoMeta, Vec<Trajectory>) = jsonl::read(path)?;
        Ok(Self { meta, records })
    }

    /// Record indices for the 90/10 train/validation split.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.records.len())
    }
}

/// The first 90% of records train, the rest validate. With fewer than ten
/// records the last one validates; a single record serves both roles.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let n_val = (n / 10).max(1);
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// `n` distinct level seeds derived from a generator seed, in index order.
pub fn level_seeds(seed: u64, split: Split, n: usize) -> Vec<u64> {
    let mut seeds = Vec::with_capacity(n);
    let mut used = HashSet::with_capacity(n);
    let mut index = 0u64;
    while seeds.len() < n {
        let s = derive_level_seed(seed, split, index);
        index += 1;
        if used.insert(s) {
            seeds.push(s);
        }
    }
    seeds
}

/// Expert demonstrations on `n` distinct levels derived from `seed`. Each
/// record is replayed and must succeed before it is kept.
pub fn generate_demos(task: TaskId, split: Split, n: usize, seed: u64) -> Result<DemoDataset> {
    if n == 0 {
        return Err(invalid("demonstration count must be positive"));
    }
    let seeds = level_seeds(seed, split, n);
    let instruction = instruction_for(task, split);
    let records = seeds
        .par_iter()
        .map(|&s| {
            let level = make_level(task, split, s);
            let actions = solve(&level)?;
            let traj = Trajectory {
                level,
                instruction: instruction.clone(),
                actions,
                success: true,
            };
            let replay = traj.replay()?;
            if !(replay.done && replay.succeeded) {
                return Err(Error::ReplayMismatch(traj.level.label()));
            }
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoDataset {
        meta: DemoMeta {
            schema_version: SCHEMA_VERSION,
            task,
            split,
            seed,
            count: n,
        },
        records,
    })
}
