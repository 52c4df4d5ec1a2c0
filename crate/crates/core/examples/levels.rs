//! Procedural levels: generate one level per task, print it as text and play
//! the scripted expert through the environment step function.

use std::sync::Arc;

use mmrl::expert::solve;
use mmrl::worldgrid::*;

fn ascii(level: &Level, agent: Cell) -> String {
    let mut out = String::new();
    for row in 0..GRID {
        for col in 0..GRID {
            let c = Cell::new(row, col);
            let ch = if c == agent {
                '@'
            } else if level.is_wall(c) {
                '#'
            } else if let Some(obj) = level.object_at(c) {
                if level.goal.matches(obj) { 'G' } else { 'x' }
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

fn main() -> anyhow::Result<()> {
    for task in [TaskId::Corridor, TaskId::CorridorBlueGem, TaskId::MazeI, TaskId::MazeII] {
        for split in [Split::Train, Split::Test] {
            let level = make_level(task, split, derive_level_seed(0, split, 0));
            let actions = solve(&level)?;
            let mut state = EnvState::new(Arc::new(level.clone()));
            for &a in &actions {
                state = step(&state, a)?;
            }
            println!("{}  instruction: {:?}", level.label(), instruction_text(task, split));
            print!("{}", ascii(&level, level.agent_start));
            println!("caption: {}", caption_for(&level, level.agent_start));
            println!("expert: {} steps, success {}\n", actions.len(), state.succeeded);
        }
    }
    let obs = render(&make_level(TaskId::Corridor, Split::Train, 1), Cell::new(6, 1));
    println!("observation: {} values, in range {}", obs.pixels.len(), obs.in_range());
    Ok(())
}
