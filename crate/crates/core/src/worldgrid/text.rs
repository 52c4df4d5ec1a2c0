use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::level::{Cell, Level, Split, TaskId};

pub const MAX_TOKENS: usize = 16;
pub const UNKNOWN_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Control instruction that carries no information about any task.
pub const RANDOM_TEXT: &str =
    "NeurIPS 2023 will be held again at the New Orleans Ernest N. Morial Convention Center";

const WORDS: &[&str] = &[
    // instructions
    "the", "goal", "is", "to", "collect", "coin", "navigate", "a", "maze", "yellow", "cheese", "line",
    "red", "diagonal", "blue", "gem",
    // captions
    "straight", "at", "agent", "near", "far", "above", "below", "left", "right", "and", "no", "objects",
];

fn vocab() -> &'static [&'static str] {
    static V: OnceLock<Vec<&'static str>> = OnceLock::new();
    V.get_or_init(|| {
        let mut v = WORDS.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    })
}

/// Number of distinct token ids, including the unknown and pad ids.
pub fn vocab_size() -> usize {
    vocab().len() + 2
}

/// Lowercases, drops punctuation, splits on whitespace and maps each word
/// through the fixed vocabulary. The result always has [`MAX_TOKENS`] ids.
pub fn tokenize(text: &str) -> Vec<usize> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let mut ids: Vec<usize> = cleaned
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(|w| vocab().binary_search(&w).map_or(UNKNOWN_ID, |i| i + 2))
        .collect();
    ids.resize(MAX_TOKENS, PAD_ID);
    ids
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub token_ids: Vec<usize>,
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let token_ids = tokenize(&text);
        Self { text, token_ids }
    }
}

pub fn instruction_text(task: TaskId, split: Split) -> &'static str {
    match (task, split) {
        (TaskId::Corridor, _) | (TaskId::CorridorBlueGem, Split::Train) => "The goal is to collect the coin.",
        (TaskId::CorridorBlueGem, Split::Test) => "The goal is to collect the blue gem.",
        (TaskId::MazeI, _) => "Navigate a maze to collect the yellow cheese.",
        (TaskId::MazeII, _) | (TaskId::MazeIII, Split::Train) => "Navigate a maze to collect the line.",
        (TaskId::MazeIII, Split::Test) => "Navigate a maze to collect the red diagonal line.",
    }
}

pub fn instruction_for(task: TaskId, split: Split) -> Instruction {
    Instruction::new(instruction_text(task, split))
}

fn position_phrase(agent: Cell, obj: Cell) -> String {
    if agent == obj {
        return "at the agent".into();
    }
    let dr = obj.row as isize - agent.row as isize;
    let dc = obj.col as isize - agent.col as isize;
    // Dominant axis only; diagonal ties go to the vertical word.
    let direction = if dc.abs() > dr.abs() {
        if dc < 0 { "to the left" } else { "to the right" }
    } else if dr < 0 {
        "above"
    } else {
        "below"
    };
    let qualifier = if agent.manhattan(obj) <= 2 { "near" } else { "far" };
    format!("{qualifier} {direction}")
}

/// Templated scene description. Objects are listed nearest first (Manhattan
/// distance, ties in row-major order).
pub fn caption_for(level: &Level, agent: Cell) -> String {
    let mut objs: Vec<_> = level.objects.iter().collect();
    objs.sort_by_key(|o| (o.cell.manhattan(agent), o.cell));
    if objs.is_empty() {
        return "no objects".into();
    }
    objs.iter()
        .map(|o| format!("a {} {} {}", o.color.word(), o.shape.words(), position_phrase(agent, o.cell)))
        .collect::<Vec<_>>()
        .join(" and ")
}
