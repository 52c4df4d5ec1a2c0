//! Procedural 13×13 gridworlds, tile rendering, instructions and captions.

mod level;
mod render;
mod text;

pub use level::{
    derive_level_seed, make_level, step, Action, Cell, Color, EnvState, GoalPredicate, Level, Object, Shape,
    Split, TaskId, CORRIDOR_START, CORRIDOR_TRAIN_COIN, GRID, MAX_EPISODE_LEN, MAZE_START, MAZE_TRAIN_CHEESE,
};
pub use render::{background, glyph_mask, render, Observation, CHANNELS, OBS_LEN, SIDE, TILE};
pub use text::{
    caption_for, instruction_for, instruction_text, tokenize, vocab_size, Instruction, MAX_TOKENS, PAD_ID,
    RANDOM_TEXT, UNKNOWN_ID,
};
