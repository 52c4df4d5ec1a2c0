use std::sync::Arc;

use mmrl::worldgrid::*;
use mmrl::Error;
use proptest::prelude::*;

fn open_room(task: TaskId) -> Level {
    let mut level = make_level(task, Split::Test, 3);
    level.objects.clear();
    level
}

fn with_object(mut level: Level, cell: Cell, shape: Shape, color: Color) -> Level {
    level.objects.push(Object { cell, shape, color });
    level
}

#[test]
fn corridor_train_coin_sits_at_column_eleven() {
    for s in 0..200 {
        let level = make_level(TaskId::Corridor, Split::Train, derive_level_seed(5, Split::Train, s));
        let coin = level.goal_object().unwrap();
        assert_eq!(coin.cell, Cell::new(6, 11));
        assert_eq!((coin.shape, coin.color), (Shape::Coin, Color::Yellow));
    }
}

#[test]
fn maze_ii_test_objects() {
    for s in 0..50 {
        let level = make_level(TaskId::MazeII, Split::Test, derive_level_seed(1, Split::Test, s));
        let mut set: Vec<(Shape, Color)> = level.objects.iter().map(|o| (o.shape, o.color)).collect();
        set.sort_by_key(|&(s, c)| (s as u8, c as u8));
        assert_eq!(set, vec![(Shape::Gem, Color::Yellow), (Shape::DiagonalLine, Color::Red)]);
        assert_eq!(level.goal_object().unwrap().shape, Shape::DiagonalLine);
    }
}

#[test]
fn maze_iii_test_objects() {
    let level = make_level(TaskId::MazeIII, Split::Test, derive_level_seed(1, Split::Test, 0));
    let mut set: Vec<(Shape, Color)> = level.objects.iter().map(|o| (o.shape, o.color)).collect();
    set.sort_by_key(|&(s, c)| (s as u8, c as u8));
    assert_eq!(
        set,
        vec![(Shape::Gem, Color::Yellow), (Shape::DiagonalLine, Color::Red), (Shape::StraightLine, Color::Red)]
    );
    let goal = level.goal_object().unwrap();
    assert_eq!((goal.shape, goal.color), (Shape::DiagonalLine, Color::Red));
}

#[test]
fn step_onto_goal_succeeds() {
    let level = with_object(open_room(TaskId::Corridor), Cell::new(6, 6), Shape::Coin, Color::Yellow);
    let mut state = EnvState::new(Arc::new(Level {
        agent_start: Cell::new(6, 5),
        ..level
    }));
    state = step(&state, Action::Right).unwrap();
    assert!(state.done && state.succeeded);
    assert_eq!(state.t, 1);
    assert!(matches!(step(&state, Action::Left), Err(Error::EpisodeFinished)));
}

#[test]
fn step_into_wall_keeps_position() {
    let level = make_level(TaskId::Corridor, Split::Test, 9);
    let state = EnvState::new(Arc::new(level));
    assert_eq!(state.agent, Cell::new(6, 1));
    let next = step(&state, Action::Left).unwrap();
    assert_eq!(next.agent, state.agent);
    assert_eq!(next.t, 1);
    assert!(!next.done);
}

#[test]
fn maze_ii_gem_is_a_failure() {
    let level = make_level(TaskId::MazeII, Split::Test, derive_level_seed(4, Split::Test, 0));
    let gem = level.objects.iter().find(|o| o.shape == Shape::Gem).unwrap().cell;
    // Start next to the gem on any free side and step into it.
    let (start, action) = Action::ALL
        .iter()
        .find_map(|&a| {
            let back = match a {
                Action::Up => Action::Down,
                Action::Down => Action::Up,
                Action::Left => Action::Right,
                Action::Right => Action::Left,
            };
            back.apply(gem)
                .filter(|&c| !level.is_wall(c) && level.object_at(c).is_none())
                .map(|c| (c, a))
        })
        .unwrap();
    let state = EnvState::new(Arc::new(Level {
        agent_start: start,
        ..level
    }));
    let next = step(&state, action).unwrap();
    assert!(next.done && !next.succeeded);
}

#[test]
fn episodes_time_out() {
    let level = make_level(TaskId::Corridor, Split::Test, 2);
    let mut state = EnvState::new(Arc::new(level));
    for _ in 0..MAX_EPISODE_LEN {
        assert!(!state.done);
        state = step(&state, Action::Left).unwrap();
    }
    assert!(state.done && !state.succeeded);
    assert_eq!(state.t, MAX_EPISODE_LEN);
}

#[test]
fn empty_room_renders_background() {
    let mut level = open_room(TaskId::Corridor);
    level.walls.iter_mut().for_each(|w| *w = false);
    let agent = Cell::new(0, 0);
    let obs = render(&level, agent);
    let bg = background(level.theme_hue);
    for y in 0..SIDE {
        for x in 0..SIDE {
            if y < TILE && x < TILE {
                continue;
            }
            assert_eq!(obs.pixel(y, x), bg, "pixel ({y}, {x})");
        }
    }
}

#[test]
fn glyph_pairs_are_separable() {
    let mut level = open_room(TaskId::Corridor);
    level.walls.iter_mut().for_each(|w| *w = false);
    let cell = Cell::new(4, 4);
    let mut tiles = Vec::new();
    for shape in Shape::ALL {
        for color in [Color::Yellow, Color::Red, Color::Blue] {
            let l = with_object(level.clone(), cell, shape, color);
            tiles.push(((shape, color), render(&l, Cell::new(0, 0))));
        }
    }
    for (i, (a, oa)) in tiles.iter().enumerate() {
        for (b, ob) in &tiles[i + 1..] {
            let mad: f64 = oa.pixels.iter().zip(&ob.pixels).map(|(p, q)| (p - q).abs()).sum::<f64>()
                / (TILE * TILE * CHANNELS) as f64;
            assert!(mad > 0.01, "{a:?} vs {b:?}: {mad}");
        }
    }
    let diag = render(&with_object(level.clone(), cell, Shape::DiagonalLine, Color::Red), Cell::new(0, 0));
    let straight = render(&with_object(level, cell, Shape::StraightLine, Color::Red), Cell::new(0, 0));
    let differing = (0..SIDE * SIDE).filter(|&i| diag.pixel(i / SIDE, i % SIDE) != straight.pixel(i / SIDE, i % SIDE)).count();
    assert!(differing >= 4);
}

#[test]
fn instruction_strings() {
    assert_eq!(instruction_text(TaskId::Corridor, Split::Train), "The goal is to collect the coin.");
    assert_eq!(instruction_text(TaskId::MazeI, Split::Train), "Navigate a maze to collect the yellow cheese.");
    assert_eq!(instruction_text(TaskId::MazeII, Split::Train), "Navigate a maze to collect the line.");
    assert_eq!(
        instruction_text(TaskId::MazeIII, Split::Test),
        "Navigate a maze to collect the red diagonal line."
    );
    assert_eq!(instruction_text(TaskId::CorridorBlueGem, Split::Test), "The goal is to collect the blue gem.");
}

#[test]
fn tokenizer_normalizes() {
    assert_eq!(tokenize("The goal is to collect the coin."), tokenize("the goal is to collect the coin"));
    assert_eq!(tokenize(""), vec![PAD_ID; MAX_TOKENS]);
    assert_eq!(tokenize("zzz-unknown word")[0], UNKNOWN_ID);
    let i = Instruction::new("a red diagonal line");
    assert_eq!(i.token_ids, tokenize(&i.text));
    assert!(i.token_ids.iter().all(|&t| t < vocab_size()));
}

#[test]
fn captions() {
    let room = open_room(TaskId::Corridor);
    let coin = with_object(room.clone(), Cell::new(6, 9), Shape::Coin, Color::Yellow);
    assert!(caption_for(&coin, Cell::new(6, 2)).contains("yellow coin"));
    assert!(caption_for(&coin, Cell::new(6, 9)).contains("at the agent"));
    // Equal distances: the row-major earlier object comes first.
    let two = with_object(
        with_object(room, Cell::new(6, 8), Shape::Coin, Color::Yellow),
        Cell::new(6, 4),
        Shape::Gem,
        Color::Blue,
    );
    let cap = caption_for(&two, Cell::new(6, 6));
    let (gem, coin) = (cap.find("blue gem").unwrap(), cap.find("yellow coin").unwrap());
    assert!(gem < coin, "{cap}");
    let cap = caption_for(&two, Cell::new(6, 7));
    assert!(cap.find("yellow coin").unwrap() < cap.find("blue gem").unwrap(), "{cap}");
}

#[test]
fn train_and_test_hues_are_disjoint() {
    for task in TaskId::ALL {
        for i in 0..100 {
            let tr = make_level(task, Split::Train, derive_level_seed(11, Split::Train, i));
            let te = make_level(task, Split::Test, derive_level_seed(11, Split::Test, i));
            assert!((0.0..0.5).contains(&tr.theme_hue), "{}", tr.theme_hue);
            assert!((0.5..1.0).contains(&te.theme_hue), "{}", te.theme_hue);
            assert_ne!(tr.level_seed, te.level_seed);
        }
    }
}

fn task() -> impl Strategy<Value = TaskId> {
    prop::sample::select(TaskId::ALL.to_vec())
}

fn split() -> impl Strategy<Value = Split> {
    prop::sample::select(vec![Split::Train, Split::Test])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn levels_are_reproducible_and_valid(task in task(), split in split(), seed in any::<u64>()) {
        let a = make_level(task, split, seed);
        prop_assert_eq!(&a, &make_level(task, split, seed));
        prop_assert!(a.validate().is_ok(), "{:?}", a.validate());
        let obs = render(&a, a.agent_start);
        prop_assert!(obs.in_range());
        prop_assert_eq!(obs.pixels.len(), OBS_LEN);
        prop_assert_eq!(obs, render(&a, a.agent_start));
    }

    #[test]
    fn level_json_round_trips(task in task(), split in split(), seed in any::<u64>()) {
        let a = make_level(task, split, seed);
        let back: Level = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(a, back);
    }

    #[test]
    fn seed_spaces_are_disjoint(seed in any::<u64>(), i in any::<u64>(), j in any::<u64>()) {
        prop_assert_ne!(derive_level_seed(seed, Split::Train, i), derive_level_seed(seed, Split::Test, j));
    }
}
