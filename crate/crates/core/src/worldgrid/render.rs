use super::level::{Cell, Level, Shape, GRID};

pub const TILE: usize = 6;
pub const SIDE: usize = GRID * TILE;
pub const CHANNELS: usize = 3;
pub const OBS_LEN: usize = SIDE * SIDE * CHANNELS;

const WALL: [f64; 3] = [0.55, 0.55, 0.55];
const AGENT: [f64; 3] = [1.0, 1.0, 1.0];

/// A rendered frame: `78×78×3` row-major values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub pixels: Vec<f64>,
}

impl Observation {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * SIDE + x) * CHANNELS;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn in_range(&self) -> bool {
        self.pixels.len() == OBS_LEN && self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Multiplies every value by `factor`, clamping to `[0, 1]`.
    pub fn with_brightness(&self, factor: f64) -> Observation {
        Observation {
            pixels: self.pixels.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Low-saturation, dark background color for a theme hue.
pub fn background(hue: f64) -> [f64; 3] {
    hsv_to_rgb(hue, 0.3, 0.3)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether tile-local pixel `(x, y)` belongs to the glyph of `shape`.
pub fn glyph_mask(shape: Shape, x: usize, y: usize) -> bool {
    let (dx, dy) = (x as f64 - 2.5, y as f64 - 2.5);
    match shape {
        Shape::Coin => dx * dx + dy * dy <= 2.5 * 2.5,
        Shape::Gem => dx.abs() + dy.abs() <= 2.0,
        Shape::DiagonalLine => x.abs_diff(y) <= 1,
        Shape::StraightLine => y == 2 || y == 3,
        Shape::Cheese => y >= x,
    }
}

fn paint_tile(px: &mut [f64], cell: Cell, mut color_at: impl FnMut(usize, usize) -> Option<[f64; 3]>) {
    for y in 0..TILE {
        for x in 0..TILE {
            if let Some(c) = color_at(x, y) {
                let o = ((cell.row * TILE + y) * SIDE + cell.col * TILE + x) * CHANNELS;
                px[o..o + CHANNELS].copy_from_slice(&c);
            }
        }
    }
}

/// Draws the level with the agent at `agent`. The agent is a white outline
/// around its tile so that an object under it stays visible.
pub fn render(level: &Level, agent: Cell) -> Observation {
    let bg = background(level.theme_hue);
    let mut px: Vec<f64> = bg.iter().copied().cycle().take(OBS_LEN).collect();
    for r in 0..GRID {
        for c in 0..GRID {
            let cell = Cell::new(r, c);
            if level.is_wall(cell) {
                paint_tile(&mut px, cell, |_, _| Some(WALL));
            }
        }
    }
    for obj in &level.objects {
        let rgb = obj.color.rgb();
        paint_tile(&mut px, obj.cell, |x, y| glyph_mask(obj.shape, x, y).then_some(rgb));
    }
    paint_tile(&mut px, agent, |x, y| {
        (x == 0 || y == 0 || x == TILE - 1 || y == TILE - 1).then_some(AGENT)
    });
    Observation { pixels: px }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_differ_pairwise() {
        for a in Shape::ALL {
            for b in Shape::ALL {
                if a == b {
                    continue;
                }
                let diff = (0..TILE * TILE)
                    .filter(|i| glyph_mask(a, i % TILE, i / TILE) != glyph_mask(b, i % TILE, i / TILE))
                    .count();
                assert!(diff >= 4, "{a:?} vs {b:?}: {diff}");
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
