use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Square => "squares",
            ShapeKind::Circle => "circles",
            ShapeKind::Triangle => "triangles",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Whether pixel `(y, x)` of a `cell × cell` tile is inside the shape.
    /// The outer one-pixel ring of the tile is always background.
    pub fn covers(self, y: usize, x: usize, cell: usize) -> bool {
        let (y, x, c) = (y as i64, x as i64, cell as i64);
        if y < 1 || x < 1 || y >= c - 1 || x >= c - 1 {
            return false;
        }
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                // Pixel centres within radius (cell/2 - 1) of the tile centre.
                let dy = 2 * y + 1 - c;
                let dx = 2 * x + 1 - c;
                let r = c - 2;
                dy * dy + dx * dx <= r * r
            }
            ShapeKind::Triangle => (2 * x + 1 - c).abs() <= y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// `count` objects in distinct random cells of a `grid × grid` board.
    pub fn random(rng: &mut impl Rng, grid: usize, count: usize) -> Self {
        let mut cells: Vec<usize> = (0..grid * grid).collect();
        cells.shuffle(rng);
        let objects = cells[..count.min(grid * grid)]
            .iter()
            .map(|&c| Object {
                shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
                color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
                row: c / grid,
                col: c % grid,
            })
            .collect();
        Self { grid, objects }
    }

    /// Objects sorted by cell: two scenes render identically iff their
    /// layouts are equal.
    pub fn layout(&self) -> Vec<Object> {
        let mut objs = self.objects.clone();
        objs.sort_by_key(|o| (o.row, o.col));
        objs
    }

    pub fn is_valid(&self) -> bool {
        if self.objects.is_empty() {
            return false;
        }
        let mut seen = std::collections::HashSet::new();
        self.objects
            .iter()
            .all(|o| o.row < self.grid && o.col < self.grid && seen.insert((o.row, o.col)))
    }

    /// Rasterises to a `[3, grid·cell, grid·cell]` tensor on a black
    /// background. No anti-aliasing: every pixel is background or exactly
    /// one object colour.
    pub fn render(&self, cell: usize) -> Tensor {
        let side = self.grid * cell;
        let mut img = Tensor::zeros(&[3, side, side]);
        let data = img.data_mut();
        for o in &self.objects {
            let rgb = o.color.rgb();
            for y in 0..cell {
                for x in 0..cell {
                    if o.shape.covers(y, x, cell) {
                        let (py, px) = (o.row * cell + y, o.col * cell + x);
                        for (ch, v) in rgb.iter().enumerate() {
                            data[(ch * side + py) * side + px] = *v;
                        }
                    }
                }
            }
        }
        img
    }

    /// Truthful description listing every object, e.g.
    /// `"a red square and a blue circle"`.
    pub fn caption(&self) -> String {
        self.layout()
            .iter()
            .map(|o| format!("a {} {}", o.color.name(), o.shape.name()))
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_square_is_exact_rectangle() {
        let s = Scene {
            grid: 4,
            objects: vec![Object {
                shape: ShapeKind::Square,
                color: Color::Red,
                row: 1,
                col: 2,
            }],
        };
        let img = s.render(8);
        let side = 32;
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let inside = (9..15).contains(&y) && (17..23).contains(&x);
                    let want = if inside && ch == 0 { 1.0 } else { 0.0 };
                    assert_eq!(img.data()[(ch * side + y) * side + x], want, "ch{ch} y{y} x{x}");
                }
            }
        }
    }

    #[test]
    fn empty_cells_are_constant_background() {
        let s = Scene {
            grid: 4,
            objects: vec![Object {
                shape: ShapeKind::Circle,
                color: Color::Blue,
                row: 0,
                col: 0,
            }],
        };
        let img = s.render(8);
        // Everything outside cell (0, 0) is zero.
        for (i, &v) in img.data().iter().enumerate() {
            let (y, x) = ((i / 32) % 32, i % 32);
            if y >= 8 || x >= 8 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn disjoint_objects_have_disjoint_regions() {
        let s = Scene {
            grid: 4,
            objects: vec![
                Object {
                    shape: ShapeKind::Triangle,
                    color: Color::Green,
                    row: 0,
                    col: 0,
                },
                Object {
                    shape: ShapeKind::Square,
                    color: Color::Magenta,
                    row: 0,
                    col: 1,
                },
            ],
        };
        let img = s.render(8);
        let lit = |ch: usize, y: usize, x: usize| img.data()[(ch * 32 + y) * 32 + x] > 0.0;
        for y in 0..32 {
            for x in 0..32 {
                let green_only = lit(1, y, x) && !lit(0, y, x);
                let magenta = lit(0, y, x) && lit(2, y, x);
                assert!(!(green_only && magenta));
                if green_only {
                    assert!(y < 8 && x < 8);
                }
                if magenta {
                    assert!(y < 8 && (8..16).contains(&x));
                }
            }
        }
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let count = |s: ShapeKind| {
            (0..8)
                .flat_map(|y| (0..8).map(move |x| (y, x)))
                .filter(|&(y, x)| s.covers(y, x, 8))
                .count()
        };
        assert_eq!(count(ShapeKind::Square), 36);
        let (c, t) = (count(ShapeKind::Circle), count(ShapeKind::Triangle));
        assert!(c < 36 && t < c && t > 0);
    }
}
