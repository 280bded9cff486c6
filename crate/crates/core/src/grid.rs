//! Grid geometry: positions, Chebyshev distance, and the 8-neighborhood.

use serde::{Deserialize, Serialize};

/// A cell on the `W x W` grid. Coordinates are zero-based internally;
/// the boundary ring (`x == 0`, `y == 0`, `x == W-1`, `y == W-1`) is wall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(u16, u16)", into = "(u16, u16)")]
pub struct Position {
    pub x: u16,
    pub y: u16,
}

impl Position {
    pub fn new(x: u16, y: u16) -> Self {
        Position { x, y }
    }

    /// Chebyshev (L-infinity) distance; one diagonal or orthogonal move
    /// covers distance 1.
    pub fn chebyshev(&self, other: Position) -> u16 {
        let dx = (self.x as i32 - other.x as i32).unsigned_abs() as u16;
        let dy = (self.y as i32 - other.y as i32).unsigned_abs() as u16;
        dx.max(dy)
    }

    /// Row-major cell index (`y * width + x`).
    pub fn index(&self, width: u16) -> usize {
        self.y as usize * width as usize + self.x as usize
    }

    pub fn from_index(idx: usize, width: u16) -> Self {
        Position {
            x: (idx % width as usize) as u16,
            y: (idx / width as usize) as u16,
        }
    }

    pub fn in_bounds(&self, width: u16) -> bool {
        self.x < width && self.y < width
    }

    /// True for the one-cell boundary ring of walls.
    pub fn is_wall(&self, width: u16) -> bool {
        self.x == 0 || self.y == 0 || self.x == width - 1 || self.y == width - 1
    }

    /// The 8 Chebyshev neighbors plus the cell itself, in row-major order,
    /// restricted to the grid. The self cell is included because "stay" is a
    /// legal move.
    pub fn moves(&self, width: u16) -> impl Iterator<Item = Position> + '_ {
        let (x, y, w) = (self.x as i32, self.y as i32, width as i32);
        NEIGHBORHOOD_9.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && nx < w && ny < w).then(|| Position::new(nx as u16, ny as u16))
        })
    }
}

impl From<(u16, u16)> for Position {
    fn from((x, y): (u16, u16)) -> Self {
        Position { x, y }
    }
}

impl From<Position> for (u16, u16) {
    fn from(p: Position) -> Self {
        (p.x, p.y)
    }
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// The 8 neighbor offsets in row-major `(dy, dx)` scan order, as `(dx, dy)`.
pub const NEIGHBORHOOD_8: [(i32, i32); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

const NEIGHBORHOOD_9: [(i32, i32); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chebyshev_is_max_of_axis_distances() {
        let a = Position::new(1, 1);
        assert_eq!(a.chebyshev(Position::new(5, 5)), 4);
        assert_eq!(a.chebyshev(Position::new(1, 7)), 6);
        assert_eq!(a.chebyshev(a), 0);
        assert_eq!(a.chebyshev(Position::new(2, 0)), 1);
    }

    #[test]
    fn wall_ring() {
        let w = 5;
        assert!(Position::new(0, 3).is_wall(w));
        assert!(Position::new(4, 2).is_wall(w));
        assert!(Position::new(2, 0).is_wall(w));
        assert!(!Position::new(2, 2).is_wall(w));
        assert!(!Position::new(1, 3).is_wall(w));
    }

    #[test]
    fn index_round_trip() {
        let w = 20;
        for idx in [0usize, 1, 19, 20, 399] {
            assert_eq!(Position::from_index(idx, w).index(w), idx);
        }
    }

    #[test]
    fn serde_as_tuple() {
        let p = Position::new(3, 7);
        assert_eq!(serde_json::to_string(&p).unwrap(), "[3,7]");
        let q: Position = serde_json::from_str("[3,7]").unwrap();
        assert_eq!(p, q);
    }
}
