//! Planar geometry shared by the protocols and solvers.

use serde::{Deserialize, Serialize};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A 2-D Cartesian point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        distance(*self, *other)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Position) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

impl std::ops::Add for Position {
    type Output = Position;
    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Position {
    type Output = Position;
    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Position {
    type Output = Position;
    fn mul(self, k: f64) -> Position {
        Position::new(self.x * k, self.y * k)
    }
}

/// Euclidean distance in meters.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Euclidean norm of an arbitrary-dimension coordinate difference.
pub fn distance_nd(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// One-way radio propagation time between two points, in seconds.
pub fn propagation_delay(a: Position, b: Position) -> f64 {
    distance(a, b) / SPEED_OF_LIGHT
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x_m: f64,
    pub min_y_m: f64,
    pub max_x_m: f64,
    pub max_y_m: f64,
}

impl Bounds {
    pub fn new(min: Position, max: Position) -> Self {
        Bounds {
            min_x_m: min.x,
            min_y_m: min.y,
            max_x_m: max.x,
            max_y_m: max.y,
        }
    }

    /// A box large enough to never be active.
    pub fn unbounded() -> Self {
        Bounds::new(Position::new(-1e9, -1e9), Position::new(1e9, 1e9))
    }

    pub fn min(&self) -> Position {
        Position::new(self.min_x_m, self.min_y_m)
    }

    pub fn max(&self) -> Position {
        Position::new(self.max_x_m, self.max_y_m)
    }

    pub fn is_valid(&self) -> bool {
        [self.min_x_m, self.min_y_m, self.max_x_m, self.max_y_m]
            .iter()
            .all(|v| v.is_finite())
            && self.min_x_m <= self.max_x_m
            && self.min_y_m <= self.max_y_m
    }

    pub fn contains(&self, p: Position) -> bool {
        p.x >= self.min_x_m && p.x <= self.max_x_m && p.y >= self.min_y_m && p.y <= self.max_y_m
    }

    pub fn clamp(&self, p: Position) -> Position {
        Position::new(
            p.x.clamp(self.min_x_m, self.max_x_m),
            p.y.clamp(self.min_y_m, self.max_y_m),
        )
    }

    pub fn center(&self) -> Position {
        Position::new(
            0.5 * (self.min_x_m + self.max_x_m),
            0.5 * (self.min_y_m + self.max_y_m),
        )
    }

    pub fn width(&self) -> f64 {
        self.max_x_m - self.min_x_m
    }

    pub fn height(&self) -> f64 {
        self.max_y_m - self.min_y_m
    }

    /// Lower/upper bound of coordinate `axis` (0 = x, 1 = y).
    pub fn axis(&self, axis: usize) -> (f64, f64) {
        match axis {
            0 => (self.min_x_m, self.max_x_m),
            _ => (self.min_y_m, self.max_y_m),
        }
    }
}
