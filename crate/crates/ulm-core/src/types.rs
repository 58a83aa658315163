use std::ops::{Add, Mul, Neg, Sub};

/// 2D vector in (row, col) order. Used for pixel positions, displacements,
/// and velocity components alike.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub r: f64,
    pub c: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { r: 0.0, c: 0.0 };

    pub fn new(r: f64, c: f64) -> Self {
        Vec2 { r, c }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.r * other.r + self.c * other.c
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(self, other: Vec2) -> f64 {
        (self - other).norm_sq()
    }

    pub fn dist(self, other: Vec2) -> f64 {
        self.dist_sq(other).sqrt()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.r + rhs.r, self.c + rhs.c)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.r - rhs.r, self.c - rhs.c)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.r * s, self.c * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.r, -self.c)
    }
}

/// One localized microbubble.
#[derive(Clone, Debug)]
pub struct Bubble {
    /// Subpixel position in pixel coordinates, (row, col).
    pub position: Vec2,
    /// Intensity at the integer detection peak.
    pub amplitude: f32,
    /// Raw k x k intensity window centered on the integer peak, row-major.
    pub patch: Vec<f32>,
}

/// All bubbles localized on one frame, ordered by descending detection
/// correlation.
#[derive(Clone, Debug, Default)]
pub struct BubbleSet {
    pub frame_index: usize,
    pub bubbles: Vec<Bubble>,
}

impl BubbleSet {
    pub fn len(&self) -> usize {
        self.bubbles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bubbles.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec2 {
        self.bubbles[i].position
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.bubbles.iter().map(|b| b.position)
    }
}
