//! Cartesian positions and arrival-direction helpers.
//!
//! Angles follow the receiver-centred convention used by the solver:
//! azimuth `phi = atan2(dy, dx)` in the ground plane and elevation
//! `theta = atan2(dz, hypot(dx, dy))` above it.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A point (or displacement) in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3D {
    pub const ORIGIN: Position3D = Position3D { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Position3D) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &Position3D) -> f64 {
        (*self - *other).norm()
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Unit vector in the same direction; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Position3D> {
        let n = self.norm();
        (n > 0.0).then(|| *self * (1.0 / n))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Azimuth of this displacement, `(-pi, pi]`.
    pub fn azimuth(&self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Elevation of this displacement, `[-pi/2, pi/2]`.
    pub fn elevation(&self) -> f64 {
        self.z.atan2(self.horizontal_norm())
    }

    /// Unit direction for an azimuth/elevation pair.
    pub fn from_angles(phi: f64, theta: f64) -> Position3D {
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Position3D::new(ct * cp, ct * sp, st)
    }

    pub fn mean(points: &[Position3D]) -> Option<Position3D> {
        if points.is_empty() {
            return None;
        }
        let sum = points.iter().fold(Position3D::ORIGIN, |acc, p| acc + *p);
        Some(sum * (1.0 / points.len() as f64))
    }
}

impl Add for Position3D {
    type Output = Position3D;
    fn add(self, o: Position3D) -> Position3D {
        Position3D::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Position3D {
    type Output = Position3D;
    fn sub(self, o: Position3D) -> Position3D {
        Position3D::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Position3D {
    type Output = Position3D;
    fn mul(self, k: f64) -> Position3D {
        Position3D::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Neg for Position3D {
    type Output = Position3D;
    fn neg(self) -> Position3D {
        Position3D::new(-self.x, -self.y, -self.z)
    }
}

/// Simulation volume `[0, x] x [0, y] x [0, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub x_extent: f64,
    pub y_extent: f64,
    pub z_extent: f64,
}

impl Volume {
    pub const fn new(x_extent: f64, y_extent: f64, z_extent: f64) -> Self {
        Self { x_extent, y_extent, z_extent }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_extent, self.y_extent, self.z_extent]
            .iter()
            .all(|e| e.is_finite() && *e > 0.0)
    }

    pub fn contains(&self, p: &Position3D) -> bool {
        self.contains_inflated(p, 0.0)
    }

    /// Containment in the volume grown by `fraction` of each extent on every side.
    pub fn contains_inflated(&self, p: &Position3D, fraction: f64) -> bool {
        let within = |v: f64, extent: f64| {
            let pad = extent * fraction;
            v >= -pad && v <= extent + pad
        };
        within(p.x, self.x_extent) && within(p.y, self.y_extent) && within(p.z, self.z_extent)
    }
}
