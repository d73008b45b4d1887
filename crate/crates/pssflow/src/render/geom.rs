//! Minimal vector/primitive kit for the quad scenes.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        v3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let l = self.length();
        v3(self.x / l, self.y / l, self.z / l)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        v3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        v3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        v3(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        v3(-self.x, -self.y, -self.z)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Parallelogram `corner + u*edge_u + v*edge_v`, `u, v` in [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quad {
    pub corner: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    #[serde(default = "zero_rgb")]
    pub albedo: [f64; 3],
    #[serde(default = "zero_rgb", alias = "radiance")]
    pub emission: [f64; 3],
}

fn zero_rgb() -> [f64; 3] {
    [0.0; 3]
}

pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Geometric normal, oriented against the incoming ray.
    pub normal: Vec3,
    /// True when the ray arrived from the side the raw normal points to.
    pub front: bool,
    pub prim: usize,
}

impl Quad {
    pub fn point(&self, u: f64, v: f64) -> Vec3 {
        self.corner + self.edge_u * u + self.edge_v * v
    }

    /// Raw (unoriented) unit normal of the plane.
    pub fn raw_normal(&self) -> Vec3 {
        self.edge_u.cross(self.edge_v).normalized()
    }

    pub fn area(&self) -> f64 {
        self.edge_u.cross(self.edge_v).length()
    }

    pub fn is_emitter(&self) -> bool {
        self.emission.iter().any(|&c| c > 0.0)
    }

    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
        let n = self.edge_u.cross(self.edge_v);
        let denom = ray.dir.dot(n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.corner - ray.origin).dot(n) / denom;
        if t <= t_min || t >= t_max {
            return None;
        }
        let w = ray.at(t) - self.corner;
        // express the hit in the (possibly non-orthogonal) edge basis
        let a11 = self.edge_u.dot(self.edge_u);
        let a12 = self.edge_u.dot(self.edge_v);
        let a22 = self.edge_v.dot(self.edge_v);
        let b1 = w.dot(self.edge_u);
        let b2 = w.dot(self.edge_v);
        let det = a11 * a22 - a12 * a12;
        let u = (b1 * a22 - b2 * a12) / det;
        let v = (a11 * b2 - a12 * b1) / det;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        Some((t, n.normalized()))
    }
}

/// Orthonormal basis around a unit normal.
pub fn onb(n: Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() > 0.9 { v3(0.0, 1.0, 0.0) } else { v3(1.0, 0.0, 0.0) };
    let t = a.cross(n).normalized();
    let b = n.cross(t);
    (t, b)
}

/// Map a unit square point to a cosine-weighted hemisphere direction around
/// `n` (pdf `cos(theta) / pi`).
pub fn cosine_hemisphere(n: Vec3, u1: f64, u2: f64) -> Vec3 {
    let r = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let (t, b) = onb(n);
    let z = (1.0 - u1).max(0.0).sqrt();
    (t * (r * phi.cos()) + b * (r * phi.sin()) + n * z).normalized()
}
