//! Analytic signed distance functions built from primitives, rigid
//! transforms and min/max CSG.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// CSG expression tree. Distances are exact for primitives (negative
/// inside); CSG nodes give a conservative bound with the correct zero set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    /// Ring in the xz-plane around the y axis.
    Torus {
        major: f64,
        minor: f64,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
    /// Capped cylinder along the y axis.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Child evaluated in a frame rotated by the axis-angle vector `rotation`
    /// (radians) and then moved by `translation`.
    Transform {
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
        child: std::boxed::Box<Shape>,
    },
    Union {
        children: Vec<Shape>,
    },
    Intersection {
        children: Vec<Shape>,
    },
    Difference {
        base: std::boxed::Box<Shape>,
        subtract: std::boxed::Box<Shape>,
    },
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere { radius }
    }

    pub fn cube(half_extents: [f64; 3]) -> Self {
        Shape::Box { half_extents }
    }

    pub fn translated(self, t: [f64; 3]) -> Self {
        Shape::Transform {
            translation: t,
            rotation: [0.0; 3],
            child: std::boxed::Box::new(self),
        }
    }

    pub fn transformed(self, translation: [f64; 3], rotation: [f64; 3]) -> Self {
        Shape::Transform {
            translation,
            rotation,
            child: std::boxed::Box::new(self),
        }
    }

    pub fn union(children: Vec<Shape>) -> Self {
        Shape::Union { children }
    }

    /// The sphere ∪ box used for single-shape overfitting.
    pub fn sphere_union_box() -> Self {
        Shape::union(vec![
            Shape::sphere(0.28).translated([-0.14, 0.02, 0.0]),
            Shape::cube([0.18, 0.22, 0.16]).transformed([0.17, -0.05, 0.03], [0.0, 0.5, 0.3]),
        ])
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = Vec3::new(
                    p.x.abs() - half_extents[0],
                    p.y.abs() - half_extents[1],
                    p.z.abs() - half_extents[2],
                );
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Torus { major, minor } => {
                let ring = (p.x * p.x + p.z * p.z).sqrt() - major;
                (ring * ring + p.y * p.y).sqrt() - minor
            }
            Shape::Capsule { a, b, radius } => {
                let (a, b) = (Vec3::from(*a), Vec3::from(*b));
                let (pa, ba) = (p - a, b - a);
                let denom = ba.norm_squared();
                let h = if denom > 0.0 {
                    (pa.dot(&ba) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (pa - ba * h).norm() - radius
            }
            Shape::Cylinder { radius, half_height } => {
                let d0 = (p.x * p.x + p.z * p.z).sqrt() - radius;
                let d1 = p.y.abs() - half_height;
                let outside = (d0.max(0.0).powi(2) + d1.max(0.0).powi(2)).sqrt();
                outside + d0.max(d1).min(0.0)
            }
            Shape::Transform {
                translation,
                rotation,
                child,
            } => {
                let r = Rotation3::new(Vec3::from(*rotation));
                let local = r.inverse() * (p - Vec3::from(*translation));
                child.eval(&local)
            }
            Shape::Union { children } => children
                .iter()
                .map(|c| c.eval(p))
                .fold(f64::INFINITY, f64::min),
            Shape::Intersection { children } => children
                .iter()
                .map(|c| c.eval(p))
                .fold(f64::NEG_INFINITY, f64::max),
            Shape::Difference { base, subtract } => base.eval(p).max(-subtract.eval(p)),
        }
    }

    pub fn eval_at(&self, p: [f64; 3]) -> f64 {
        self.eval(&Vec3::from(p))
    }

    /// Central-difference gradient.
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        const H: f64 = 1e-5;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = H;
            g[a] = (self.eval(&(p + e)) - self.eval(&(p - e))) / (2.0 * H);
        }
        g
    }

    /// Checks that sizes are positive and CSG nodes are non-empty.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Argument(format!("invalid shape: {what}")));
        match self {
            Shape::Sphere { radius } if !(*radius > 0.0) => bad("sphere radius must be positive"),
            Shape::Box { half_extents } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                bad("box half extents must be positive")
            }
            Shape::Torus { major, minor } if !(*major > 0.0 && *minor > 0.0) => {
                bad("torus radii must be positive")
            }
            Shape::Capsule { radius, .. } if !(*radius > 0.0) => bad("capsule radius must be positive"),
            Shape::Cylinder { radius, half_height } if !(*radius > 0.0 && *half_height > 0.0) => {
                bad("cylinder sizes must be positive")
            }
            Shape::Transform { child, .. } => child.validate(),
            Shape::Union { children } | Shape::Intersection { children } => {
                if children.is_empty() {
                    return bad("empty CSG node");
                }
                children.iter().try_for_each(Shape::validate)
            }
            Shape::Difference { base, subtract } => {
                base.validate()?;
                subtract.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let shape: Shape =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("shape description: {e}")))?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("shape serializes")
    }
}

fn random_primitive<R: Rng + ?Sized>(rng: &mut R) -> Shape {
    match rng.random_range(0..5) {
        0 => Shape::sphere(rng.random_range(0.12..0.26)),
        1 => Shape::cube([0; 3].map(|_| rng.random_range(0.08..0.2))),
        2 => Shape::Torus {
            major: rng.random_range(0.14..0.22),
            minor: rng.random_range(0.04..0.08),
        },
        3 => {
            let half = rng.random_range(0.08..0.2);
            Shape::Capsule {
                a: [-half, 0.0, 0.0],
                b: [half, 0.0, 0.0],
                radius: rng.random_range(0.06..0.12),
            }
        }
        _ => Shape::Cylinder {
            radius: rng.random_range(0.07..0.16),
            half_height: rng.random_range(0.08..0.2),
        },
    }
}

/// Random CSG shape: a union of two or three rigidly placed primitives,
/// sometimes with a small sphere carved out. Stays well inside the box.
pub fn random_shape<R: Rng + ?Sized>(rng: &mut R) -> Shape {
    let count = rng.random_range(2..=3);
    let parts: Vec<Shape> = (0..count)
        .map(|_| {
            let t = [0; 3].map(|_| rng.random_range(-0.18..0.18));
            let r = [0; 3].map(|_| rng.random_range(-1.2..1.2));
            random_primitive(rng).transformed(t, r)
        })
        .collect();
    let body = Shape::union(parts);
    if rng.random_bool(0.3) {
        let t = [0; 3].map(|_| rng.random_range(-0.2..0.2));
        Shape::Difference {
            base: std::boxed::Box::new(body),
            subtract: std::boxed::Box::new(Shape::sphere(rng.random_range(0.06..0.12)).translated(t)),
        }
    } else {
        body
    }
}
