//! Parametric primitives sampled uniformly by surface area.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::SplitMix64;

/// Shape category. Each one is also a reporting category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Cuboid,
    Cylinder,
    Torus,
    PlaneUnion,
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cuboid,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::PlaneUnion,
        ShapeKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cuboid => "cuboid",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::PlaneUnion => "plane-union",
            ShapeKind::Composite => "composite",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape category `{s}`")))
    }
}

/// One surface patch of a shape, centered at the origin of its own frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// radius in [0.3, 1.5]
    Sphere { radius: f64 },
    /// half extents each in [0.2, 1.0]
    Cuboid { half: [f64; 3] },
    /// radius in [0.2, 0.8], half height in [0.2, 1.0]; axis along z, capped
    Cylinder { radius: f64, half_height: f64 },
    /// major in [0.5, 1.0], minor in [0.1, 0.45 * major]; axis along z
    Torus { major: f64, minor: f64 },
    /// rectangle spanned by orthonormal `u`, `v`; half extents in [0.2, 1.0]
    Quad { u: Point, v: Point, half_u: f64, half_v: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius } => 4.0 * PI * radius * radius,
            Primitive::Cuboid { half: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, half_height } => {
                2.0 * PI * radius * 2.0 * half_height + 2.0 * PI * radius * radius
            }
            Primitive::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Primitive::Quad { half_u, half_v, .. } => 4.0 * half_u * half_v,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Sphere { radius } => (0.3..=1.5).contains(&radius),
            Primitive::Cuboid { half } => half.iter().all(|h| (0.2..=1.0).contains(h)),
            Primitive::Cylinder { radius, half_height } => {
                (0.2..=0.8).contains(&radius) && (0.2..=1.0).contains(&half_height)
            }
            Primitive::Torus { major, minor } => (0.5..=1.0).contains(&major) && (0.1..=0.45 * major).contains(&minor),
            Primitive::Quad { u, v, half_u, half_v } => {
                let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                let unit = |w: Point| ((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) - 1.0).abs() < 1e-9;
                unit(u) && unit(v) && dot.abs() < 1e-9 && (0.2..=1.0).contains(&half_u) && (0.2..=1.0).contains(&half_v)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("primitive parameters out of range: {self:?}")))
        }
    }

    fn sample(&self, rng: &mut SplitMix64) -> Point {
        match *self {
            Primitive::Sphere { radius } => {
                let d = rng.unit_vector();
                [d[0] * radius, d[1] * radius, d[2] * radius]
            }
            Primitive::Cuboid { half } => {
                let [a, b, c] = half;
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let f = pick_weighted(rng, &faces);
                let axis = f / 2;
                let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.uniform(-a, a), rng.uniform(-b, b), rng.uniform(-c, c)];
                p[axis] = sign * half[axis];
                p
            }
            Primitive::Cylinder { radius, half_height } => {
                let lateral = 2.0 * PI * radius * 2.0 * half_height;
                let cap = PI * radius * radius;
                match pick_weighted(rng, &[lateral, cap, cap]) {
                    0 => {
                        let t = rng.uniform(0.0, TAU);
                        [radius * t.cos(), radius * t.sin(), rng.uniform(-half_height, half_height)]
                    }
                    k => {
                        let rr = radius * rng.next_f64().sqrt();
                        let t = rng.uniform(0.0, TAU);
                        let z = if k == 1 { half_height } else { -half_height };
                        [rr * t.cos(), rr * t.sin(), z]
                    }
                }
            }
            Primitive::Torus { major, minor } => {
                // tube angle density is proportional to (major + minor cos theta)
                let theta = loop {
                    let t = rng.uniform(0.0, TAU);
                    if rng.next_f64() * (major + minor) <= major + minor * t.cos() {
                        break t;
                    }
                };
                let phi = rng.uniform(0.0, TAU);
                let ring = major + minor * theta.cos();
                [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]
            }
            Primitive::Quad { u, v, half_u, half_v } => {
                let (s, t) = (rng.uniform(-half_u, half_u), rng.uniform(-half_v, half_v));
                [s * u[0] + t * v[0], s * u[1] + t * v[1], s * u[2] + t * v[2]]
            }
        }
    }
}

fn pick_weighted(rng: &mut SplitMix64, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub primitive: Primitive,
    pub center: Point,
}

/// A shape: one or more primitive patches placed in a common frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub parts: Vec<Part>,
}

impl ShapeSpec {
    pub fn single(kind: ShapeKind, primitive: Primitive) -> Self {
        Self { kind, parts: vec![Part { primitive, center: [0.0; 3] }] }
    }

    pub fn category(&self) -> &'static str {
        self.kind.name()
    }

    /// Random parameters for `kind` within the documented ranges.
    pub fn random(kind: ShapeKind, rng: &mut SplitMix64) -> Self {
        match kind {
            ShapeKind::Sphere => Self::single(kind, random_solid(0, rng)),
            ShapeKind::Cuboid => Self::single(kind, random_solid(1, rng)),
            ShapeKind::Cylinder => Self::single(kind, random_solid(2, rng)),
            ShapeKind::Torus => Self::single(kind, random_solid(3, rng)),
            ShapeKind::PlaneUnion => {
                let count = 2 + rng.below(2) as usize;
                let mut axes = [0usize, 1, 2];
                rng.shuffle(&mut axes);
                let parts = axes[..count]
                    .iter()
                    .map(|&normal_axis| {
                        let (a, b) = ((normal_axis + 1) % 3, (normal_axis + 2) % 3);
                        let mut u = [0.0; 3];
                        let mut v = [0.0; 3];
                        u[a] = 1.0;
                        v[b] = 1.0;
                        let mut center = [0.0; 3];
                        center[normal_axis] = rng.uniform(-0.5, 0.5);
                        Part {
                            primitive: Primitive::Quad { u, v, half_u: rng.uniform(0.2, 1.0), half_v: rng.uniform(0.2, 1.0) },
                            center,
                        }
                    })
                    .collect();
                Self { kind, parts }
            }
            ShapeKind::Composite => {
                let a = random_solid(rng.below(4) as usize, rng);
                let b = random_solid(rng.below(4) as usize, rng);
                let dir = rng.unit_vector();
                let gap = rng.uniform(0.6, 1.2);
                Self {
                    kind,
                    parts: vec![
                        Part { primitive: a, center: [-dir[0] * gap / 2.0, -dir[1] * gap / 2.0, -dir[2] * gap / 2.0] },
                        Part { primitive: b, center: [dir[0] * gap / 2.0, dir[1] * gap / 2.0, dir[2] * gap / 2.0] },
                    ],
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::contract("shape has no parts"));
        }
        self.parts.iter().try_for_each(|p| p.primitive.validate())
    }

    /// Single centered primitives are point-symmetric, so samples are drawn in mirrored pairs.
    fn symmetric(&self) -> bool {
        self.parts.len() == 1 && self.parts[0].center == [0.0; 3] && !matches!(self.parts[0].primitive, Primitive::Quad { .. })
    }

    /// Area-uniform samples in the shape's own frame (not normalized).
    pub fn sample_surface(&self, n_points: usize, seed: u64) -> Result<Vec<Point>> {
        if n_points < 16 {
            return Err(Error::contract(format!("need at least 16 points, got {n_points}")));
        }
        self.validate()?;
        let mut rng = SplitMix64::new(seed);
        let areas: Vec<f64> = self.parts.iter().map(|p| p.primitive.area()).collect();
        let draw = |rng: &mut SplitMix64| {
            let part = &self.parts[pick_weighted(rng, &areas)];
            let p = part.primitive.sample(rng);
            [p[0] + part.center[0], p[1] + part.center[1], p[2] + part.center[2]]
        };
        let mut out = Vec::with_capacity(n_points);
        if self.symmetric() {
            while out.len() + 1 < n_points {
                let p = draw(&mut rng);
                out.push(p);
                out.push([-p[0], -p[1], -p[2]]);
            }
        }
        while out.len() < n_points {
            out.push(draw(&mut rng));
        }
        Ok(out)
    }
}

fn random_solid(which: usize, rng: &mut SplitMix64) -> Primitive {
    match which {
        0 => Primitive::Sphere { radius: rng.uniform(0.3, 1.5) },
        1 => Primitive::Cuboid { half: [rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)] },
        2 => Primitive::Cylinder { radius: rng.uniform(0.2, 0.8), half_height: rng.uniform(0.2, 1.0) },
        _ => {
            let major = rng.uniform(0.5, 1.0);
            Primitive::Torus { major, minor: rng.uniform(0.1, 0.45 * major) }
        }
    }
}

/// `n_points` area-uniform surface samples, normalized to the unit ball.
pub fn make_shape(spec: &ShapeSpec, n_points: usize, seed: u64) -> Result<PointCloud> {
    let pts = spec.sample_surface(n_points, seed)?;
    Ok(PointCloud::new(pts)?.normalize()?.0)
}
