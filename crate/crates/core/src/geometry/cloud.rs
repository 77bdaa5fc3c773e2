use crate::autodiff::Array;
use crate::error::{ensure, Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Centroid and scale that map a normalized cloud back to its source frame:
/// `source = normalized * scale + centroid`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point) -> Point {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Ordered list of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    normalization: Option<Normalization>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        ensure!(!points.is_empty(), "point cloud must not be empty");
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::contract(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, normalization: None })
    }

    pub fn from_array(a: &Array) -> Result<Self> {
        ensure!(a.rank() == 2 && a.cols() == 3, "expected an n x 3 array, got {:?}", a.shape());
        Self::new(a.to_points())
    }

    pub fn to_array(&self) -> Array {
        Array::from_points(&self.points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect(), normalization: self.normalization }
    }

    pub fn translated(&self, t: Point) -> PointCloud {
        let points = self.points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        PointCloud { points, normalization: None }
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Centers the cloud on its centroid and scales its farthest point to norm 1.
    pub fn normalize(&self) -> Result<(PointCloud, Normalization)> {
        if self.points.len() < 2 {
            return Err(Error::Degenerate(format!("cannot normalize a cloud of {} point(s)", self.points.len())));
        }
        let centroid = self.centroid();
        let scale = self.points.iter().map(|p| dist2(p, &centroid)).fold(0.0, f64::max).sqrt();
        if !(scale > 0.0) {
            return Err(Error::Degenerate("all points are identical".into()));
        }
        let norm = Normalization { centroid, scale };
        let points = self.points.iter().map(|p| norm.apply(p)).collect();
        Ok((PointCloud { points, normalization: Some(norm) }, norm))
    }

    /// Maps a normalized cloud back through `norm`.
    pub fn denormalize(&self, norm: &Normalization) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| norm.invert(p)).collect(), normalization: None }
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points, normalization: self.normalization }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let (n, t) = c.normalize().unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(t.centroid, [1.0, 0.0, 0.0]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = SplitMix64::new(4);
        let pts: Vec<Point> = (0..50).map(|_| [rng.uniform(-3.0, 5.0), rng.next_f64(), rng.uniform(1.0, 2.0)]).collect();
        let (once, _) = PointCloud::new(pts).unwrap().normalize().unwrap();
        let (twice, _) = once.normalize().unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            assert!(dist2(a, b).sqrt() <= 1e-12);
        }
    }

    #[test]
    fn normalize_round_trip_and_invariants() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..20 {
            let pts: Vec<Point> =
                (0..40).map(|_| [rng.uniform(-10.0, 10.0), rng.uniform(0.0, 3.0), rng.uniform(5.0, 6.0)]).collect();
            let src = PointCloud::new(pts).unwrap();
            let (n, t) = src.normalize().unwrap();
            let c = n.centroid();
            assert!(norm(&c) <= 1e-9);
            let maxn = n.points().iter().map(norm).fold(0.0, f64::max);
            assert!((maxn - 1.0).abs() <= 1e-9);
            let back = n.denormalize(&t);
            for (a, b) in back.points().iter().zip(src.points()) {
                assert!(dist2(a, b).sqrt() <= 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_clouds_rejected() {
        let one = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(one.normalize(), Err(Error::Degenerate(_))));
        let same = PointCloud::new(vec![[1.0, 2.0, 3.0]; 5]).unwrap();
        assert!(matches!(same.normalize(), Err(Error::Degenerate(_))));
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
