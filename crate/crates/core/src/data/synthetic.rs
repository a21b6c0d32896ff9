//! Procedural shape families sampled uniformly by surface area.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Plane,
    Helix,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Torus,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Plane,
        ShapeFamily::Helix,
        ShapeFamily::Cross,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Torus => "torus",
            Self::Cylinder => "cylinder",
            Self::Cone => "cone",
            Self::Plane => "plane",
            Self::Helix => "helix",
            Self::Cross => "cross",
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family {s:?}")))
    }
}

impl std::fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: ShapeFamily,
    pub points_per_cloud: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 8 {
            return Err(Error::InvalidArgument(format!("points_per_cloud must be at least 8, got {}", self.points_per_cloud)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidArgument("jitter_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn unit(v: Point) -> Point {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Picks an index with probability proportional to `areas`.
fn pick(rng: &mut impl Rng, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

/// Surface point of an axis-aligned box with half extents `h`, plus normal.
fn box_point(rng: &mut impl Rng, h: Point) -> (Point, Point) {
    let areas = [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]];
    let face = pick(rng, &areas);
    let axis = face / 2;
    let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for (e, v) in p.iter_mut().enumerate() {
        *v = if e == axis { sign * h[e] } else { rng.random_range(-h[e]..h[e]) };
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    (p, n)
}

/// One surface sample with its analytic normal. `shape` holds the per-cloud
/// random proportions.
fn sample_surface(family: ShapeFamily, shape: f64, rng: &mut impl Rng) -> (Point, Point) {
    match family {
        ShapeFamily::Sphere => {
            let g: Point = [0; 3].map(|_| StandardNormal.sample(rng));
            let p = unit(g);
            (p, p)
        }
        ShapeFamily::Cube => box_point(rng, [1.0; 3]),
        ShapeFamily::Torus => {
            let (big, small) = (1.0, 0.25 + 0.15 * shape);
            // rejection on the area element (R + r cos v)
            loop {
                let u = rng.random_range(0.0..2.0 * PI);
                let v = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..big + small) <= big + small * v.cos() {
                    let n = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
                    let p = [(big + small * v.cos()) * u.cos(), (big + small * v.cos()) * u.sin(), small * v.sin()];
                    return (p, n);
                }
            }
        }
        ShapeFamily::Cylinder => {
            let h = 0.8 + 0.8 * shape;
            let part = pick(rng, &[2.0 * PI * 2.0 * h, PI, PI]);
            let a = rng.random_range(0.0..2.0 * PI);
            match part {
                0 => ([a.cos(), a.sin(), rng.random_range(-h..h)], [a.cos(), a.sin(), 0.0]),
                k => {
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    let z = if k == 1 { h } else { -h };
                    ([r * a.cos(), r * a.sin(), z], [0.0, 0.0, z.signum()])
                }
            }
        }
        ShapeFamily::Cone => {
            let h = 1.2 + 0.8 * shape;
            let slant = (1.0 + h * h).sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            if pick(rng, &[PI * slant, PI]) == 0 {
                // radius 1 at z = 0 shrinking to the apex at z = h
                let r = rng.random_range(0.0f64..1.0).sqrt();
                let n = unit([h * a.cos(), h * a.sin(), 1.0]);
                ([r * a.cos(), r * a.sin(), h * (1.0 - r)], n)
            } else {
                let r = rng.random_range(0.0f64..1.0).sqrt();
                ([r * a.cos(), r * a.sin(), 0.0], [0.0, 0.0, -1.0])
            }
        }
        ShapeFamily::Plane => {
            let w = 0.6 + 0.4 * shape;
            ([rng.random_range(-1.0..1.0), rng.random_range(-w..w), 0.0], [0.0, 0.0, 1.0])
        }
        ShapeFamily::Helix => {
            // thin tube around a helix of radius 1, pitch p, three turns
            let (turns, pitch, tube) = (3.0, 0.4 + 0.2 * shape, 0.12);
            let t = rng.random_range(0.0..turns * 2.0 * PI);
            let a = rng.random_range(0.0..2.0 * PI);
            let c = [t.cos(), t.sin(), pitch * t / (2.0 * PI)];
            let tangent = unit([-t.sin(), t.cos(), pitch / (2.0 * PI)]);
            let radial = [t.cos(), t.sin(), 0.0];
            let bin = [
                tangent[1] * radial[2] - tangent[2] * radial[1],
                tangent[2] * radial[0] - tangent[0] * radial[2],
                tangent[0] * radial[1] - tangent[1] * radial[0],
            ];
            let n = unit([0, 1, 2].map(|e| a.cos() * radial[e] + a.sin() * bin[e]));
            ([0, 1, 2].map(|e| c[e] + tube * n[e]), n)
        }
        ShapeFamily::Cross => {
            let w = 0.15 + 0.1 * shape;
            let arm = rng.random_range(0..3usize);
            let mut h = [w; 3];
            h[arm] = 1.0;
            box_point(rng, h)
        }
    }
}

fn cloud_rng(spec: &SyntheticSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((spec.family.index() as u64) << 40) ^ index as u64);
    rng
}

/// `count` clouds of one family. Pure in `(spec, count)`; each cloud gets
/// its own stream so cloud `i` does not depend on `count`.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    let jitter = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    (0..count)
        .map(|i| {
            let mut rng = cloud_rng(spec, i);
            let shape = rng.random_range(0.0..1.0);
            let mut coords = Vec::with_capacity(spec.points_per_cloud);
            let mut normals = Vec::with_capacity(spec.points_per_cloud);
            for _ in 0..spec.points_per_cloud {
                let (p, n) = sample_surface(spec.family, shape, &mut rng);
                let p = if spec.jitter_sigma > 0.0 { p.map(|v| v + jitter.sample(&mut rng)) } else { p };
                coords.push(p);
                normals.push(n);
            }
            PointCloud::with_attributes(coords, Some(normals), None)
        })
        .collect()
}

/// Labels each point by the sign of its x coordinate (part 1 for x > 0).
pub fn half_space_parts(cloud: &PointCloud) -> Result<PointCloud> {
    let parts = cloud.coords().iter().map(|p| usize::from(p[0] > 0.0)).collect();
    PointCloud::with_attributes(cloud.coords().to_vec(), cloud.normals().map(<[Point]>::to_vec), Some(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: ShapeFamily, jitter: f64) -> SyntheticSpec {
        SyntheticSpec { family, points_per_cloud: 300, jitter_sigma: jitter, seed: 11 }
    }

    #[test]
    fn sphere_points_have_unit_norm() {
        for c in generate_synthetic(&spec(ShapeFamily::Sphere, 0.0), 3).unwrap() {
            let norms: Vec<f64> = c.normalized().coords().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect();
            // recentering on the sample mean shifts norms slightly below 1
            assert!((norms.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
            assert!(norms.iter().all(|n| *n > 0.8));
            for p in c.coords() {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cube_points_lie_on_a_face() {
        for c in generate_synthetic(&spec(ShapeFamily::Cube, 0.0), 2).unwrap() {
            assert!(c.coords().iter().all(|p| p.iter().any(|v| v.abs() == 1.0)));
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let s = spec(ShapeFamily::Torus, 0.01);
        let a = generate_synthetic(&s, 3).unwrap();
        assert_eq!(a, generate_synthetic(&s, 3).unwrap());
        assert_eq!(a[..2], generate_synthetic(&s, 2).unwrap()[..]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn every_family_has_unit_normals() {
        for fam in ShapeFamily::ALL {
            let c = generate_synthetic(&spec(fam, 0.02), 1).unwrap();
            assert_eq!(c[0].len(), 300, "{fam}");
            assert_eq!(fam.name().parse::<ShapeFamily>().unwrap(), fam);
        }
        let bad = SyntheticSpec { points_per_cloud: 4, ..spec(ShapeFamily::Cube, 0.0) };
        assert!(generate_synthetic(&bad, 1).is_err());
    }
}
