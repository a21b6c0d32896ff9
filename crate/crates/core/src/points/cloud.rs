use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A point set with optional per-point normals and part labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
    normals: Option<Vec<Point>>,
    part_labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        Self::with_attributes(coords, None, None)
    }

    pub fn with_attributes(coords: Vec<Point>, normals: Option<Vec<Point>>, part_labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("point cloud must contain at least one point".into()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        if let Some(ns) = &normals {
            if ns.len() != coords.len() {
                return Err(Error::InvalidArgument(format!("{} normals for {} points", ns.len(), coords.len())));
            }
            for (i, n) in ns.iter().enumerate() {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if !len.is_finite() || (len - 1.0).abs() > 1e-4 {
                    return Err(Error::InvalidArgument(format!("normal {i} has length {len}, expected unit length")));
                }
            }
        }
        if let Some(ls) = &part_labels {
            if ls.len() != coords.len() {
                return Err(Error::InvalidArgument(format!("{} part labels for {} points", ls.len(), coords.len())));
            }
        }
        Ok(Self { coords, normals, part_labels })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn normals(&self) -> Option<&[Point]> {
        self.normals.as_deref()
    }

    pub fn part_labels(&self) -> Option<&[usize]> {
        self.part_labels.as_deref()
    }

    pub fn centroid(&self) -> Point {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for e in 0..3 {
                c[e] += p[e];
            }
        }
        c.map(|v| v / n)
    }

    /// Reorders or repeats points by index, carrying attributes along.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {} points", self.len())));
        }
        let pick = |v: &[Point]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::with_attributes(
            pick(&self.coords),
            self.normals.as_deref().map(pick),
            self.part_labels.as_ref().map(|ls| idx.iter().map(|&i| ls[i]).collect()),
        )
    }

    /// Flattened `[N, 3]` coordinates.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// Centers at the origin and scales the farthest point to unit norm.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let centered: Vec<Point> = self.coords.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
        let r = centered.iter().map(norm).fold(0.0, f64::max);
        let coords = if r > 0.0 { centered.iter().map(|p| p.map(|v| v / r)).collect() } else { centered };
        Self { coords, normals: self.normals.clone(), part_labels: self.part_labels.clone() }
    }
}

pub(crate) fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Lexicographic (x, y, z) comparison used to break distance ties.
pub(crate) fn lex_cmp(a: &Point, b: &Point) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}
