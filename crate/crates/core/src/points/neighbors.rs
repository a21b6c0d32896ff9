use std::cmp::Ordering;

use super::cloud::{dist2, lex_cmp, Point};
use super::sampling::farthest_point_sample;
use crate::error::{Error, Result};

/// Row-major `M x k` table of neighbour indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Centroids chosen by FPS and their neighbourhoods at every scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleGrouping {
    pub centroid_indices: Vec<usize>,
    pub neighbors: Vec<NeighborTable>,
}

/// Candidate indices sorted nearest first. Zero-distance ties put `own`
/// (the query's own index, if any) first, then lexicographic coordinates,
/// then index.
fn sorted_candidates(coords: &[Point], query: &Point, own: Option<usize>, keep: usize) -> Vec<usize> {
    let d: Vec<f64> = coords.iter().map(|p| dist2(p, query)).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        d[*a]
            .total_cmp(&d[*b])
            .then_with(|| (Some(*b) == own).cmp(&(Some(*a) == own)))
            .then_with(|| lex_cmp(&coords[*a], &coords[*b]))
            .then_with(|| a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    let keep = keep.min(idx.len());
    if keep < idx.len() {
        idx.select_nth_unstable_by(keep, cmp);
        idx.truncate(keep);
    }
    idx.sort_by(cmp);
    idx
}

/// The `k` nearest points of each centroid, ascending by distance.
/// Rows shorter than `k` (tiny clouds) are padded with the nearest point.
pub fn knn_group(coords: &[Point], centroids: &[usize], k: usize) -> Result<NeighborTable> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("kNN over an empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("kNN needs k >= 1".into()));
    }
    if let Some(bad) = centroids.iter().find(|&&c| c >= coords.len()) {
        return Err(Error::InvalidArgument(format!("centroid index {bad} out of range")));
    }
    let mut indices = Vec::with_capacity(centroids.len() * k);
    for &c in centroids {
        let mut row = sorted_candidates(coords, &coords[c], Some(c), k);
        let nearest = row[0];
        row.resize(k, nearest);
        indices.extend(row);
    }
    Ok(NeighborTable { k, indices })
}

/// FPS followed by kNN grouping at each scale.
pub fn sample_and_group(coords: &[Point], m: usize, scales: &[usize]) -> Result<SampleGrouping> {
    let centroid_indices = farthest_point_sample(coords, m)?;
    let kmax = scales.iter().copied().max().ok_or_else(|| Error::InvalidArgument("no grouping scales".into()))?;
    let widest = knn_group(coords, &centroid_indices, kmax)?;
    // Sorted neighbour lists nest, so each smaller scale is a prefix.
    let neighbors = scales
        .iter()
        .map(|&k| NeighborTable {
            k,
            indices: (0..centroid_indices.len()).flat_map(|r| widest.row(r)[..k].iter().copied()).collect(),
        })
        .collect();
    Ok(SampleGrouping { centroid_indices, neighbors })
}

/// Neighbour coordinates of scale `t` expressed relative to their centroid,
/// flattened as `[M, K_t, 3]`.
pub fn group_local_frame(coords: &[Point], grouping: &SampleGrouping, t: usize) -> Result<Vec<f64>> {
    let table = grouping
        .neighbors
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("scale {t} out of range")))?;
    let mut out = Vec::with_capacity(table.indices.len() * 3);
    for (r, &c) in grouping.centroid_indices.iter().enumerate() {
        let center = coords.get(c).ok_or_else(|| Error::InvalidArgument(format!("centroid {c} out of range")))?;
        for &n in table.row(r) {
            let p = coords.get(n).ok_or_else(|| Error::InvalidArgument(format!("neighbour {n} out of range")))?;
            out.extend_from_slice(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        }
    }
    Ok(out)
}

/// Inverse-distance weights from each target to its nearest sources.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationWeights {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn interpolation_weights(targets: &[Point], sources: &[Point], k: usize) -> Result<InterpolationWeights> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("interpolation needs at least one source".into()));
    }
    let k = k.clamp(1, sources.len());
    let mut indices = Vec::with_capacity(targets.len() * k);
    let mut weights = Vec::with_capacity(targets.len() * k);
    for t in targets {
        let near = sorted_candidates(sources, t, None, k);
        let raw: Vec<f64> = near.iter().map(|&s| 1.0 / (dist2(t, &sources[s]).sqrt() + 1e-8)).collect();
        let z: f64 = raw.iter().sum();
        indices.extend(near);
        weights.extend(raw.iter().map(|w| w / z));
    }
    Ok(InterpolationWeights { k, indices, weights })
}

/// Inverse-distance-weighted mean of the nearest source features
/// (`source_feats` is `[M, d]`); returns `[targets, d]`.
pub fn interpolate_features(targets: &[Point], sources: &[Point], source_feats: &[f64], d: usize, k: usize) -> Result<Vec<f64>> {
    if source_feats.len() != sources.len() * d {
        return Err(Error::shape("interpolate_features", format!("{} feature values for {} sources of width {d}", source_feats.len(), sources.len())));
    }
    let w = interpolation_weights(targets, sources, k)?;
    let mut out = vec![0.0; targets.len() * d];
    for (slot, (&s, &wt)) in w.indices.iter().zip(&w.weights).enumerate() {
        let r = slot / w.k;
        for e in 0..d {
            out[r * d + e] += wt * source_feats[s * d + e];
        }
    }
    Ok(out)
}
