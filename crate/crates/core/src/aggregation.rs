//! Multi-scale shuffling and feature/spatial soft-assignment clustering.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gaussian_tensor, uniform_tensor, Forward, ParamId, ParamStore};
use crate::points::Point;
use crate::tensor::{Graph, Tensor, Var};

/// Destination `(row, col)` of element `(t, c)` in the `rT x (C/r)` slab.
pub fn shuffle_position(t: usize, c: usize, channels: usize, r: usize) -> (usize, usize) {
    let w = channels / r;
    (t * r + c / w, c % w)
}

/// Source `(t, c)` of element `(row, col)` of the shuffled slab.
pub fn unshuffle_position(row: usize, col: usize, channels: usize, r: usize) -> (usize, usize) {
    let w = channels / r;
    (row / r, (row % r) * w + col)
}

fn check_ratio(channels: usize, r: usize) -> Result<()> {
    if r == 0 || !channels.is_multiple_of(r) {
        return Err(Error::InvalidArgument(format!("shuffle ratio {r} must divide feature width {channels}")));
    }
    Ok(())
}

/// Applies the shuffle index map to raw `[M, T, C]` values.
pub fn shuffle_values(data: &[f64], scales: usize, channels: usize, r: usize) -> Result<Vec<f64>> {
    check_ratio(channels, r)?;
    let slab = scales * channels;
    if slab == 0 || !data.len().is_multiple_of(slab) {
        return Err(Error::shape("multiscale_shuffle", format!("{} values for T={scales}, C={channels}", data.len())));
    }
    let w = channels / r;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(slab).zip(out.chunks_mut(slab)) {
        for t in 0..scales {
            for c in 0..channels {
                let (row, col) = shuffle_position(t, c, channels, r);
                dst[row * w + col] = src[t * channels + c];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`shuffle_values`].
pub fn unshuffle_values(data: &[f64], scales: usize, channels: usize, r: usize) -> Result<Vec<f64>> {
    check_ratio(channels, r)?;
    let slab = scales * channels;
    if slab == 0 || !data.len().is_multiple_of(slab) {
        return Err(Error::shape("multiscale_unshuffle", format!("{} values for T={scales}, C={channels}", data.len())));
    }
    let w = channels / r;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(slab).zip(out.chunks_mut(slab)) {
        for row in 0..scales * r {
            for col in 0..w {
                let (t, c) = unshuffle_position(row, col, channels, r);
                dst[t * channels + c] = src[row * w + col];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ShuffledFeatures {
    /// `[M * r * T, C / r]`
    pub features: Var,
    /// One coordinate per feature row.
    pub source_coords: Vec<Point>,
}

/// Rearranges `[M, T, C]` features into `M * rT` rows of width `C / r`.
///
/// The index map `(t, c) -> (t*r + c / (C/r), c mod (C/r))` coincides with a
/// row-major reshape, so the graph records a reshape.
pub fn multiscale_shuffle(g: &mut Graph<'_>, feats: Var, centroids: &[Point], r: usize) -> Result<ShuffledFeatures> {
    let s = g.shape(feats).to_vec();
    if s.len() != 3 || s[0] != centroids.len() {
        return Err(Error::shape("multiscale_shuffle", format!("features {s:?} for {} centroids", centroids.len())));
    }
    let (m, t, c) = (s[0], s[1], s[2]);
    check_ratio(c, r)?;
    let features = g.reshape(feats, vec![m * t * r, c / r])?;
    let source_coords = centroids.iter().flat_map(|p| std::iter::repeat_n(*p, t * r)).collect();
    Ok(ShuffledFeatures { features, source_coords })
}

/// Row-wise softmax of `rows * w + b`, with `w` stored `[D, Q]`.
pub fn soft_assign(g: &mut Graph<'_>, rows: Var, w: Var, b: Var) -> Result<Var> {
    let logits = g.linear(rows, w, Some(b))?;
    g.softmax(logits, 1)
}

/// `out[k] = sum_i assign[i,k] * (rows[i] - centers[k])`.
pub fn vlad_aggregate(g: &mut Graph<'_>, rows: Var, centers: Var, assign: Var) -> Result<Var> {
    g.vlad(rows, assign, centers)
}

/// Learnable cluster centers and soft-assignment parameters for features
/// and for coordinates. Assignment weights are stored transposed (`[D, Q]`).
#[derive(Clone, Debug)]
pub struct ClusterBank {
    pub clusters: usize,
    pub width: usize,
    pub feature_centers: ParamId,
    pub coord_centers: ParamId,
    pub assign_weights: ParamId,
    pub assign_biases: ParamId,
    pub coord_assign_weights: ParamId,
    pub coord_assign_biases: ParamId,
}

impl ClusterBank {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, clusters: usize, width: usize) -> Result<Self> {
        if clusters == 0 || width == 0 {
            return Err(Error::Config(format!("cluster bank needs Q >= 1 and width >= 1, got {clusters} x {width}")));
        }
        let feature_centers = store.add(format!("{name}.feature_centers"), gaussian_tensor(rng, vec![clusters, width], 0.1));
        let coord_centers = store.add(format!("{name}.coord_centers"), gaussian_tensor(rng, vec![clusters, 3], 0.1));
        let fan = 1.0 / (width as f64).sqrt();
        let assign_weights = store.add(format!("{name}.assign_weights"), uniform_tensor(rng, vec![width, clusters], fan));
        let assign_biases = store.add(format!("{name}.assign_biases"), Tensor::zeros(vec![clusters]));
        let fan3 = 1.0 / 3f64.sqrt();
        let coord_assign_weights = store.add(format!("{name}.coord_assign_weights"), uniform_tensor(rng, vec![3, clusters], fan3));
        let coord_assign_biases = store.add(format!("{name}.coord_assign_biases"), Tensor::zeros(vec![clusters]));
        Ok(Self { clusters, width, feature_centers, coord_centers, assign_weights, assign_biases, coord_assign_weights, coord_assign_biases })
    }

    /// `[Q, D]` residual sums of feature rows.
    pub fn feature_embed(&self, f: &mut Forward<'_>, rows: Var) -> Result<Var> {
        let (w, b, q) = (f.param(self.assign_weights), f.param(self.assign_biases), f.param(self.feature_centers));
        let a = soft_assign(&mut f.g, rows, w, b)?;
        vlad_aggregate(&mut f.g, rows, q, a)
    }

    /// `[Q, 3]` residual sums of the per-row source coordinates.
    pub fn spatial_embed(&self, f: &mut Forward<'_>, coords: &[Point]) -> Result<Var> {
        let flat = coords.iter().flat_map(|p| p.iter().copied()).collect();
        let x = f.g.constant(vec![coords.len(), 3], flat)?;
        let (w, b, y) = (f.param(self.coord_assign_weights), f.param(self.coord_assign_biases), f.param(self.coord_centers));
        let a = soft_assign(&mut f.g, x, w, b)?;
        vlad_aggregate(&mut f.g, x, y, a)
    }

    pub fn forward(&self, f: &mut Forward<'_>, shuffled: &ShuffledFeatures) -> Result<FeatureSpatialEmbeddings> {
        let feat = self.feature_embed(f, shuffled.features)?;
        let spat = self.spatial_embed(f, &shuffled.source_coords)?;
        fuse_feature_spatial(&mut f.g, feat, spat)
    }
}

/// Per-cluster feature and spatial embeddings, each row L2-normalized.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSpatialEmbeddings {
    /// `[Q, D]`
    pub feature: Var,
    /// `[Q, 3]`
    pub spatial: Var,
}

impl FeatureSpatialEmbeddings {
    /// `[Q, D + 3]` rows `[C(q_k) : C(y_k)]`.
    pub fn fused(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.concat(&[self.feature, self.spatial], 1)
    }
}

pub fn fuse_feature_spatial(g: &mut Graph<'_>, feat_emb: Var, spat_emb: Var) -> Result<FeatureSpatialEmbeddings> {
    let (sf, ss) = (g.shape(feat_emb), g.shape(spat_emb));
    if sf.len() != 2 || ss.len() != 2 || sf[0] != ss[0] || ss[1] != 3 {
        return Err(Error::shape("fuse_feature_spatial", format!("feature {sf:?} with spatial {ss:?}")));
    }
    let feature = g.normalize_rows(feat_emb)?;
    let spatial = g.normalize_rows(spat_emb)?;
    Ok(FeatureSpatialEmbeddings { feature, spatial })
}
