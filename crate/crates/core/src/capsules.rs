//! Spatial-aware primary capsules and dynamic routing.

use rand::Rng;

use crate::aggregation::FeatureSpatialEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{uniform_tensor, Dense, Forward, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Squashing on a plain vector. Zero maps to zero.
pub fn squash_vec(x: &[f64]) -> Vec<f64> {
    let n2: f64 = x.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return vec![0.0; x.len()];
    }
    let f = n2.sqrt() / (1.0 + n2);
    x.iter().map(|v| v * f).collect()
}

/// Squashes every row along the last axis.
pub fn squash(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    g.squash(x)
}

/// Shared projection from `[chunk : spatial]` rows to capsule vectors.
#[derive(Clone, Debug)]
pub struct PrimaryCapsuleLayer {
    pub chunks: usize,
    pub capsule_dim: usize,
    pub proj: Dense,
}

impl PrimaryCapsuleLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, feature_width: usize, chunks: usize, capsule_dim: usize) -> Result<Self> {
        if chunks == 0 || !feature_width.is_multiple_of(chunks) {
            return Err(Error::Config(format!("{chunks} chunks do not divide embedding width {feature_width}")));
        }
        let proj = Dense::new(store, rng, &format!("{name}.proj"), feature_width / chunks + 3, capsule_dim, false);
        Ok(Self { chunks, capsule_dim, proj })
    }

    /// `[Q * s, d_cap]` squashed capsules.
    pub fn forward(&self, f: &mut Forward<'_>, embs: &FeatureSpatialEmbeddings) -> Result<Var> {
        rearrange_split(f, embs, self)
    }
}

/// Splits each cluster's feature embedding into `s` chunks, appends the
/// cluster's spatial embedding to every chunk, projects and squashes.
pub fn rearrange_split(f: &mut Forward<'_>, embs: &FeatureSpatialEmbeddings, layer: &PrimaryCapsuleLayer) -> Result<Var> {
    let s = layer.chunks;
    let sf = f.g.shape(embs.feature).to_vec();
    if sf.len() != 2 || !sf[1].is_multiple_of(s) {
        return Err(Error::shape("rearrange_split", format!("{s} chunks for feature embeddings {sf:?}")));
    }
    let (q, d) = (sf[0], sf[1]);
    if d / s + 3 != layer.proj.inputs {
        return Err(Error::shape("rearrange_split", format!("chunk width {} + 3 against projection input {}", d / s, layer.proj.inputs)));
    }
    let chunks = f.g.reshape(embs.feature, vec![q * s, d / s])?;
    let idx: Vec<usize> = (0..q).flat_map(|k| std::iter::repeat_n(k, s)).collect();
    let spatial = f.g.gather_rows(embs.spatial, &idx)?;
    let rows = f.g.concat(&[chunks, spatial], 1)?;
    let u = layer.proj.forward(f, rows)?;
    f.g.squash(u)
}

/// Transforms `W_ij` (`[I, J, d_cap, d_digit]`) and log priors `b_ij` (`[I, J]`).
#[derive(Clone, Debug)]
pub struct RoutingState {
    pub inputs: usize,
    pub outputs: usize,
    pub w: ParamId,
    pub log_priors: ParamId,
}

impl RoutingState {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, outputs: usize, d_cap: usize, d_digit: usize) -> Self {
        let bound = 1.0 / (d_cap as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(rng, vec![inputs, outputs, d_cap, d_digit], bound));
        let log_priors = store.add(format!("{name}.log_priors"), Tensor::zeros(vec![inputs, outputs]));
        Self { inputs, outputs, w, log_priors }
    }
}

#[derive(Clone, Debug)]
pub struct RoutingTrace {
    /// Digit capsules after the final iteration, `[J, d_digit]`.
    pub v: Var,
    /// Digit capsules after each iteration.
    pub per_iteration: Vec<Var>,
    /// Coupling coefficients used in each iteration, `[I, J]`.
    pub couplings: Vec<Var>,
}

/// Routing by agreement on graph values: `u` is `[I, d_cap]`, `w` is
/// `[I, J, d_cap, d_digit]`, `b` is `[I, J]`. The log-prior update is local
/// to this call.
pub fn dynamic_routing(g: &mut Graph<'_>, u: Var, w: Var, b: Var, iters: usize) -> Result<RoutingTrace> {
    if iters == 0 {
        return Err(Error::InvalidArgument("dynamic routing needs at least one iteration".into()));
    }
    let uhat = g.capsule_predict(u, w)?;
    let (su, sb) = (g.shape(uhat).to_vec(), g.shape(b).to_vec());
    if sb != su[..2] {
        return Err(Error::shape("dynamic_routing", format!("log priors {sb:?} for predictions {su:?}")));
    }
    let mut logits = b;
    let mut per_iteration = Vec::with_capacity(iters);
    let mut couplings = Vec::with_capacity(iters);
    for it in 0..iters {
        let c = g.softmax(logits, 1)?;
        let s = g.coupling_sum(c, uhat)?;
        let v = g.squash(s)?;
        couplings.push(c);
        per_iteration.push(v);
        if it + 1 < iters {
            let agree = g.agreement(uhat, v)?;
            logits = g.add(logits, agree)?;
        }
    }
    let v = *per_iteration.last().expect("iters >= 1");
    Ok(RoutingTrace { v, per_iteration, couplings })
}

/// Euclidean length of each digit capsule, `[J]`.
pub fn capsule_lengths(g: &mut Graph<'_>, v: Var) -> Result<Var> {
    g.l2norm(v, 1)
}
