//! Margin loss, chamfer reconstruction loss and the reconstruction decoder.

use rand::Rng;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Dense, Forward, ParamStore};
use crate::tensor::{Graph, Var};

/// `sum_j T_j max(0, m+ - V_j)^2 + lambda (1 - T_j) max(0, V_j - m-)^2`.
pub fn margin_loss(g: &mut Graph<'_>, lengths: Var, label: usize, cfg: &LossConfig) -> Result<Var> {
    g.margin_loss(lengths, label, cfg.m_plus, cfg.m_minus, cfg.lambda)
}

/// Symmetric chamfer distance between a fixed `[N, 3]` target and `pred`.
pub fn chamfer(g: &mut Graph<'_>, target: &[f64], pred: Var) -> Result<Var> {
    if target.is_empty() || g.value(pred).is_empty() {
        return Err(Error::InvalidArgument("chamfer distance of an empty point set".into()));
    }
    g.chamfer(target, pred)
}

/// `L_cls + alpha * L_rec`. With `rec = None` the reconstruction term is absent.
pub fn total_loss(g: &mut Graph<'_>, margin: Var, rec: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match rec {
        Some(r) if cfg.alpha != 0.0 => {
            let w = g.scale(r, cfg.alpha);
            g.add(margin, w)
        }
        _ => Ok(margin),
    }
}

/// Four fully-connected layers from one digit capsule to `N x 3` points;
/// every layer but the last is followed by relu and batch normalization.
#[derive(Clone, Debug)]
pub struct ReconstructionDecoder {
    pub layers: Vec<Dense>,
    pub norms: Vec<BatchNorm>,
    pub points: usize,
}

impl ReconstructionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, widths: &[usize]) -> Result<Self> {
        if widths.len() != 4 {
            return Err(Error::Config(format!("decoder needs four layers, got {}", widths.len())));
        }
        if !widths[3].is_multiple_of(3) {
            return Err(Error::Config(format!("last decoder width {} is not a multiple of 3", widths[3])));
        }
        let mut layers = Vec::with_capacity(4);
        let mut norms = Vec::with_capacity(3);
        let mut width = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::new(store, rng, &format!("{name}.{i}"), width, w, true));
            if i < 3 {
                // single-row graphs: normalize with running statistics
                norms.push(BatchNorm::new(store, &format!("{name}.{i}.bn"), w, true));
            }
            width = w;
        }
        Ok(Self { layers, norms, points: widths[3] / 3 })
    }

    /// Decodes a `[1, d_digit]` capsule into `[N, 3]` points.
    pub fn forward(&self, f: &mut Forward<'_>, capsule: Var) -> Result<Var> {
        let mut x = capsule;
        for (i, dense) in self.layers.iter().enumerate() {
            x = dense.forward(f, x)?;
            if let Some(bn) = self.norms.get(i) {
                x = f.g.relu(x);
                x = bn.forward(f, x)?;
            }
        }
        f.g.reshape(x, vec![self.points, 3])
    }
}

/// Decodes a plain capsule vector outside of training.
pub fn reconstruct(params: &ParamStore, decoder: &ReconstructionDecoder, capsule: &[f64]) -> Result<Vec<f64>> {
    let mut f = Forward::new(params, false);
    let x = f.g.constant(vec![1, capsule.len()], capsule.to_vec())?;
    let y = decoder.forward(&mut f, x)?;
    Ok(f.g.value(y).to_vec())
}
