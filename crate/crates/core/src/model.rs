//! The assembled network: backbone, aggregation, capsules and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{multiscale_shuffle, ClusterBank};
use crate::backbone::{Backbone, BackboneOutput, CloudGroupings};
use crate::capsules::{capsule_lengths, dynamic_routing, PrimaryCapsuleLayer, RoutingState, RoutingTrace};
use crate::config::{BatchNormEval, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{classify, part_predictions, SegmentationHead, SegmentationInputs};
use crate::losses::{chamfer, margin_loss, total_loss, ReconstructionDecoder};
use crate::nn::{Dense, Forward, ParamGrads, ParamId, ParamStore};
use crate::points::{interpolation_weights, InterpolationWeights, Point, PointCloud};
use crate::tensor::{BatchStats, Var};

/// RNG stream ids; each purpose draws from its own stream of the seed.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Coordinate-only precomputation for one cloud.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub groupings: CloudGroupings,
    /// Layer-2 centroids to layer-1 centroids, and layer-1 centroids to points.
    pub interpolation: Option<(InterpolationWeights, InterpolationWeights)>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    /// Rows fed to the cluster bank, `[M2 * rows_per_centroid, D]`.
    pub rows: Var,
    pub rows_per_centroid: usize,
    /// `[J]` class scores: capsule lengths, or sigmoid outputs without capsules.
    pub lengths: Var,
    /// `[J, d_digit]`
    pub digits: Option<Var>,
    pub routing: Option<RoutingTrace>,
}

/// Which digit capsule feeds the decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapsuleChoice {
    Label(usize),
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub loss: f64,
    pub margin: f64,
    pub reconstruction: Option<f64>,
    pub segmentation: Option<f64>,
    pub predicted: usize,
}

/// Everything one training sample contributes to a batch.
#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub grads: ParamGrads,
    pub bn_stats: Vec<(ParamId, BatchStats)>,
    pub report: SampleReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub lengths: Vec<f64>,
    pub class: usize,
    pub digits: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub bank: Option<ClusterBank>,
    pub primary: Option<PrimaryCapsuleLayer>,
    pub routing: Option<RoutingState>,
    pub classifier: Option<(Dense, Dense)>,
    pub decoder: Option<ReconstructionDecoder>,
    pub segmentation: Option<SegmentationHead>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let flags = config.ablation;
        if flags.no_caps && config.segmentation.is_some() {
            return Err(Error::Config("the segmentation head needs digit capsules; it cannot be combined with no_caps".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let backbone = Backbone::new(&mut params, &mut rng, &config.backbone, config.use_normals)?;
        let width = config.shuffled_width();
        let j = config.num_classes;

        let bank = if flags.no_vlad { None } else { Some(ClusterBank::new(&mut params, &mut rng, "cluster", config.clusters, width)?) };
        let (primary, routing, classifier) = if flags.no_caps {
            let fused = config.clusters * (width + 3);
            let hidden = Dense::new(&mut params, &mut rng, "fc.0", fused, config.fc_hidden, true);
            let out = Dense::new(&mut params, &mut rng, "fc.1", config.fc_hidden, j, true);
            (None, None, Some((hidden, out)))
        } else {
            let primary = if flags.no_vlad {
                None
            } else {
                Some(PrimaryCapsuleLayer::new(&mut params, &mut rng, "primary", width, config.capsule_split, config.capsule_dim)?)
            };
            let routing = RoutingState::new(&mut params, &mut rng, "routing", config.primary_capsules(), j, config.capsule_dim, config.digit_dim);
            (primary, Some(routing), None)
        };
        let decoder = if flags.no_caps {
            None
        } else {
            Some(ReconstructionDecoder::new(&mut params, &mut rng, "decoder", config.digit_dim, &config.decoder_widths)?)
        };
        let segmentation = config.segmentation.as_ref().map(|s| {
            let c1 = config.backbone[0].output_width();
            SegmentationHead::new(&mut params, &mut rng, s, width, config.digit_dim, c1)
        });
        Ok(Self { config, params, backbone, bank, primary, routing, classifier, decoder, segmentation })
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedCloud> {
        let groupings = self.backbone.group(cloud.coords())?;
        let interpolation = if self.segmentation.is_some() {
            let c1 = &groupings.centroids1;
            let c2: Vec<Point> = groupings.layer2.centroid_indices.iter().map(|&i| c1[i]).collect();
            Some((interpolation_weights(c1, &c2, 3)?, interpolation_weights(cloud.coords(), c1, 3)?))
        } else {
            None
        };
        Ok(PreparedCloud { cloud: cloud.clone(), groupings, interpolation, target: cloud.flat_coords() })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: &PreparedCloud) -> Result<ModelOutput> {
        let cfg = &self.config;
        let backbone = self.backbone.forward_grouped(f, &x.cloud, &x.groupings)?;
        let feats = backbone.layer2.features;
        let shape = f.g.shape(feats).to_vec();
        let (m, t, c) = (shape[0], shape[1], shape[2]);
        let r = cfg.effective_ratio();
        let shuffled = multiscale_shuffle(&mut f.g, feats, &backbone.layer2.centroids, r)?;

        let (lengths, digits, routing) = if let Some((hidden, out)) = &self.classifier {
            let bank = self.bank.as_ref().expect("no_caps keeps the cluster bank");
            let emb = bank.forward(f, &shuffled)?;
            let fused = emb.fused(&mut f.g)?;
            let n = f.g.value(fused).len();
            let flat = f.g.reshape(fused, vec![1, n])?;
            let h = hidden.forward(f, flat)?;
            let h = f.g.relu(h);
            let logits = out.forward(f, h)?;
            let s = f.g.sigmoid(logits);
            (f.g.reshape(s, vec![cfg.num_classes])?, None, None)
        } else {
            let u = match (&self.bank, &self.primary) {
                (Some(bank), Some(primary)) => {
                    let emb = bank.forward(f, &shuffled)?;
                    primary.forward(f, &emb)?
                }
                _ => {
                    let rows = f.g.reshape(feats, vec![m * t * c / cfg.capsule_dim, cfg.capsule_dim])?;
                    f.g.squash(rows)?
                }
            };
            let state = self.routing.as_ref().expect("capsule model has routing");
            let (w, b) = (f.param(state.w), f.param(state.log_priors));
            let trace = dynamic_routing(&mut f.g, u, w, b, cfg.routing_iters)?;
            let lengths = capsule_lengths(&mut f.g, trace.v)?;
            (lengths, Some(trace.v), Some(trace))
        };
        Ok(ModelOutput { backbone, rows: shuffled.features, rows_per_centroid: t * r, lengths, digits, routing })
    }

    fn select_capsule(&self, f: &mut Forward<'_>, out: &ModelOutput, choice: CapsuleChoice) -> Result<Option<Var>> {
        let Some(v) = out.digits else { return Ok(None) };
        let j = match choice {
            CapsuleChoice::Label(l) => l,
            CapsuleChoice::Predicted => classify(f.g.value(out.lengths)),
        };
        if j >= self.config.num_classes {
            return Err(Error::InvalidArgument(format!("label {j} out of range for {} classes", self.config.num_classes)));
        }
        Ok(Some(f.g.gather_rows(v, &[j])?))
    }

    fn segment_logits(&self, f: &mut Forward<'_>, x: &PreparedCloud, out: &ModelOutput, capsule: Var) -> Result<Var> {
        let head = self.segmentation.as_ref().ok_or_else(|| Error::Config("model has no segmentation head".into()))?;
        let (to_layer1, to_points) = x.interpolation.as_ref().ok_or_else(|| Error::InvalidArgument("cloud was prepared without interpolation weights".into()))?;
        let inputs = SegmentationInputs {
            rows: out.rows,
            rows_per_centroid: out.rows_per_centroid,
            capsule,
            layer1: out.backbone.layer1_pooled,
            to_layer1,
            to_points,
            coords: x.cloud.coords(),
        };
        head.forward(f, &inputs)
    }

    /// Builds the training loss of one sample inside `f`.
    pub fn loss(&self, f: &mut Forward<'_>, x: &PreparedCloud, label: usize) -> Result<(Var, SampleReport)> {
        let cfg = &self.config;
        let out = self.forward(f, x)?;
        let margin = margin_loss(&mut f.g, out.lengths, label, &cfg.loss)?;
        let predicted = classify(f.g.value(out.lengths));
        let capsule = self.select_capsule(f, &out, CapsuleChoice::Label(label))?;

        let rec = match (&self.decoder, capsule) {
            (Some(dec), Some(cap)) if cfg.loss.alpha > 0.0 => {
                let pts = dec.forward(f, cap)?;
                Some(chamfer(&mut f.g, &x.target, pts)?)
            }
            _ => None,
        };
        let mut total = total_loss(&mut f.g, margin, rec, &cfg.loss)?;

        let mut seg = None;
        if let (Some(seg_cfg), Some(cap)) = (&cfg.segmentation, capsule) {
            let parts = x.cloud.part_labels().ok_or_else(|| Error::InvalidArgument("segmentation training needs part labels".into()))?;
            let logits = self.segment_logits(f, x, &out, cap)?;
            let ce = f.g.cross_entropy(logits, parts)?;
            seg = Some(f.g.scalar_value(ce));
            let weighted = f.g.scale(ce, seg_cfg.weight);
            total = f.g.add(total, weighted)?;
        }

        let report = SampleReport {
            loss: f.g.scalar_value(total),
            margin: f.g.scalar_value(margin),
            reconstruction: rec.map(|r| f.g.scalar_value(r)),
            segmentation: seg,
            predicted,
        };
        if !report.loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {} (margin {}, reconstruction {:?})", report.loss, report.margin, report.reconstruction)));
        }
        Ok((total, report))
    }

    /// Forward and backward of one sample in training mode.
    pub fn sample_gradients(&self, x: &PreparedCloud, label: usize) -> Result<SampleGradients> {
        let mut f = Forward::new(&self.params, true);
        let (loss, report) = self.loss(&mut f, x, label)?;
        let grads = f.param_grads(loss)?;
        Ok(SampleGradients { grads, bn_stats: f.take_bn_stats(), report })
    }

    /// An evaluation-mode pass honouring the configured batch-norm statistics.
    pub fn eval_forward(&self) -> Forward<'_> {
        Forward::new(&self.params, false).with_eval_batch_stats(self.config.batch_norm_eval == BatchNormEval::PerCloud)
    }

    pub fn predict_prepared(&self, x: &PreparedCloud) -> Result<Prediction> {
        let mut f = self.eval_forward();
        let out = self.forward(&mut f, x)?;
        let lengths = f.g.value(out.lengths).to_vec();
        Ok(Prediction { class: classify(&lengths), digits: out.digits.map(|v| f.g.value(v).to_vec()), lengths })
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<Prediction> {
        self.predict_prepared(&self.prepare(cloud)?)
    }

    /// `[N, P]` part logits in evaluation mode.
    pub fn segment(&self, x: &PreparedCloud, choice: CapsuleChoice) -> Result<Vec<f64>> {
        let mut f = self.eval_forward();
        let out = self.forward(&mut f, x)?;
        let cap = self.select_capsule(&mut f, &out, choice)?.ok_or_else(|| Error::Config("segmentation needs digit capsules".into()))?;
        let logits = self.segment_logits(&mut f, x, &out, cap)?;
        Ok(f.g.value(logits).to_vec())
    }

    pub fn segment_parts(&self, x: &PreparedCloud, choice: CapsuleChoice) -> Result<Vec<usize>> {
        let parts = self.segmentation.as_ref().map(|s| s.parts).unwrap_or(1);
        Ok(part_predictions(&self.segment(x, choice)?, parts))
    }

    /// Decoded `[N, 3]` points from the longest (or a given) digit capsule.
    pub fn reconstruct(&self, x: &PreparedCloud, choice: CapsuleChoice) -> Result<Vec<f64>> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::Config("model has no reconstruction decoder".into()))?;
        let mut f = self.eval_forward();
        let out = self.forward(&mut f, x)?;
        let cap = self.select_capsule(&mut f, &out, choice)?.ok_or_else(|| Error::Config("reconstruction needs digit capsules".into()))?;
        let pts = dec.forward(&mut f, cap)?;
        Ok(f.g.value(pts).to_vec())
    }

    /// Central differences of the training loss against the tape gradient
    /// at `probes` coordinates of every trainable tensor. Returns the worst
    /// `|analytic - numeric| / max(1, |analytic|)` and where it occurred.
    pub fn gradient_check(&self, x: &PreparedCloud, label: usize, probes: usize, eps: f64) -> Result<(f64, String)> {
        let analytic = self.sample_gradients(x, label)?.grads;
        let loss_at = |m: &Model| -> Result<f64> {
            let mut f = Forward::new(&m.params, true);
            Ok(m.loss(&mut f, x, label)?.1.loss)
        };
        let mut worst = (0.0, String::new());
        for id in self.params.ids() {
            let entry = &self.params.entries()[id.index()];
            if !entry.trainable {
                continue;
            }
            let n = entry.tensor.len();
            for p in 0..probes.min(n) {
                let c = (p * 7919 + id.index() * 31) % n;
                let mut shifted = self.clone();
                shifted.params.get_mut(id).data_mut()[c] += eps;
                let plus = loss_at(&shifted)?;
                shifted.params.get_mut(id).data_mut()[c] -= 2.0 * eps;
                let minus = loss_at(&shifted)?;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic.get(id).map(|g| g[c]).unwrap_or(0.0);
                let err = (a - numeric).abs() / a.abs().max(1.0);
                if err > worst.0 {
                    worst = (err, format!("{}[{c}]", entry.name));
                }
            }
        }
        Ok(worst)
    }
}
