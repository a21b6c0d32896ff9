//! Multi-scale local feature extraction.

use rand::Rng;

use crate::config::ExtractionLayerConfig;
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore, SharedMlp};
use crate::points::{group_local_frame, sample_and_group, Point, PointCloud, SampleGrouping};
use crate::tensor::Var;

/// Output of one extraction layer.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub centroids: Vec<Point>,
    /// `[M, T, C]`
    pub features: Var,
}

impl MultiScaleFeatures {
    pub fn m(&self) -> usize {
        self.centroids.len()
    }
}

/// One layer: per-scale shared MLPs followed by max-pooling over neighbours.
#[derive(Clone, Debug)]
pub struct ExtractionLayer {
    pub cfg: ExtractionLayerConfig,
    pub in_channels: usize,
    pub mlps: Vec<SharedMlp>,
}

impl ExtractionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ExtractionLayerConfig, in_channels: usize) -> Self {
        let mlps = (0..cfg.scales.len())
            .map(|t| SharedMlp::new(store, rng, &format!("{name}.scale{t}"), in_channels, &cfg.mlp_units))
            .collect();
        Self { cfg: cfg.clone(), in_channels, mlps }
    }

    pub fn output_width(&self) -> usize {
        self.cfg.output_width()
    }

    /// Samples centroids from `coords` and extracts features. `feats` is an
    /// optional `[N, d]` per-point feature matrix appended to the re-centered
    /// neighbour coordinates.
    pub fn forward(&self, f: &mut Forward<'_>, coords: &[Point], feats: Option<Var>) -> Result<MultiScaleFeatures> {
        if self.cfg.m > coords.len() {
            return Err(Error::InvalidArgument(format!("layer samples {} centroids from {} points", self.cfg.m, coords.len())));
        }
        let grouping = sample_and_group(coords, self.cfg.m, &self.cfg.scales)?;
        self.forward_grouped(f, coords, feats, &grouping)
    }

    /// Same as [`forward`](Self::forward) with a precomputed grouping.
    pub fn forward_grouped(&self, f: &mut Forward<'_>, coords: &[Point], feats: Option<Var>, grouping: &SampleGrouping) -> Result<MultiScaleFeatures> {
        let extra = match feats {
            Some(v) => {
                let s = f.g.shape(v);
                if s.len() != 2 || s[0] != coords.len() {
                    return Err(Error::shape("extract_layer", format!("features {s:?} for {} points", coords.len())));
                }
                s[1]
            }
            None => 0,
        };
        if extra + 3 != self.in_channels {
            return Err(Error::shape("extract_layer", format!("input width {} but layer expects {}", extra + 3, self.in_channels)));
        }
        if grouping.neighbors.len() != self.mlps.len() {
            return Err(Error::shape("extract_layer", format!("{} scales grouped for {} MLPs", grouping.neighbors.len(), self.mlps.len())));
        }
        let m = grouping.centroid_indices.len();
        let c = self.output_width();
        let mut per_scale = Vec::with_capacity(self.mlps.len());
        for (t, mlp) in self.mlps.iter().enumerate() {
            let table = &grouping.neighbors[t];
            let k = table.k;
            let local = group_local_frame(coords, grouping, t)?;
            let mut rows = f.g.constant(vec![m * k, 3], local)?;
            if let Some(v) = feats {
                let gathered = f.g.gather_rows(v, &table.indices)?;
                rows = f.g.concat(&[rows, gathered], 1)?;
            }
            let h = mlp.forward(f, rows)?;
            let h = f.g.reshape(h, vec![m, k, c])?;
            let pooled = f.g.max(h, 1)?;
            per_scale.push(f.g.reshape(pooled, vec![m, 1, c])?);
        }
        let features = f.g.concat(&per_scale, 1)?;
        let centroids = grouping.centroid_indices.iter().map(|&i| coords[i]).collect();
        Ok(MultiScaleFeatures { centroids, features })
    }
}

#[derive(Clone, Debug)]
pub struct CloudGroupings {
    pub layer1: SampleGrouping,
    pub layer2: SampleGrouping,
    pub centroids1: Vec<Point>,
}

/// Both extraction layers plus what the segmentation decoder needs.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub layer1: MultiScaleFeatures,
    /// Layer-1 features reduced over scales, `[M1, C1]`.
    pub layer1_pooled: Var,
    pub layer2: MultiScaleFeatures,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: [ExtractionLayer; 2],
    pub use_normals: bool,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfgs: &[ExtractionLayerConfig], use_normals: bool) -> Result<Self> {
        let [c1, c2] = cfgs else {
            return Err(Error::Config(format!("backbone needs two layers, got {}", cfgs.len())));
        };
        let l1 = ExtractionLayer::new(store, rng, "backbone.0", c1, if use_normals { 6 } else { 3 });
        let l2 = ExtractionLayer::new(store, rng, "backbone.1", c2, c1.output_width() + 3);
        Ok(Self { layers: [l1, l2], use_normals })
    }

    /// Sampling and grouping for both layers; depends on coordinates only.
    pub fn group(&self, coords: &[Point]) -> Result<CloudGroupings> {
        let [l1, l2] = &self.layers;
        if l1.cfg.m > coords.len() {
            return Err(Error::InvalidArgument(format!("first layer samples {} centroids from {} points", l1.cfg.m, coords.len())));
        }
        let layer1 = sample_and_group(coords, l1.cfg.m, &l1.cfg.scales)?;
        let centroids1: Vec<Point> = layer1.centroid_indices.iter().map(|&i| coords[i]).collect();
        let layer2 = sample_and_group(&centroids1, l2.cfg.m, &l2.cfg.scales)?;
        Ok(CloudGroupings { layer1, layer2, centroids1 })
    }

    pub fn forward(&self, f: &mut Forward<'_>, cloud: &PointCloud) -> Result<BackboneOutput> {
        let groupings = self.group(cloud.coords())?;
        self.forward_grouped(f, cloud, &groupings)
    }

    pub fn forward_grouped(&self, f: &mut Forward<'_>, cloud: &PointCloud, groupings: &CloudGroupings) -> Result<BackboneOutput> {
        let feats = if self.use_normals {
            let normals = cloud
                .normals()
                .ok_or_else(|| Error::InvalidArgument("model expects normals but the cloud has none".into()))?;
            let flat = normals.iter().flat_map(|n| n.iter().copied()).collect();
            Some(f.g.constant(vec![cloud.len(), 3], flat)?)
        } else {
            None
        };
        let layer1 = self.layers[0].forward_grouped(f, cloud.coords(), feats, &groupings.layer1)?;
        let layer1_pooled = f.g.max(layer1.features, 1)?;
        let layer2 = self.layers[1].forward_grouped(f, &groupings.centroids1, Some(layer1_pooled), &groupings.layer2)?;
        Ok(BackboneOutput { layer1, layer1_pooled, layer2 })
    }
}
