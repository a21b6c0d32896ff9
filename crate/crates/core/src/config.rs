//! Hyperparameter record, presets and ablation variants.
//!
//! Optimizer settings, epochs, batch size and learning-rate schedule are
//! implementation defaults; the network shapes under [`Preset::Paper`] are
//! the published reference configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionLayerConfig {
    /// Number of FPS centroids.
    pub m: usize,
    /// Neighbourhood sizes, one per scale, strictly increasing.
    pub scales: Vec<usize>,
    pub mlp_units: Vec<usize>,
}

impl ExtractionLayerConfig {
    pub fn output_width(&self) -> usize {
        self.mlp_units.last().copied().unwrap_or(0)
    }

    fn validate(&self, which: &str) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config(format!("{which}: m must be positive")));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!("{which}: scales must be a non-empty list of positive sizes")));
        }
        if !self.scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("{which}: scales {:?} must be strictly increasing", self.scales)));
        }
        if self.mlp_units.is_empty() || self.mlp_units.contains(&0) {
            return Err(Error::Config(format!("{which}: mlp_units must be a non-empty list of positive widths")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    /// Weight of the reconstruction term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda: 0.5, alpha: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cosine decay of the learning rate over all training steps.
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, batch_size: 16, epochs: 30, cosine_decay: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_multi: bool,
    pub no_vlad: bool,
    pub no_caps: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoMulti,
    NoVlad,
    NoCaps,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_multi" => Ok(Self::NoMulti),
            "no_vlad" => Ok(Self::NoVlad),
            "no_caps" => Ok(Self::NoCaps),
            other => Err(Error::Config(format!("unknown ablation variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub num_parts: usize,
    /// MLP over shuffled rows concatenated with the duplicated capsule.
    pub row_mlp: Vec<usize>,
    /// MLP after interpolating to the first-layer centroids.
    pub centroid_mlp: Vec<usize>,
    /// MLP after interpolating to the input points.
    pub point_mlp: Vec<usize>,
    /// Weight of the per-point cross-entropy term.
    pub weight: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { num_parts: 2, row_mlp: vec![64], centroid_mlp: vec![64], point_mlp: vec![64, 32], weight: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_points: usize,
    pub use_normals: bool,
    pub num_classes: usize,
    pub backbone: Vec<ExtractionLayerConfig>,
    /// Multi-scale shuffle ratio `r`.
    pub shuffle_ratio: usize,
    /// Number of soft-assignment clusters `Q`.
    pub clusters: usize,
    /// Chunks per cluster embedding when forming primary capsules.
    pub capsule_split: usize,
    pub capsule_dim: usize,
    pub digit_dim: usize,
    pub routing_iters: usize,
    /// Hidden widths of the classifier used by the `no_caps` variant.
    pub fc_hidden: usize,
    /// Four fully-connected widths; the last must equal `input_points * 3`.
    pub decoder_widths: Vec<usize>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub segmentation: Option<SegmentationConfig>,
    pub batch_norm_eval: BatchNormEval,
}

/// Statistics used by the per-point batch norms outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchNormEval {
    /// The evaluated cloud's own statistics, as in training.
    #[default]
    PerCloud,
    /// Running averages accumulated during training.
    Running,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(4)
    }
}

impl ModelConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self {
            preset: Preset::Toy,
            input_points: 256,
            use_normals: false,
            num_classes,
            backbone: vec![
                ExtractionLayerConfig { m: 64, scales: vec![4, 8], mlp_units: vec![16, 32] },
                ExtractionLayerConfig { m: 32, scales: vec![4, 8], mlp_units: vec![32, 64] },
            ],
            shuffle_ratio: 2,
            clusters: 16,
            capsule_split: 4,
            capsule_dim: 16,
            digit_dim: 16,
            routing_iters: 1,
            fc_hidden: 128,
            decoder_widths: vec![128, 256, 512, 256 * 3],
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            ablation: AblationFlags::default(),
            segmentation: None,
            batch_norm_eval: BatchNormEval::PerCloud,
        }
    }

    pub fn paper(num_classes: usize) -> Self {
        Self {
            preset: Preset::Paper,
            input_points: 1024,
            backbone: vec![
                ExtractionLayerConfig { m: 512, scales: vec![8, 16, 32, 64], mlp_units: vec![32, 32, 64] },
                ExtractionLayerConfig { m: 256, scales: vec![8, 16, 32, 64], mlp_units: vec![64, 64, 128] },
            ],
            shuffle_ratio: 2,
            clusters: 64,
            capsule_split: 16,
            capsule_dim: 16,
            digit_dim: 16,
            fc_hidden: 512,
            decoder_widths: vec![512, 1024, 2048, 1024 * 3],
            ..Self::toy(num_classes)
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn input_channels(&self) -> usize {
        if self.use_normals {
            6
        } else {
            3
        }
    }

    /// Effective shuffle ratio (the `no_multi` variant skips shuffling).
    pub fn effective_ratio(&self) -> usize {
        if self.ablation.no_multi {
            1
        } else {
            self.shuffle_ratio
        }
    }

    /// Scale count `T` and width `C` of the second extraction layer.
    pub fn extractor_output(&self) -> (usize, usize) {
        let last = &self.backbone[self.backbone.len() - 1];
        (last.scales.len(), last.output_width())
    }

    /// Width of one shuffled feature row, `C / r`.
    pub fn shuffled_width(&self) -> usize {
        self.extractor_output().1 / self.effective_ratio()
    }

    /// Number of primary capsules fed to routing.
    pub fn primary_capsules(&self) -> usize {
        if self.ablation.no_vlad {
            let (t, c) = self.extractor_output();
            self.backbone[1].m * t * c / self.capsule_dim
        } else {
            self.clusters * self.capsule_split
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.len() != 2 {
            return Err(Error::Config(format!("expected two extraction layers, got {}", self.backbone.len())));
        }
        self.backbone[0].validate("backbone[0]")?;
        self.backbone[1].validate("backbone[1]")?;
        if self.backbone[0].m > self.input_points {
            return Err(Error::Config(format!("backbone[0].m = {} exceeds input_points = {}", self.backbone[0].m, self.input_points)));
        }
        if self.backbone[1].m > self.backbone[0].m {
            return Err(Error::Config("backbone[1].m must not exceed backbone[0].m".into()));
        }
        for (name, v) in [
            ("input_points", self.input_points),
            ("num_classes", self.num_classes),
            ("shuffle_ratio", self.shuffle_ratio),
            ("clusters", self.clusters),
            ("capsule_split", self.capsule_split),
            ("capsule_dim", self.capsule_dim),
            ("digit_dim", self.digit_dim),
            ("routing_iters", self.routing_iters),
            ("fc_hidden", self.fc_hidden),
            ("optimizer.batch_size", self.optimizer.batch_size),
            ("optimizer.epochs", self.optimizer.epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let flags = self.ablation;
        if [flags.no_multi, flags.no_vlad, flags.no_caps].iter().filter(|f| **f).count() > 1 {
            return Err(Error::Config("at most one ablation variant may be enabled".into()));
        }
        let (t, c) = self.extractor_output();
        let r = self.effective_ratio();
        if c % r != 0 {
            return Err(Error::Config(format!("shuffle ratio {r} does not divide feature width {c}")));
        }
        if flags.no_vlad {
            if c % self.capsule_dim != 0 {
                return Err(Error::Config(format!("capsule_dim {} must divide feature width {c} for no_vlad", self.capsule_dim)));
            }
            let _ = t;
        } else if !(c / r).is_multiple_of(self.capsule_split) {
            return Err(Error::Config(format!("capsule_split {} does not divide embedding width {}", self.capsule_split, c / r)));
        }
        if self.decoder_widths.len() != 4 || self.decoder_widths.contains(&0) {
            return Err(Error::Config("decoder_widths must list four positive widths".into()));
        }
        if self.decoder_widths[3] != self.input_points * 3 {
            return Err(Error::Config(format!(
                "last decoder width {} must equal input_points * 3 = {}",
                self.decoder_widths[3],
                self.input_points * 3
            )));
        }
        let l = &self.loss;
        if !(0.0 < l.m_minus && l.m_minus < l.m_plus && l.m_plus < 1.0) {
            return Err(Error::Config(format!("need 0 < m_minus < m_plus < 1, got {} / {}", l.m_minus, l.m_plus)));
        }
        if !(l.alpha >= 0.0 && l.lambda >= 0.0 && l.alpha.is_finite() && l.lambda.is_finite()) {
            return Err(Error::Config("alpha and lambda must be finite and non-negative".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config("optimizer needs learning_rate > 0, betas in [0, 1), epsilon > 0".into()));
        }
        if let Some(seg) = &self.segmentation {
            if seg.num_parts == 0 || seg.point_mlp.is_empty() || seg.row_mlp.is_empty() || seg.centroid_mlp.is_empty() {
                return Err(Error::Config("segmentation needs num_parts >= 1 and non-empty MLPs".into()));
            }
            if seg.row_mlp.contains(&0) || seg.centroid_mlp.contains(&0) || seg.point_mlp.contains(&0) {
                return Err(Error::Config("segmentation MLP widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Returns a copy with one ablation variant switched on.
    pub fn ablation(&self, variant: Ablation) -> Result<Self> {
        let mut cfg = self.clone();
        match variant {
            Ablation::NoMulti => cfg.ablation.no_multi = true,
            Ablation::NoVlad => cfg.ablation.no_vlad = true,
            Ablation::NoCaps => cfg.ablation.no_caps = true,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
