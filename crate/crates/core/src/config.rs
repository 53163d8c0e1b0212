//! Run configuration: one flat JSON document holding every tunable constant.
//!
//! Unknown keys are rejected. Missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drm::FlowAnchor;
use crate::tensor::AdamWConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 32-bit run mode.
    F32,
    /// 64-bit test mode; bitwise reproducible.
    F64,
}

/// How SFTS fills the one-pixel strip a shift vacates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftFill {
    Zero,
    /// Keep the unshifted value in the vacated strip.
    Copy,
}

/// Ablation presets. v1 fuses RGB and thermal features by addition only;
/// each later variant adds one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
    V3,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::Full];

    /// `(pgm, fim, drm)` flags.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::V1 => (false, false, false),
            Variant::V2 => (true, false, false),
            Variant::V3 => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "full" | "v4" => Ok(Variant::Full),
            other => Err(ConfigError::Invalid(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    // ablation switches
    pub pgm: bool,
    pub fim: bool,
    pub drm: bool,

    // pixel-level generation (student fusion net)
    pub pgm_channels: usize,
    pub pgm_epochs: usize,
    pub pgm_batch: usize,
    pub pgm_lr: f64,
    pub pgm_noise_sigma: f64,
    /// Pairs in the distillation corpus used when no checkpoint is given.
    pub pgm_train_pairs: usize,
    pub pgm_train_size: usize,

    // backbone
    pub backbone_channels: [usize; 3],
    pub backbone_dilations: [usize; 3],

    // feature interaction
    pub fim_fill: ShiftFill,
    pub fim_dk: f64,
    pub fim_init_noise: f64,

    // candidate search
    pub n_candidates: usize,
    pub top_k: usize,
    pub trans_sigma: f64,
    /// Growth of the translation sigma after each failed frame, and its cap.
    pub search_expand: f64,
    pub trans_sigma_max: f64,
    pub scale_sigma: f64,
    pub scale_base: f64,

    // sample harvesting
    pub init_pos: usize,
    pub init_neg: usize,
    pub update_pos: usize,
    pub update_neg: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,

    // classifier (fc4-fc6) learning
    pub fc_dims: [usize; 2],
    pub dropout: f64,
    /// Mini-batch iterations at initialisation.
    pub init_epochs: usize,
    /// Mini-batch iterations per short/long update.
    pub update_epochs: usize,
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub lr_fc6: f64,
    pub lr_fc: f64,
    pub weight_decay: f64,
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub long_interval: usize,
    pub success_threshold: f64,

    // box regression
    pub bbreg_samples: usize,
    pub bbreg_min_iou: f64,
    pub ridge_lambda: f64,

    // decision-level refinement
    pub pyramid_levels: usize,
    pub lk_window: usize,
    pub lk_iters: usize,
    pub lk_det_eps: f64,
    /// Flow magnitude cap as a multiple of the larger box side.
    pub max_flow_frac: f64,
    pub flow_grid: usize,
    pub flow_anchor: FlowAnchor,
    pub refine_radius: i32,
    pub refine_scales: Vec<f64>,
    pub refine_aspects: Vec<f64>,

    // offline multi-domain pretraining
    pub pretrain_epochs: usize,
    /// Size of the built-in synthetic corpus and frames per sequence.
    pub pretrain_sequences: usize,
    pub pretrain_seq_frames: usize,
    pub pretrain_frames: usize,
    pub pretrain_pos: usize,
    pub pretrain_neg: usize,
    pub lr_conv: f64,
    pub lr_fc_offline: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            precision: Precision::F32,
            pgm: true,
            fim: true,
            drm: true,

            pgm_channels: 16,
            pgm_epochs: 200,
            pgm_batch: 2,
            pgm_lr: 3e-3,
            pgm_noise_sigma: 0.05,
            pgm_train_pairs: 10,
            pgm_train_size: 32,

            backbone_channels: [32, 64, 96],
            backbone_dilations: [1, 2, 3],

            fim_fill: ShiftFill::Zero,
            fim_dk: 1.0,
            fim_init_noise: 0.01,

            n_candidates: 256,
            top_k: 5,
            trans_sigma: 0.3,
            search_expand: 1.1,
            trans_sigma_max: 1.5,
            scale_sigma: 0.5,
            scale_base: 1.05,

            init_pos: 500,
            init_neg: 5000,
            update_pos: 50,
            update_neg: 200,
            pos_iou: 0.7,
            neg_iou: 0.5,

            fc_dims: [512, 512],
            dropout: 0.5,
            init_epochs: 50,
            update_epochs: 15,
            batch_pos: 32,
            batch_neg: 96,
            lr_fc6: 1e-4,
            lr_fc: 1e-3,
            weight_decay: 5e-4,
            short_capacity: 20,
            long_capacity: 100,
            long_interval: 10,
            success_threshold: 0.5,

            bbreg_samples: 1000,
            bbreg_min_iou: 0.6,
            ridge_lambda: 1000.0,

            pyramid_levels: 3,
            lk_window: 15,
            lk_iters: 10,
            lk_det_eps: 1e-6,
            max_flow_frac: 1.5,
            flow_grid: 5,
            flow_anchor: FlowAnchor::Previous,
            refine_radius: 2,
            refine_scales: vec![0.95, 1.0, 1.05],
            refine_aspects: vec![0.95, 1.0, 1.05],

            pretrain_epochs: 200,
            pretrain_sequences: 6,
            pretrain_seq_frames: 40,
            pretrain_frames: 8,
            pretrain_pos: 32,
            pretrain_neg: 96,
            lr_conv: 1e-4,
            lr_fc_offline: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.pgm, self.fim, self.drm) = v.flags();
        self
    }

    /// The preset matching the ablation flags, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == (self.pgm, self.fim, self.drm))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !self.backbone_channels[2].is_multiple_of(4) {
            return bad("backbone_channels[2] must be divisible by 4");
        }
        if self.n_candidates == 0 || self.top_k == 0 || self.top_k > self.n_candidates {
            return bad("need 1 <= top_k <= n_candidates");
        }
        if self.lk_window.is_multiple_of(2) {
            return bad("lk_window must be odd");
        }
        if self.pyramid_levels == 0 || self.flow_grid == 0 {
            return bad("pyramid_levels and flow_grid must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.neg_iou > self.pos_iou {
            return bad("neg_iou must not exceed pos_iou");
        }
        if self.fim_dk <= 0.0 {
            return bad("fim_dk must be positive");
        }
        Ok(())
    }

    pub fn fc_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_fc,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}
