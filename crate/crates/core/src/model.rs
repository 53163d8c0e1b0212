//! Per-frame feature pipeline: fusion image, per-modality backbones and
//! the interaction module, switched by the ablation flags.

use std::path::Path;

use crate::backbone::{Backbone, DeepFeatures, Modality, STRIDE};
use crate::config::RunConfig;
use crate::fim::{additive_fusion_graph, channel_mean, Fim};
use crate::frame::{gray_to_rgb, FramePair};
use crate::pgm::PgmStudent;
use crate::tensor::{encode_checkpoint, Checkpoint, Graph, Real, Result, Tensor, TensorError, Var};

/// Fused features of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<R> {
    /// `[2C,H,W]`.
    pub fused: Tensor<R>,
    /// Channel mean of the summed cross-modal attention, when computed.
    pub attention: Option<Tensor<R>>,
}

impl<R: Real> FrameFeatures<R> {
    /// Input pixels to feature cells.
    pub fn spatial_scale(&self) -> f64 {
        1.0 / STRIDE as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet<R> {
    pub pgm: Option<PgmStudent<R>>,
    pub backbone: Backbone<R>,
    pub fim: Option<Fim<R>>,
}

/// Graph handles for every learnable tensor of a [`FeatureNet`].
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub backbone: [Vec<Var>; 3],
    pub fim: Vec<Var>,
}

impl<R: Real> FeatureNet<R> {
    /// Fresh network for `cfg`; the fusion student is attached separately.
    pub fn new(cfg: &RunConfig) -> Self {
        let backbone = Backbone::new(cfg.backbone_channels, cfg.backbone_dilations, cfg.seed);
        let c = backbone.out_channels();
        let fim = cfg
            .fim
            .then(|| Fim::new(c, cfg.fim_init_noise, cfg.fim_fill, cfg.fim_dk, cfg.seed.wrapping_add(1)));
        FeatureNet { pgm: None, backbone, fim }
    }

    pub fn out_channels(&self) -> usize {
        2 * self.backbone.out_channels()
    }

    /// Fills `pair.x_modality` when the fusion student is present.
    pub fn prepare(&self, pair: &mut FramePair<R>) -> Result<()> {
        if let Some(s) = &self.pgm {
            if pair.x_modality.is_none() {
                pair.x_modality = Some(s.fuse(&pair.rgb, &pair.thermal)?);
            }
        }
        Ok(())
    }

    /// Per-modality features; the X stream is zero without a fusion image.
    pub fn deep_features(&self, pair: &FramePair<R>) -> Result<DeepFeatures<R>> {
        let d_rgb = self.backbone.extract(Modality::Rgb, &pair.rgb)?;
        let d_t = self.backbone.extract(Modality::Thermal, &gray_to_rgb(&pair.thermal))?;
        let d_x = match (&self.pgm, &pair.x_modality) {
            (Some(_), Some(x)) => self.backbone.extract(Modality::X, x)?,
            _ => Tensor::zeros(d_rgb.shape().to_vec()),
        };
        DeepFeatures::new(d_rgb, d_t, d_x)
    }

    pub fn features(&self, pair: &mut FramePair<R>) -> Result<FrameFeatures<R>> {
        self.prepare(pair)?;
        let df = self.deep_features(pair)?;
        match &self.fim {
            Some(f) => {
                let maps = f.forward(&df)?;
                Ok(FrameFeatures {
                    attention: Some(channel_mean(&maps.att_rgbt)),
                    fused: maps.d_f,
                })
            }
            None => Ok(FrameFeatures {
                fused: crate::fim::additive_fusion(&df)?,
                attention: None,
            }),
        }
    }

    pub fn bind(&self, g: &mut Graph<R>) -> BoundNet {
        BoundNet {
            backbone: [
                self.backbone.streams[0].bind(g),
                self.backbone.streams[1].bind(g),
                self.backbone.streams[2].bind(g),
            ],
            fim: self.fim.as_ref().map(|f| f.params.bind(g)).unwrap_or_default(),
        }
    }

    /// Differentiable fused features `[2C,H,W]` of a prepared frame.
    pub fn features_graph(&self, g: &mut Graph<R>, p: &BoundNet, pair: &FramePair<R>) -> Result<Var> {
        let stream = |g: &mut Graph<R>, m: Modality, img: &Tensor<R>| -> Result<Var> {
            let s = img.shape().to_vec();
            let x = g.constant(img.clone().reshape([1, s[0], s[1], s[2]])?);
            let y = self.backbone.forward(g, &p.backbone[m.index()], x)?;
            let out = g.shape(y)[1..].to_vec();
            g.reshape(y, &out)
        };
        let d_rgb = stream(g, Modality::Rgb, &pair.rgb)?;
        let d_t = stream(g, Modality::Thermal, &gray_to_rgb(&pair.thermal))?;
        let d_x = match (&self.pgm, &pair.x_modality) {
            (Some(_), Some(x)) => stream(g, Modality::X, x)?,
            _ => {
                let s = g.shape(d_rgb).to_vec();
                g.constant(Tensor::zeros(s))
            }
        };
        match &self.fim {
            Some(f) => Ok(f.forward_graph(g, &p.fim, d_rgb, d_t, d_x)?.d_f),
            None => additive_fusion_graph(g, d_rgb, d_t, d_x),
        }
    }

    /// Writes every parameter group under a fixed prefix.
    pub fn checkpoint_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &Tensor<R>)> = Vec::new();
        if let Some(s) = &self.pgm {
            entries.extend(s.params.entries("pgm"));
        }
        for m in Modality::ALL {
            entries.extend(self.backbone.stream(m).entries(&format!("backbone.{}", m.name())));
        }
        if let Some(f) = &self.fim {
            entries.extend(f.params.entries("fim"));
        }
        encode_checkpoint(&entries, meta)
    }

    /// Loads the groups present in `ck`; groups this network lacks are ignored.
    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        let has = |prefix: &str| ck.names().any(|n| n.starts_with(prefix));
        if let Some(s) = &mut self.pgm {
            if has("pgm.") {
                s.params.load(ck, "pgm")?;
            }
        }
        for m in Modality::ALL {
            let prefix = format!("backbone.{}", m.name());
            if has(&format!("{prefix}.")) {
                self.backbone.streams[m.index()].load(ck, &prefix)?;
            }
        }
        if let Some(f) = &mut self.fim {
            if has("fim.") {
                f.params.load(ck, "fim")?;
            }
        }
        Ok(())
    }
}

/// Loads a fusion student of `channels` width from a checkpoint file.
pub fn load_student<R: Real>(path: &Path, channels: usize) -> Result<PgmStudent<R>> {
    let ck = crate::tensor::load_checkpoint(path)?;
    let mut s = PgmStudent::new(channels, 0);
    if !ck.names().any(|n| n.starts_with("pgm.")) {
        return Err(TensorError::Checkpoint(format!(
            "{} holds no fusion-student tensors",
            path.display()
        )));
    }
    s.params.load(&ck, "pgm")?;
    Ok(s)
}
