//! End-to-end workflows: building the feature network for a run,
//! offline multi-domain pretraining and per-sequence tracking.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{fusion_pairs, synth_sequence, Branch, DataError, Illumination, Motion, ResultRow, SequenceRecord, SynthSpec};
use crate::drm::FlowPoint;
use crate::model::FeatureNet;
use crate::nn::ParamStore;
use crate::pgm::{distill_train, AnalyticTeacher, DistillConfig, PgmError, PgmStudent};
use crate::tensor::{AdamW, AdamWConfig, Graph, Real, Tensor, TensorError};
use crate::tracker::{harvest_samples, FcHead, HarvestGates, TrackError, TrackerState, UpdateKind};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("pretraining needs at least one sequence")]
    EmptyCorpus,
}

impl DistillConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        DistillConfig {
            epochs: cfg.pgm_epochs,
            batch: cfg.pgm_batch,
            noise_sigma: cfg.pgm_noise_sigma,
            lr: cfg.pgm_lr,
            seed: cfg.seed,
        }
    }
}

/// Distils a fresh fusion student on the toy pair corpus.
pub fn distill_default<R: Real>(cfg: &RunConfig) -> Result<PgmStudent<R>, PipelineError> {
    let pairs = fusion_pairs(cfg.pgm_train_pairs, cfg.pgm_train_size, cfg.seed);
    let student = PgmStudent::new(cfg.pgm_channels, cfg.seed);
    let out = distill_train(&pairs, &AnalyticTeacher, student, &DistillConfig::from_run(cfg))?;
    Ok(out.student)
}

/// Feature network for `cfg`. A fusion student is attached only when the
/// run enables it; `student` is distilled on demand when not supplied.
pub fn build_net<R: Real>(cfg: &RunConfig, student: Option<PgmStudent<R>>) -> Result<FeatureNet<R>, PipelineError> {
    let mut net = FeatureNet::new(cfg);
    if cfg.pgm {
        net.pgm = Some(match student {
            Some(s) => s,
            None => distill_default(cfg)?,
        });
    }
    Ok(net)
}

/// How often each optional stage ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct StageCounters {
    pub pgm: usize,
    pub fim: usize,
    pub refine: usize,
    pub flow: usize,
    pub none: usize,
    pub short_updates: usize,
    pub long_updates: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackOptions {
    pub keep_heatmaps: bool,
    pub keep_flow: bool,
}

#[derive(Debug, Clone)]
pub struct TrackOutput<R> {
    pub rows: Vec<ResultRow>,
    pub counters: StageCounters,
    /// Per-frame attention heatmap `[H,W]`, when kept and computed.
    pub heatmaps: Vec<Option<Tensor<R>>>,
    /// Per-frame flow points, when kept and the flow branch ran.
    pub flow: Vec<Option<Vec<FlowPoint>>>,
}

impl<R> TrackOutput<R> {
    pub fn boxes(&self) -> Vec<crate::tracker::BBox> {
        self.rows.iter().map(|r| r.bbox).collect()
    }
}

/// Tracks `seq` from its first ground-truth box. Frame 0 reports the
/// ground truth with zero confidence.
pub fn track_sequence<R: Real>(
    net: &FeatureNet<R>,
    seq: &SequenceRecord<R>,
    cfg: &RunConfig,
    opts: TrackOptions,
) -> Result<TrackOutput<R>, PipelineError> {
    let mut counters = StageCounters::default();
    let mut heatmaps = Vec::with_capacity(seq.len());
    let mut flow = Vec::with_capacity(seq.len());
    let mut rows = Vec::with_capacity(seq.len());

    let frame_features = |pair: &crate::frame::FramePair<R>, counters: &mut StageCounters| {
        let mut pair = pair.clone();
        if net.pgm.is_some() {
            counters.pgm += 1;
        }
        if net.fim.is_some() {
            counters.fim += 1;
        }
        let feats = net.features(&mut pair)?;
        Ok::<_, TensorError>((pair, feats))
    };

    let (pair0, feats0) = frame_features(&seq.frames[0], &mut counters)?;
    let mut state = TrackerState::init_first_frame(&feats0, &pair0, &seq.gt[0], cfg, cfg.drm)?;
    rows.push(ResultRow { frame: 0, bbox: seq.gt[0], confidence: 0.0, branch: Branch::None });
    heatmaps.push(if opts.keep_heatmaps { feats0.attention.clone() } else { None });
    flow.push(None);

    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let (pair, feats) = frame_features(frame, &mut counters)?;
        let res = state.track_frame(&feats, &pair, cfg, cfg.drm)?;
        if cfg.drm {
            match res.branch {
                Branch::Refine => counters.refine += 1,
                Branch::Flow => counters.flow += 1,
                Branch::None => counters.none += 1,
            }
        }
        match res.update {
            Some(UpdateKind::Short) => counters.short_updates += 1,
            Some(UpdateKind::Long) => counters.long_updates += 1,
            None => {}
        }
        log::debug!(
            "{} frame {t}: f+ {:.3} c_s {:.3} branch {:?}",
            seq.name,
            res.f_plus,
            res.confidence,
            res.branch
        );
        rows.push(ResultRow { frame: t, bbox: res.bbox, confidence: res.confidence, branch: res.branch });
        heatmaps.push(if opts.keep_heatmaps { feats.attention } else { None });
        flow.push(if opts.keep_flow { res.flow.map(|f| f.points) } else { None });
    }
    Ok(TrackOutput { rows, counters, heatmaps, flow })
}

/// Built-in pretraining corpus: alternating lighting, every third
/// sequence sinusoidal. Seeds start at 1000 so they never coincide with
/// evaluation sequences.
pub fn synthetic_corpus<R: Real>(cfg: &RunConfig) -> Result<Vec<SequenceRecord<R>>, PipelineError> {
    (0..cfg.pretrain_sequences as u64)
        .map(|i| {
            let spec = SynthSpec {
                seed: 1000 + i,
                n_frames: cfg.pretrain_seq_frames,
                illumination: if i % 2 == 0 { Illumination::Low } else { Illumination::Normal },
                motion: if i % 3 == 2 { Motion::Sinusoid } else { Motion::Linear },
                ..SynthSpec::default()
            };
            Ok(synth_sequence(&spec)?)
        })
        .collect()
}

/// Offline multi-domain training of the backbones and interaction module.
/// Every sequence gets its own final classifier layer; the classifier
/// layers are discarded afterwards. Returns the mean loss per epoch.
pub fn pretrain<R: Real>(
    net: &mut FeatureNet<R>,
    corpus: &[SequenceRecord<R>],
    cfg: &RunConfig,
) -> Result<Vec<f64>, PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x000f_f11e);
    let prepared: Vec<Vec<crate::frame::FramePair<R>>> = corpus
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|p| {
                    let mut p = p.clone();
                    net.prepare(&mut p)?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>, TensorError>>()
        })
        .collect::<Result<_, _>>()?;

    let dim = net.out_channels() * crate::tensor::roi::ROI_OUT * crate::tensor::roi::ROI_OUT;
    let mut head = FcHead::<R>::new(dim, cfg.fc_dims, cfg.dropout, cfg.seed.wrapping_add(3));
    let mut branches: Vec<ParamStore<R>> = (0..corpus.len())
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(100 + k as u64));
            let mut p = ParamStore::new();
            p.push("fc6.w", Tensor::randn([cfg.fc_dims[1], 2], 0.01, &mut r));
            p.push("fc6.b", Tensor::zeros([2]));
            p
        })
        .collect();
    let opt_cfg = |lr| AdamWConfig { lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut stream_opts: Vec<AdamW<R>> = (0..3).map(|_| AdamW::new(opt_cfg(cfg.lr_conv))).collect();
    let mut fim_opt = AdamW::new(opt_cfg(cfg.lr_conv));
    let mut head_opt = AdamW::new(opt_cfg(cfg.lr_fc_offline));
    let mut branch_opts: Vec<AdamW<R>> = (0..corpus.len()).map(|_| AdamW::new(opt_cfg(cfg.lr_fc_offline))).collect();
    let head_lrs = head.slot_lrs(cfg.lr_fc_offline, 0.0);
    let feat_scale = {
        let f = net.features(&mut prepared[0][0].clone())?;
        let boxes = [corpus[0].gt[0]];
        let x = crate::tracker::roi_features(&f, &boxes, 1.0)?;
        let r = (x.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / x.numel().max(1) as f64).sqrt();
        if r > 0.0 { 1.0 / r } else { 1.0 }
    };

    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let seq = &corpus[k];
            let idx: Vec<usize> = (0..seq.len()).collect();
            let picked: Vec<usize> = idx.choose_multiple(&mut rng, cfg.pretrain_frames.min(seq.len())).copied().collect();
            let gates = HarvestGates { pos_iou: cfg.pos_iou, neg_iou: cfg.neg_iou, width: seq.width(), height: seq.height() };

            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let hp = head.params.bind(&mut g);
            let bp = branches[k].bind(&mut g);
            let mut pos_parts = Vec::new();
            let mut neg_parts = Vec::new();
            for &t in &picked {
                let set = harvest_samples(&seq.gt[t], cfg.pretrain_pos, cfg.pretrain_neg, gates, &mut rng)?;
                let fused = net.features_graph(&mut g, &bound, &prepared[k][t])?;
                for (boxes, parts) in [(set.positives(), &mut pos_parts), (set.negatives(), &mut neg_parts)] {
                    let arr: Vec<[f64; 4]> = boxes.iter().map(|b| b.to_array()).collect();
                    let pooled = g.roi_align(fused, &arr, 1.0 / crate::backbone::STRIDE as f64)?;
                    let flat = g.reshape(pooled, &[boxes.len(), dim])?;
                    parts.push(g.scale(flat, feat_scale)?);
                }
            }
            let n_pos: usize = pos_parts.iter().map(|v| g.shape(*v)[0]).sum();
            let n_neg: usize = neg_parts.iter().map(|v| g.shape(*v)[0]).sum();
            let all: Vec<_> = pos_parts.into_iter().chain(neg_parts).collect();
            let x = g.concat(&all, 0)?;
            let p = [hp[0], hp[1], hp[2], hp[3], bp[0], bp[1]];
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng));
            let logits = head.forward(&mut g, &p, x, Some(&mut drop_rng))?;
            let mut labels = vec![crate::tracker::POS; n_pos];
            labels.extend(std::iter::repeat_n(crate::tracker::NEG, n_neg));
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            total += g.value(loss).item().as_f64();
            g.backward(loss)?;

            for (s, opt) in stream_opts.iter_mut().enumerate() {
                let lrs = vec![cfg.lr_conv; bound.backbone[s].len()];
                net.backbone.streams[s].apply(opt, &g, &bound.backbone[s], &lrs)?;
            }
            if let Some(f) = &mut net.fim {
                let lrs = vec![cfg.lr_conv; bound.fim.len()];
                f.params.apply(&mut fim_opt, &g, &bound.fim, &lrs)?;
            }
            head.params.apply(&mut head_opt, &g, &hp, &head_lrs)?;
            let lrs = vec![cfg.lr_fc_offline; 2];
            branches[k].apply(&mut branch_opts[k], &g, &bp, &lrs)?;
        }
        let mean = total / corpus.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        trace.push(mean);
    }
    Ok(trace)
}
