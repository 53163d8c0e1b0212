//! Online discriminative tracking: first-frame initialisation, Gaussian
//! candidate search, classifier scoring, box regression and short/long
//! term classifier updates, followed by decision-level refinement.

mod bbox;
mod classifier;
mod regressor;
mod sampling;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bbox::{mean_box, BBox};
pub use classifier::{margins, positive_prob, rows, FcHead, NEG, POS};
pub use regressor::{apply_deltas, box_deltas, BoxRegressor};
pub use sampling::{
    gaussian_sample, harvest_samples, regression_samples, HarvestGates, Label, SampleSet,
    MAX_ATTEMPTS_PER_SAMPLE,
};

use crate::config::RunConfig;
use crate::data::Branch;
use crate::drm::{self, build_pyramid, DrmError, FlowOutcome, FlowPyramid, LkParams, RefineGrid};
use crate::frame::FramePair;
use crate::model::FrameFeatures;
use crate::tensor::roi::{roi_align, ROI_OUT};
use crate::tensor::{AdamW, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("sample harvest: found {found} of {wanted} boxes passing the {gate} gate after {attempts} proposals")]
    Harvest {
        gate: String,
        found: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("box regressor: {0}")]
    Regressor(String),
    #[error("ground-truth box {0:?} is not inside the {1}x{2} frame")]
    BadBox(BBox, usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Drm(#[from] DrmError),
}

/// Sample features gathered on one frame, `[n,D]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSamples<R> {
    pub frame: usize,
    pub pos: Tensor<R>,
    pub neg: Tensor<R>,
}

/// FIFO store of per-frame samples holding at most `capacity` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer<R> {
    capacity: usize,
    frames: VecDeque<FrameSamples<R>>,
}

impl<R: Real> SampleBuffer<R> {
    pub fn new(capacity: usize) -> Self {
        SampleBuffer {
            capacity,
            frames: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameSamples<R>> {
        self.frames.iter()
    }

    pub fn push(&mut self, s: FrameSamples<R>) {
        if self.capacity == 0 {
            return;
        }
        while self.frames.len() >= self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(s);
    }

    /// All positives and all negatives stacked.
    pub fn stacked(&self) -> Result<(Tensor<R>, Tensor<R>), TensorError> {
        let stack = |pick: fn(&FrameSamples<R>) -> &Tensor<R>| {
            let parts: Vec<&Tensor<R>> = self.frames.iter().map(pick).collect();
            crate::tensor::kernels::concat(&parts, 0)
        };
        Ok((stack(|f| &f.pos)?, stack(|f| &f.neg)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateKind {
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateEvent {
    pub frame: usize,
    pub kind: UpdateKind,
    /// The buffer was empty, so no training happened.
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TrackerState<R> {
    pub head: FcHead<R>,
    pub opt: AdamW<R>,
    pub regressor: BoxRegressor,
    pub short: SampleBuffer<R>,
    pub long: SampleBuffer<R>,
    pub current_box: BBox,
    pub frame_index: usize,
    /// Positive-class probability of each tracked frame's estimate.
    pub score_history: Vec<f64>,
    /// Multiplier bringing RoI features to unit RMS on the first frame.
    pub feat_scale: f64,
    /// Current candidate translation sigma.
    pub search_sigma: f64,
    pub events: Vec<UpdateEvent>,
    pub width: usize,
    pub height: usize,
    prev_pyramid: Option<FlowPyramid>,
    rng: ChaCha8Rng,
}

/// Flattened, scaled RoI features `[N, C*3*3]` of `boxes`.
pub fn roi_features<R: Real>(feats: &FrameFeatures<R>, boxes: &[BBox], feat_scale: f64) -> Result<Tensor<R>, TensorError> {
    let arr: Vec<[f64; 4]> = boxes.iter().map(BBox::to_array).collect();
    let pooled = roi_align(&feats.fused, &arr, feats.spatial_scale())?;
    let d = feats.fused.shape()[0] * ROI_OUT * ROI_OUT;
    let s = R::of(feat_scale);
    let mut t = pooled.reshape([boxes.len(), d])?;
    if feat_scale != 1.0 {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    Ok(t)
}

fn rms<R: Real>(t: &Tensor<R>) -> f64 {
    let n = t.numel().max(1) as f64;
    (t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n).sqrt()
}

/// Keeps the first `n` rows.
fn head_rows<R: Real>(t: &Tensor<R>, n: usize) -> Result<Tensor<R>, TensorError> {
    t.narrow_first(0, n.min(t.shape()[0]))
}

fn gates(cfg: &RunConfig, width: usize, height: usize) -> HarvestGates {
    HarvestGates {
        pos_iou: cfg.pos_iou,
        neg_iou: cfg.neg_iou,
        width,
        height,
    }
}

impl<R: Real> TrackerState<R> {
    /// Fits the classifier and box regressor on the first frame.
    pub fn init_first_frame(
        feats: &FrameFeatures<R>,
        pair: &FramePair<R>,
        gt: &BBox,
        cfg: &RunConfig,
        with_flow: bool,
    ) -> Result<Self, TrackError> {
        let (w, h) = (pair.width(), pair.height());
        if !gt.is_valid() || !gt.inside(w, h) {
            return Err(TrackError::BadBox(*gt, w, h));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7ac4);
        let set = harvest_samples(gt, cfg.init_pos, cfg.init_neg, gates(cfg, w, h), &mut rng)?;
        let pos_raw = roi_features(feats, &set.positives(), 1.0)?;
        let neg_raw = roi_features(feats, &set.negatives(), 1.0)?;
        let level = 0.5 * (rms(&pos_raw) + rms(&neg_raw));
        let feat_scale = if level > 0.0 { 1.0 / level } else { 1.0 };
        let s = R::of(feat_scale);
        let pos = pos_raw.map(|v| v * s);
        let neg = neg_raw.map(|v| v * s);

        let mut head = FcHead::new(pos.shape()[1], cfg.fc_dims, cfg.dropout, cfg.seed.wrapping_add(2));
        let mut opt = AdamW::new(cfg.fc_optimizer());
        let lrs = head.slot_lrs(cfg.lr_fc, cfg.lr_fc6);
        head.train(&mut opt, &pos, &neg, cfg.init_epochs, cfg.batch_pos, cfg.batch_neg, &lrs, &mut rng)?;

        let reg_boxes = regression_samples(gt, cfg.bbreg_samples, cfg.bbreg_min_iou, w, h, &mut rng)?;
        let reg_feats = roi_features(feats, &reg_boxes, feat_scale)?;
        let flat: Vec<f64> = reg_feats.data().iter().map(|v| v.as_f64()).collect();
        let regressor = BoxRegressor::fit(&flat, &reg_boxes, gt, cfg.ridge_lambda)?;

        let mut short = SampleBuffer::new(cfg.short_capacity);
        let mut long = SampleBuffer::new(cfg.long_capacity);
        let first = FrameSamples {
            frame: 0,
            pos: head_rows(&pos, cfg.update_pos)?,
            neg: head_rows(&neg, cfg.update_neg)?,
        };
        short.push(first.clone());
        long.push(first);
        let prev_pyramid = if with_flow {
            Some(build_pyramid(&pair.flow_luma(), cfg.pyramid_levels)?)
        } else {
            None
        };
        Ok(TrackerState {
            head,
            opt,
            regressor,
            short,
            long,
            current_box: *gt,
            frame_index: 0,
            score_history: Vec::new(),
            feat_scale,
            search_sigma: cfg.trans_sigma,
            events: Vec::new(),
            width: w,
            height: h,
            prev_pyramid,
            rng,
        })
    }

    /// Classifier margins of `boxes` on this frame.
    pub fn score_boxes(&self, feats: &FrameFeatures<R>, boxes: &[BBox]) -> Result<Vec<f64>, TensorError> {
        let x = roi_features(feats, boxes, self.feat_scale)?;
        self.head.margins(&x)
    }

    /// Scores candidates around the current box and averages the best.
    pub fn locate(&mut self, feats: &FrameFeatures<R>, cfg: &RunConfig) -> Result<Localization, TrackError> {
        let cands: Vec<BBox> = gaussian_sample(
            &self.current_box,
            cfg.n_candidates,
            self.search_sigma,
            cfg.scale_sigma,
            cfg.scale_base,
            &mut self.rng,
        )
        .into_iter()
        .map(|b| b.clamp_to(self.width, self.height))
        .collect();
        let scores = self.score_boxes(feats, &cands)?;
        Ok(Localization::from_scores(cands, scores, cfg.top_k))
    }

    fn update(&mut self, kind: UpdateKind, cfg: &RunConfig) -> Result<(), TrackError> {
        let buf = match kind {
            UpdateKind::Short => &self.short,
            UpdateKind::Long => &self.long,
        };
        if buf.is_empty() {
            log::warn!("frame {}: {kind:?} update skipped, buffer is empty", self.frame_index);
            self.events.push(UpdateEvent { frame: self.frame_index, kind, skipped: true });
            return Ok(());
        }
        let (pos, neg) = buf.stacked()?;
        let lrs = self.head.slot_lrs(cfg.lr_fc, cfg.lr_fc6);
        self.head.train(
            &mut self.opt,
            &pos,
            &neg,
            cfg.update_epochs,
            cfg.batch_pos,
            cfg.batch_neg,
            &lrs,
            &mut self.rng,
        )?;
        self.events.push(UpdateEvent { frame: self.frame_index, kind, skipped: false });
        Ok(())
    }

    /// One tracking step on the next frame.
    pub fn track_frame(
        &mut self,
        feats: &FrameFeatures<R>,
        pair: &FramePair<R>,
        cfg: &RunConfig,
        with_drm: bool,
    ) -> Result<FrameResult, TrackError> {
        self.frame_index += 1;
        let loc = self.locate(feats, cfg)?;
        self.score_history.push(loc.f_plus);
        let mut estimate = loc.estimate;
        self.search_sigma = if loc.f_plus > cfg.success_threshold {
            cfg.trans_sigma
        } else {
            (self.search_sigma * cfg.search_expand).min(cfg.trans_sigma_max.max(cfg.trans_sigma))
        };
        if loc.f_plus > cfg.success_threshold {
            let set = harvest_samples(&estimate.clamp_to(self.width, self.height), cfg.update_pos, cfg.update_neg, gates(cfg, self.width, self.height), &mut self.rng)?;
            let pos = roi_features(feats, &set.positives(), self.feat_scale)?;
            let neg = roi_features(feats, &set.negatives(), self.feat_scale)?;
            let s = FrameSamples { frame: self.frame_index, pos, neg };
            self.short.push(s.clone());
            self.long.push(s);
            let top_feats = roi_features(feats, &loc.top, self.feat_scale)?;
            let d = top_feats.shape()[1];
            let regressed: Vec<BBox> = loc
                .top
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let row: Vec<f64> = top_feats.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64()).collect();
                    self.regressor.predict(&row, b)
                })
                .collect();
            estimate = mean_box(&regressed);
        }
        let update = if loc.f_plus < cfg.success_threshold {
            Some(UpdateKind::Short)
        } else if self.frame_index.is_multiple_of(cfg.long_interval.max(1)) {
            Some(UpdateKind::Long)
        } else {
            None
        };
        if let Some(kind) = update {
            self.update(kind, cfg)?;
        }

        let mut branch = Branch::None;
        let mut flow = None;
        if with_drm {
            let curr = build_pyramid(&pair.flow_luma(), cfg.pyramid_levels)?;
            branch = drm::branch_for(loc.c_s);
            match branch {
                Branch::Refine => {
                    let grid = RefineGrid {
                        radius: cfg.refine_radius,
                        scales: cfg.refine_scales.clone(),
                        aspects: cfg.refine_aspects.clone(),
                    };
                    estimate = drm::refine_box(&estimate, &grid, |boxes| {
                        let clamped: Vec<BBox> = boxes.iter().map(|b| b.clamp_to(self.width, self.height)).collect();
                        self.score_boxes(feats, &clamped)
                            .map_err(|e| DrmError::Score(e.to_string()))
                    })?;
                }
                Branch::Flow => {
                    let prev = self.prev_pyramid.as_ref().unwrap_or(&curr);
                    let params = LkParams {
                        window: cfg.lk_window,
                        iters: cfg.lk_iters,
                        det_eps: cfg.lk_det_eps,
                        max_flow: cfg.max_flow_frac * self.current_box.w.max(self.current_box.h),
                    };
                    let out = drm::flow_reposition(&self.current_box, &estimate, prev, &curr, cfg.flow_grid, &params, cfg.flow_anchor)?;
                    estimate = out.bbox;
                    flow = Some(out);
                }
                Branch::None => {}
            }
            self.prev_pyramid = Some(curr);
        }
        let bbox = estimate.clamp_to(self.width, self.height);
        self.current_box = bbox;
        Ok(FrameResult {
            bbox,
            searched: loc.estimate,
            confidence: loc.c_s,
            f_plus: loc.f_plus,
            branch,
            flow,
            update,
        })
    }
}

/// Top-scoring candidates of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub candidates: Vec<BBox>,
    pub scores: Vec<f64>,
    pub top: Vec<BBox>,
    /// Mean of the top boxes.
    pub estimate: BBox,
    /// Mean positive-class probability over the top boxes.
    pub f_plus: f64,
    /// Mean logit margin over the top boxes.
    pub c_s: f64,
}

impl Localization {
    /// Ranks by margin, ties to the lower candidate index.
    pub fn from_scores(candidates: Vec<BBox>, scores: Vec<f64>, top_k: usize) -> Self {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let k = top_k.min(order.len()).max(1);
        let top: Vec<BBox> = order[..k].iter().map(|&i| candidates[i]).collect();
        let c_s = order[..k].iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
        let f_plus = order[..k].iter().map(|&i| positive_prob(scores[i])).sum::<f64>() / k as f64;
        Localization {
            estimate: mean_box(&top),
            top,
            candidates,
            scores,
            f_plus,
            c_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub bbox: BBox,
    /// Candidate-search estimate before regression and refinement.
    pub searched: BBox,
    pub confidence: f64,
    pub f_plus: f64,
    pub branch: Branch,
    pub flow: Option<FlowOutcome>,
    pub update: Option<UpdateKind>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_five_average() {
        let cands: Vec<BBox> = (0..6).map(|i| BBox::new(i as f64, 0.0, 4.0, 4.0)).collect();
        let loc = Localization::from_scores(cands, vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 5);
        assert_eq!(loc.estimate, BBox::new(2.0, 0.0, 4.0, 4.0));
        assert_eq!(loc.c_s, 3.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let cands: Vec<BBox> = (0..4).map(|i| BBox::new(i as f64, 0.0, 4.0, 4.0)).collect();
        let loc = Localization::from_scores(cands, vec![1.0; 4], 2);
        assert_eq!(loc.top, vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(1.0, 0.0, 4.0, 4.0)]);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = SampleBuffer::<f64>::new(2);
        for f in 0..3 {
            b.push(FrameSamples { frame: f, pos: Tensor::zeros([1, 2]), neg: Tensor::zeros([1, 2]) });
        }
        let frames: Vec<usize> = b.frames().map(|s| s.frame).collect();
        assert_eq!(frames, vec![1, 2]);
        let (p, n) = b.stacked().unwrap();
        assert_eq!((p.shape()[0], n.shape()[0]), (2, 2));
    }
}
