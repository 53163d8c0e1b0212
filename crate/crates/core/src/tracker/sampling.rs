use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BBox, TrackError};

/// Draws `n` boxes around `center`: translations with standard deviation
/// `trans_sigma * mean(w, h)`, sizes scaled by `scale_base^(scale_sigma * z)`.
pub fn gaussian_sample(
    center: &BBox,
    n: usize,
    trans_sigma: f64,
    scale_sigma: f64,
    scale_base: f64,
    rng: &mut impl Rng,
) -> Vec<BBox> {
    let side = (center.w + center.h) / 2.0;
    (0..n)
        .map(|_| {
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let zs: f64 = StandardNormal.sample(rng);
            let s = scale_base.powf(scale_sigma * zs);
            let (w, h) = (center.w * s, center.h * s);
            BBox::new(
                center.x + trans_sigma * side * zx + (center.w - w) / 2.0,
                center.y + trans_sigma * side * zy + (center.h - h) / 2.0,
                w,
                h,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

/// Labelled boxes with their overlap to the reference box.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub boxes: Vec<BBox>,
    pub labels: Vec<Label>,
    pub ious: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn with(&self, label: Label) -> Vec<BBox> {
        self.boxes
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == label)
            .map(|(b, _)| *b)
            .collect()
    }

    pub fn positives(&self) -> Vec<BBox> {
        self.with(Label::Positive)
    }

    pub fn negatives(&self) -> Vec<BBox> {
        self.with(Label::Negative)
    }
}

/// IoU gates and frame bounds for harvesting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarvestGates {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub width: usize,
    pub height: usize,
}

/// Proposals per requested sample before giving up.
pub const MAX_ATTEMPTS_PER_SAMPLE: usize = 100;

fn gather(
    wanted: usize,
    gate: &str,
    mut propose: impl FnMut() -> BBox,
    accept: impl Fn(f64) -> bool,
    gt: &BBox,
    out: &mut SampleSet,
    label: Label,
) -> Result<(), TrackError> {
    let budget = wanted * MAX_ATTEMPTS_PER_SAMPLE;
    let mut found = 0;
    for _ in 0..budget {
        if found == wanted {
            break;
        }
        let b = propose();
        let iou = b.iou(gt);
        if accept(iou) {
            out.boxes.push(b);
            out.labels.push(label);
            out.ious.push(iou);
            found += 1;
        }
    }
    if found < wanted {
        return Err(TrackError::Harvest {
            gate: gate.to_string(),
            found,
            wanted,
            attempts: budget,
        });
    }
    Ok(())
}

/// Rejection-samples `n_pos` boxes with IoU above `pos_iou` and `n_neg`
/// with IoU below `neg_iou`. Proposals are clamped into the frame.
/// Negatives come alternately from a neighbourhood of the target and from
/// anywhere in the frame.
pub fn harvest_samples(
    gt: &BBox,
    n_pos: usize,
    n_neg: usize,
    gates: HarvestGates,
    rng: &mut impl Rng,
) -> Result<SampleSet, TrackError> {
    let (fw, fh) = (gates.width, gates.height);
    let mut out = SampleSet::default();
    let side = (gt.w + gt.h) / 2.0;
    gather(
        n_pos,
        &format!("positive IoU > {}", gates.pos_iou),
        || gaussian_sample(gt, 1, 0.1, 1.3, 1.05, rng)[0].clamp_to(fw, fh),
        |iou| iou > gates.pos_iou,
        gt,
        &mut out,
        Label::Positive,
    )?;
    let mut flip = false;
    gather(
        n_neg,
        &format!("negative IoU < {}", gates.neg_iou),
        || {
            flip = !flip;
            let s = 1.05f64.powf(rng.random_range(-5.0..5.0));
            let (w, h) = (gt.w * s, gt.h * s);
            let (cx, cy) = if flip {
                let (gx, gy) = gt.center();
                (
                    gx + rng.random_range(-1.5..1.5) * side,
                    gy + rng.random_range(-1.5..1.5) * side,
                )
            } else {
                (rng.random_range(0.0..fw as f64), rng.random_range(0.0..fh as f64))
            };
            BBox::from_center(cx, cy, w, h).clamp_to(fw, fh)
        },
        |iou| iou < gates.neg_iou,
        gt,
        &mut out,
        Label::Negative,
    )?;
    Ok(out)
}

/// Boxes for fitting the box regressor: overlap at least `min_iou`.
pub fn regression_samples(
    gt: &BBox,
    n: usize,
    min_iou: f64,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BBox>, TrackError> {
    let mut out = SampleSet::default();
    gather(
        n,
        &format!("regression IoU >= {min_iou}"),
        || {
            let mut b = gaussian_sample(gt, 1, 0.3, 1.5, 1.05, rng)[0];
            let a = 1.1f64.powf(rng.random_range(-1.0..1.0));
            b = b.rescale(a, 1.0 / a);
            b.clamp_to(width, height)
        },
        |iou| iou >= min_iou,
        gt,
        &mut out,
        Label::Positive,
    )?;
    Ok(out.boxes)
}
