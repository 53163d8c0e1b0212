//! Boxes, sampling, the classifier/regressor and the online state machine.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xnet_core::data::{synth_sequence, SynthSpec};
use xnet_core::pipeline::{build_net, track_sequence, TrackOptions};
use xnet_core::tracker::{
    apply_deltas, box_deltas, gaussian_sample, harvest_samples, mean_box, roi_features, BBox, BoxRegressor, FcHead,
    FrameSamples, HarvestGates, Label, Localization, SampleBuffer, TrackerState, UpdateKind,
};
use xnet_core::{FeatureNet, RunConfig, SequenceRecord, Tensor};

/// Overlap computed from corner coordinates.
fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (-50.0f64..150.0, -50.0f64..150.0, 0.5f64..80.0, 0.5f64..80.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(a.iou(&a), 1.0);
    assert_eq!(a.iou(&BBox::new(5.0, 5.0, 2.0, 2.0)), 0.0);
    assert!((a.iou(&BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(a.iou(&BBox::new(2.0, 0.0, 2.0, 2.0)), 0.0, "touching edges");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_a_symmetric_unit_overlap(a in arb_box(), b in arb_box()) {
        let v = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, b.iou(&a));
        prop_assert!((v - iou_oracle(&a, &b)).abs() < 1e-12);
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_ignores_common_translation(a in arb_box(), b in arb_box(), dx in -40.0f64..40.0, dy in -40.0f64..40.0) {
        prop_assert!((a.iou(&b) - a.translate(dx, dy).iou(&b.translate(dx, dy))).abs() < 1e-9);
    }

    #[test]
    fn deltas_round_trip(a in arb_box(), b in arb_box()) {
        let back = apply_deltas(&a, box_deltas(&a, &b));
        prop_assert!((back.x - b.x).abs() < 1e-9 && (back.y - b.y).abs() < 1e-9);
        prop_assert!((back.w - b.w).abs() < 1e-9 && (back.h - b.h).abs() < 1e-9);
    }

    #[test]
    fn top_k_is_stable_under_permutation(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let boxes: Vec<BBox> = (0..n).map(|i| BBox::new(i as f64, 0.0, 4.0, 4.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3..3) as f64).collect();
        let a = Localization::from_scores(boxes.clone(), scores.clone(), 5);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let b = Localization::from_scores(perm.iter().map(|&i| boxes[i]).collect(), perm.iter().map(|&i| scores[i]).collect(), 5);
        // the same multiset of scores is selected either way
        let top_scores = |l: &Localization| {
            let mut s: Vec<f64> = l.top.iter().map(|t| scores[t.x as usize]).collect();
            s.sort_by(f64::total_cmp);
            s
        };
        prop_assert_eq!(top_scores(&a), top_scores(&b));
        prop_assert_eq!(a.c_s, b.c_s);
        // ties go to the lower index
        let worst = top_scores(&a)[0];
        for t in &a.top {
            if scores[t.x as usize] == worst {
                let lower_unpicked = (0..t.x as usize).any(|i| scores[i] == worst && !a.top.iter().any(|u| u.x as usize == i));
                prop_assert!(!lower_unpicked);
            }
        }
    }
}

#[test]
fn top_five_average_and_identical_candidates() {
    let boxes: Vec<BBox> = (0..6).map(|i| BBox::new(10.0 * i as f64, 0.0, 10.0, 10.0)).collect();
    let loc = Localization::from_scores(boxes.clone(), vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 5);
    assert_eq!(loc.top, boxes[..5].to_vec());
    assert!((loc.estimate.x - 20.0).abs() < 1e-12);
    assert!((loc.c_s - 3.0).abs() < 1e-12);

    let same = BBox::new(3.3, 7.7, 11.1, 9.9);
    let loc = Localization::from_scores(vec![same; 256], vec![0.2; 256], 5);
    let e = loc.estimate;
    assert!((e.x - same.x).abs() < 1e-12 && (e.y - same.y).abs() < 1e-12 && (e.w - same.w).abs() < 1e-12 && (e.h - same.h).abs() < 1e-12);
}

// ---------------------------------------------------------------- sampling

#[test]
fn zero_sigma_samples_are_copies() {
    let c = BBox::new(12.0, 30.0, 14.0, 9.0);
    let out = gaussian_sample(&c, 256, 0.0, 0.0, 1.05, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out.len(), 256);
    assert!(out.iter().all(|b| *b == c));
}

#[test]
fn sample_mean_converges_to_the_center() {
    let c = BBox::new(40.0, 25.0, 20.0, 16.0);
    let out = gaussian_sample(&c, 10_000, 0.3, 0.5, 1.05, &mut ChaCha8Rng::seed_from_u64(2));
    let (cx, cy) = c.center();
    let mx = out.iter().map(|b| b.center().0).sum::<f64>() / 1e4;
    let my = out.iter().map(|b| b.center().1).sum::<f64>() / 1e4;
    let side = (c.w + c.h) / 2.0;
    assert!((mx - cx).abs() < 0.01 * side && (my - cy).abs() < 0.01 * side, "({mx},{my}) vs ({cx},{cy})");
    // spread matches the configured sigma
    let var = out.iter().map(|b| (b.center().0 - cx).powi(2)).sum::<f64>() / 1e4;
    assert!((var.sqrt() / (0.3 * side) - 1.0).abs() < 0.05);
    let a = gaussian_sample(&c, 8, 0.3, 0.5, 1.05, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, gaussian_sample(&c, 8, 0.3, 0.5, 1.05, &mut ChaCha8Rng::seed_from_u64(3)));
}

fn gates() -> HarvestGates {
    HarvestGates { pos_iou: 0.7, neg_iou: 0.5, width: 64, height: 64 }
}

#[test]
fn harvest_gates_hold_on_ten_thousand_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0;
    let check = |gt: BBox, n_pos: usize, n_neg: usize, rng: &mut ChaCha8Rng| {
        let set = harvest_samples(&gt, n_pos, n_neg, gates(), rng).unwrap();
        assert_eq!(set.positives().len(), n_pos);
        assert_eq!(set.negatives().len(), n_neg);
        for (b, l) in set.boxes.iter().zip(&set.labels) {
            let v = iou_oracle(b, &gt);
            assert!(b.inside(64, 64));
            match l {
                Label::Positive => assert!(v > 0.7, "positive at {v}"),
                Label::Negative => assert!(v < 0.5, "negative at {v}"),
            }
        }
        set.len()
    };
    total += check(BBox::new(25.0, 25.0, 14.0, 14.0), 500, 5000, &mut rng);
    total += check(BBox::new(3.0, 40.0, 18.0, 12.0), 500, 5000, &mut rng);
    for i in 0..10 {
        total += check(BBox::new(5.0 + 4.0 * i as f64, 20.0, 14.0, 14.0), 50, 200, &mut rng);
    }
    assert!(total >= 10_000);
}

#[test]
fn harvest_fails_when_negatives_are_impossible() {
    let err = harvest_samples(&BBox::new(0.0, 0.0, 64.0, 64.0), 10, 10, gates(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap_err();
    assert!(err.to_string().contains("negative IoU < 0.5"), "{err}");
}

#[test]
fn buffers_evict_oldest_first() {
    let mut buf = SampleBuffer::<f32>::new(20);
    for f in 0..25 {
        buf.push(FrameSamples { frame: f, pos: Tensor::zeros([2, 3]), neg: Tensor::zeros([4, 3]) });
        assert!(buf.len() <= 20);
    }
    let frames: Vec<usize> = buf.frames().map(|s| s.frame).collect();
    assert_eq!(frames, (5..25).collect::<Vec<_>>());
    let (p, n) = buf.stacked().unwrap();
    assert_eq!((p.shape()[0], n.shape()[0]), (40, 80));
}

// ---------------------------------------------------------------- regressor and head

#[test]
fn zero_regressor_is_identity() {
    let r = BoxRegressor::zero(6);
    let b = BBox::new(3.0, 4.0, 10.0, 12.0);
    let out = r.predict(&[1.0, -2.0, 3.0, 0.5, 0.0, 9.0], &b);
    assert!((out.x - b.x).abs() < 1e-12 && (out.w - b.w).abs() < 1e-12);
}

#[test]
fn regressor_recovers_linear_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = BBox::new(30.0, 30.0, 16.0, 12.0);
    let dim = 12;
    let mix: Vec<f64> = (0..dim * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let embed = |b: &BBox| {
        let d = box_deltas(b, &gt);
        (0..dim).map(|i| (0..4).map(|k| mix[i * 4 + k] * d[k]).sum::<f64>()).collect::<Vec<f64>>()
    };
    let boxes = gaussian_sample(&gt, 200, 0.1, 1.0, 1.05, &mut rng);
    let feats: Vec<f64> = boxes.iter().flat_map(embed).collect();
    let reg = BoxRegressor::fit(&feats, &boxes, &gt, 1e-9).unwrap();
    for b in gaussian_sample(&gt, 20, 0.1, 1.0, 1.05, &mut rng) {
        let out = reg.predict(&embed(&b), &b);
        assert!(out.iou(&gt) > 1.0 - 1e-6, "{out:?}");
    }
    assert!(BoxRegressor::fit(&feats[..5], &boxes, &gt, 1.0).is_err());
}

#[test]
fn zero_head_gives_zero_logits_and_inference_is_deterministic() {
    let mut head = FcHead::<f64>::new(9, [8, 8], 0.5, 1);
    let x = Tensor::randn([4, 9], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(head.logits(&x).unwrap(), head.logits(&x).unwrap());
    assert_eq!(head.logits(&x).unwrap().shape(), &[4, 2]);
    for i in 0..head.params.len() {
        let shape = head.params.at(i).shape().to_vec();
        *head.params.at_mut(i) = Tensor::zeros(shape);
    }
    assert!(head.logits(&x).unwrap().data().iter().all(|v| *v == 0.0));
}

// ---------------------------------------------------------------- online state

fn small_config() -> RunConfig {
    RunConfig {
        backbone_channels: [8, 16, 24],
        fc_dims: [64, 64],
        pgm_epochs: 20,
        ..RunConfig::default()
    }
}

struct Fixture {
    cfg: RunConfig,
    net: FeatureNet<f32>,
    seq: SequenceRecord<f32>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let net = build_net(&cfg, None).unwrap();
        let spec = SynthSpec { n_frames: 24, distractors: 1, seed: 11, ..SynthSpec::default() };
        Fixture { cfg, net, seq: synth_sequence(&spec).unwrap() }
    })
}

fn initialised() -> (TrackerState<f32>, xnet_core::FrameFeatures<f32>) {
    let f = fixture();
    let mut pair = f.seq.frames[0].clone();
    let feats = f.net.features(&mut pair).unwrap();
    (TrackerState::init_first_frame(&feats, &pair, &f.seq.gt[0], &f.cfg, true).unwrap(), feats)
}

#[test]
fn first_frame_fit_separates_target_from_background() {
    let f = fixture();
    let (state, feats) = initialised();
    let gt = f.seq.gt[0];
    assert_eq!(state.head.params.at(4).shape(), &[64, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let set = harvest_samples(&gt, 500, 5000, gates(), &mut rng).unwrap();
    let pos = state.score_boxes(&feats, &set.positives()).unwrap();
    let neg = state.score_boxes(&feats, &set.negatives()).unwrap();
    let correct = pos.iter().filter(|m| **m > 0.0).count() + neg.iter().filter(|m| **m < 0.0).count();
    let acc = correct as f64 / (pos.len() + neg.len()) as f64;
    assert!(acc > 0.95, "accuracy {acc}");
    let mean_p = |m: &[f64]| m.iter().map(|v| xnet_core::tracker::positive_prob(*v)).sum::<f64>() / m.len() as f64;
    assert!(mean_p(&pos) > mean_p(&neg));
}

#[test]
fn regressor_keeps_the_ground_truth() {
    let f = fixture();
    let (state, feats) = initialised();
    let gt = f.seq.gt[0];
    let x = roi_features(&feats, &[gt], state.feat_scale).unwrap();
    let row: Vec<f64> = x.data().iter().map(|v| *v as f64).collect();
    assert!(state.regressor.predict(&row, &gt).iou(&gt) > 0.9);
}

#[test]
fn candidate_search_draws_the_configured_count() {
    let f = fixture();
    let (mut state, feats) = initialised();
    let loc = state.locate(&feats, &f.cfg).unwrap();
    assert_eq!(loc.candidates.len(), 256);
    assert_eq!(loc.scores.len(), 256);
    assert_eq!(loc.top.len(), 5);
    assert!(loc.scores.iter().all(|s| s.is_finite()));
}

#[test]
fn online_updates_follow_the_schedule_and_freeze_features() {
    let f = fixture();
    let before = f.net.clone();
    let mut state = initialised().0;
    let regressor = state.regressor.clone();
    let mut kinds = Vec::new();
    for t in 1..f.seq.len() {
        let mut pair = f.seq.frames[t].clone();
        let feats = f.net.features(&mut pair).unwrap();
        let res = state.track_frame(&feats, &pair, &f.cfg, true).unwrap();
        kinds.push((t, res.f_plus, res.update));
        assert!(state.short.len() <= 20 && state.long.len() <= 100);
    }
    for (t, fp, kind) in &kinds {
        let want = if *fp < 0.5 {
            Some(UpdateKind::Short)
        } else if t % 10 == 0 {
            Some(UpdateKind::Long)
        } else {
            None
        };
        assert_eq!(*kind, want, "frame {t} f+ {fp}");
    }
    assert!(kinds.iter().any(|k| k.2 == Some(UpdateKind::Long)));
    let fired: Vec<(usize, UpdateKind)> = state.events.iter().map(|e| (e.frame, e.kind)).collect();
    let expected: Vec<(usize, UpdateKind)> = kinds.iter().filter_map(|(t, _, k)| k.map(|k| (*t, k))).collect();
    assert_eq!(fired, expected);
    assert_eq!(state.regressor, regressor, "the regressor is fitted once");
    assert_eq!(f.net, before);
}

#[test]
fn a_64_bit_run_is_bit_reproducible() {
    let cfg = RunConfig { pgm_epochs: 3, init_neg: 1000, ..small_config() };
    let spec = SynthSpec { n_frames: 6, seed: 13, ..SynthSpec::default() };
    let run = || {
        let net = build_net::<f64>(&cfg, None).unwrap();
        let seq = synth_sequence::<f64>(&spec).unwrap();
        track_sequence(&net, &seq, &cfg, TrackOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.counters, b.counters);
}

#[test]
fn mean_box_averages_coordinates() {
    let m = mean_box(&[BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(2.0, 4.0, 4.0, 6.0)]);
    assert_eq!(m, BBox::new(1.0, 2.0, 3.0, 4.0));
}
