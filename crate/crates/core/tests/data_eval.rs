//! Sequence ingestion, synthetic sequences and precision/success metrics.

use std::fs;

use proptest::prelude::*;

use xnet_core::data::{
    load_sequence, precision_curve, precision_rate, read_results, save_sequence, success_rate, synth_sequence,
    write_results, Branch, Illumination, MetricsReport, Motion, ResultRow, SynthSpec,
};
use xnet_core::frame::{luma, save_png};
use xnet_core::tracker::BBox;
use xnet_core::{SequenceRecord, Tensor};

fn write_fixture(dir: &std::path::Path, frames: usize, gt_lines: &[&str]) {
    for sub in ["visible", "infrared"] {
        fs::create_dir_all(dir.join(sub)).unwrap();
    }
    for i in 0..frames {
        let rgb = Tensor::<f32>::from_fn([3, 8, 10], |k| ((k + i) % 7) as f32 / 7.0);
        let t = Tensor::<f32>::from_fn([1, 8, 10], |k| ((k * 3 + i) % 5) as f32 / 5.0);
        save_png(&rgb, &dir.join("visible").join(format!("{i:04}.png"))).unwrap();
        save_png(&t, &dir.join("infrared").join(format!("{i:04}.png"))).unwrap();
    }
    fs::write(dir.join("groundTruth.txt"), gt_lines.join("\n")).unwrap();
}

#[test]
fn two_frame_fixture_loads() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 2, &["10 20 30 40", "1,2,3,4"]);
    let seq = load_sequence::<f32>(tmp.path()).unwrap();
    assert_eq!(seq.len(), 2);
    assert_eq!(seq.gt[0], BBox::new(10.0, 20.0, 30.0, 40.0));
    assert_eq!(seq.gt[1], BBox::new(1.0, 2.0, 3.0, 4.0));
    assert_eq!((seq.width(), seq.height()), (10, 8));
    let px = seq.frames[1].rgb.data();
    assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    // 8-bit quantisation of k/7
    assert!((px[0] - 1.0 / 7.0).abs() < 1.0 / 255.0);
}

#[test]
fn missing_ground_truth_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 2, &["1 1 2 2", "1 1 2 2"]);
    fs::remove_file(tmp.path().join("groundTruth.txt")).unwrap();
    let err = load_sequence::<f32>(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("groundTruth.txt"), "{err}");
}

#[test]
fn count_mismatch_names_the_counts() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 3, &["1 1 2 2", "1 1 2 2"]);
    let err = load_sequence::<f32>(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("3 visible") && err.contains("2 ground-truth"), "{err}");
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 2, &["1 1 2 2", "1 1 two 2"]);
    assert!(load_sequence::<f32>(tmp.path()).is_err());
}

#[test]
fn saved_sequences_load_back() {
    let spec = SynthSpec { n_frames: 4, seed: 2, ..SynthSpec::default() };
    let seq: SequenceRecord<f32> = synth_sequence(&spec).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_sequence(&seq, tmp.path()).unwrap();
    let back = load_sequence::<f32>(tmp.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in back.gt.iter().zip(&seq.gt) {
        assert!((a.x - b.x).abs() < 1e-3 && (a.w - b.w).abs() < 1e-3);
    }
    assert!(back.frames[2].rgb.max_abs_diff(&seq.frames[2].rgb) <= 0.5 / 255.0 + 1e-6);
}

// ---------------------------------------------------------------- synthetic

fn centers(seq: &SequenceRecord<f64>) -> Vec<(f64, f64)> {
    seq.gt.iter().map(BBox::center).collect()
}

#[test]
fn linear_motion_has_constant_velocity() {
    let spec = SynthSpec { n_frames: 10, distractors: 0, motion: Motion::Linear, seed: 4, ..SynthSpec::default() };
    let c = centers(&synth_sequence(&spec).unwrap());
    let v = (c[1].0 - c[0].0, c[1].1 - c[0].1);
    assert!(v.0.hypot(v.1) > 0.0);
    for w in c.windows(2) {
        assert!((w[1].0 - w[0].0 - v.0).abs() < 1e-9 && (w[1].1 - w[0].1 - v.1).abs() < 1e-9);
    }
}

fn box_mean(plane: &Tensor<f64>, b: &BBox) -> f64 {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let mut sum = 0.0;
    let mut n = 0;
    for y in b.y.ceil() as usize..((b.y + b.h).floor() as usize).min(h) {
        for x in b.x.ceil() as usize..((b.x + b.w).floor() as usize).min(w) {
            sum += plane.data()[y * w + x];
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn low_light_dims_visible_but_not_thermal() {
    for seed in 0..5 {
        let spec = SynthSpec { n_frames: 3, illumination: Illumination::Low, seed, ..SynthSpec::default() };
        let seq: SequenceRecord<f64> = synth_sequence(&spec).unwrap();
        for (f, b) in seq.frames.iter().zip(&seq.gt) {
            assert!(box_mean(&luma(&f.rgb), b) < 0.2);
            assert!(box_mean(&f.rgb.map(|v| v), b) < 0.2);
            assert!(box_mean(&f.thermal, b) > 0.8);
        }
    }
    let bright = SynthSpec { n_frames: 2, illumination: Illumination::Normal, seed: 1, ..SynthSpec::default() };
    let seq: SequenceRecord<f64> = synth_sequence(&bright).unwrap();
    assert!(box_mean(&luma(&seq.frames[0].rgb), &seq.gt[0]) > 0.2);
}

#[test]
fn jump_inserts_one_discontinuity() {
    for seed in 0..5 {
        let spec = SynthSpec { n_frames: 40, motion: Motion::Jump, seed, ..SynthSpec::default() };
        let c = centers(&synth_sequence(&spec).unwrap());
        let steps: Vec<f64> = c.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).collect();
        let big: Vec<usize> = steps.iter().enumerate().filter(|(_, s)| **s >= 8.0).map(|(i, _)| i + 1).collect();
        assert_eq!(big, vec![spec.jump_frame()], "seed {seed}: {steps:?}");
        assert!(steps.iter().filter(|s| **s < 8.0).all(|s| *s <= spec.speed + 1e-9));
    }
}

#[test]
fn sinusoid_stays_in_frame() {
    let spec = SynthSpec { n_frames: 100, motion: Motion::Sinusoid, seed: 3, ..SynthSpec::default() };
    let seq: SequenceRecord<f32> = synth_sequence(&spec).unwrap();
    assert!(seq.gt.iter().all(|b| b.inside(spec.width, spec.height)));
}

#[test]
fn same_seed_same_sequence() {
    let spec = SynthSpec { n_frames: 8, motion: Motion::Sinusoid, seed: 21, ..SynthSpec::default() };
    let a: SequenceRecord<f64> = synth_sequence(&spec).unwrap();
    let b: SequenceRecord<f64> = synth_sequence(&spec).unwrap();
    assert_eq!(a.gt, b.gt);
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert!(x.rgb.data().iter().zip(y.rgb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(x.thermal.data().iter().zip(y.thermal.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let c: SequenceRecord<f64> = synth_sequence(&SynthSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(a.gt, c.gt);
    assert!(synth_sequence::<f32>(&SynthSpec { n_frames: 1, ..SynthSpec::default() }).is_err());
}

// ---------------------------------------------------------------- metrics

#[test]
fn precision_examples() {
    let gt: Vec<BBox> = (0..5).map(|i| BBox::new(i as f64, 3.0, 10.0, 8.0)).collect();
    assert_eq!(precision_rate(&gt, &gt, 5.0).unwrap(), 1.0);
    assert_eq!(precision_rate(&gt, &gt, 0.0).unwrap(), 1.0);
    let off: Vec<BBox> = gt.iter().map(|b| b.translate(6.0, 0.0)).collect();
    assert_eq!(precision_rate(&off, &gt, 5.0).unwrap(), 0.0);
    assert_eq!(precision_rate(&off, &gt, 6.0).unwrap(), 1.0, "the threshold is inclusive");
    assert!(precision_rate(&off[..3], &gt, 5.0).is_err());
    assert!(precision_rate(&[], &[], 5.0).is_err());
}

#[test]
fn success_hand_count() {
    let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 3];
    let pred = vec![
        BBox::new(0.0, 0.0, 10.0, 10.0),
        BBox::new(0.0, 0.0, 10.0, 20.0),
        BBox::new(50.0, 50.0, 10.0, 10.0),
    ];
    assert_eq!(pred[1].iou(&gt[1]), 0.5);
    let (curve, auc) = success_rate(&pred, &gt).unwrap();
    assert_eq!(curve.len(), 21);
    for (i, v) in curve.iter().enumerate() {
        let t = i as f64 / 20.0;
        let count = [1.0, 0.5, 0.0].iter().filter(|&&x| x > t).count() as f64 / 3.0;
        assert_eq!(*v, count, "t = {t}");
    }
    assert_eq!(curve[0], 2.0 / 3.0);
    assert_eq!(curve[10], 1.0 / 3.0);
    assert_eq!(curve[20], 0.0);
    let trapezoid: f64 = curve.windows(2).map(|w| (w[0] + w[1]) / 40.0).sum();
    assert!((auc - trapezoid).abs() < 1e-15);
}

#[test]
fn perfect_and_disjoint_success() {
    let gt: Vec<BBox> = (0..4).map(|i| BBox::new(2.0 * i as f64, 1.0, 6.0, 6.0)).collect();
    let (curve, auc) = success_rate(&gt, &gt).unwrap();
    assert!(curve[..20].iter().all(|v| *v == 1.0));
    assert_eq!(curve[20], 0.0);
    assert!((auc - 0.975).abs() < 1e-12);
    let far: Vec<BBox> = gt.iter().map(|b| b.translate(100.0, 0.0)).collect();
    let (curve, auc) = success_rate(&far, &gt).unwrap();
    assert!(curve.iter().all(|v| *v == 0.0));
    assert_eq!(auc, 0.0);
}

#[test]
fn report_and_curves_serialise() {
    let gt: Vec<BBox> = (0..3).map(|i| BBox::new(i as f64, 0.0, 5.0, 5.0)).collect();
    let rep = MetricsReport::compute(&gt, &gt, 5.0).unwrap();
    assert_eq!((rep.pr_curve.len(), rep.sr_curve.len()), (51, 21));
    assert_eq!(rep.pr_csv().lines().count(), 52);
    assert_eq!(rep.sr_csv().lines().count(), 22);
    let json = serde_json::to_string(&rep).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!((back.pr_curve, back.sr_curve), (rep.pr_curve.clone(), rep.sr_curve.clone()));
    assert!((back.sr_auc - rep.sr_auc).abs() < 1e-12);
}

#[test]
fn result_csv_round_trips() {
    let rows = vec![
        ResultRow { frame: 0, bbox: BBox::new(1.4, 2.6, 10.0, 12.0), confidence: 0.0, branch: Branch::None },
        ResultRow { frame: 1, bbox: BBox::new(3.0, 4.0, 10.0, 12.0), confidence: -1.25, branch: Branch::Flow },
        ResultRow { frame: 2, bbox: BBox::new(3.0, 4.0, 10.0, 12.0), confidence: 2.5, branch: Branch::Refine },
    ];
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("r.csv");
    write_results(&p, &rows).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "frame,x,y,w,h,confidence,branch");
    assert_eq!(text.lines().nth(2).unwrap(), "1,3,4,10,12,-1.250000,flow");
    let back = read_results(&p).unwrap();
    assert_eq!(back[0].bbox, BBox::new(1.0, 3.0, 10.0, 12.0));
    assert_eq!(back[1..], rows[1..]);
}

/// Coordinates on a 1/8 px grid, so translations are exact.
fn arb_track() -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
    let q = |lo: i32, hi: i32| (lo..hi).prop_map(|v| v as f64 / 8.0);
    prop::collection::vec(((q(0, 640), q(0, 640), q(16, 240), q(16, 240)), (q(-120, 120), q(-120, 120), q(-40, 40))), 1..30)
        .prop_map(|v| {
            v.into_iter()
                .map(|((x, y, w, h), (dx, dy, dw))| (BBox::new(x + dx, y + dy, (w + dw).max(1.0), h), BBox::new(x, y, w, h)))
                .unzip()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_ignore_common_translation((pred, gt) in arb_track(), dx in -50i32..50, dy in -50i32..50) {
        let move_all = |v: &[BBox]| v.iter().map(|b| b.translate(dx as f64, dy as f64)).collect::<Vec<_>>();
        let (p2, g2) = (move_all(&pred), move_all(&gt));
        prop_assert_eq!(precision_curve(&pred, &gt).unwrap(), precision_curve(&p2, &g2).unwrap());
        prop_assert_eq!(success_rate(&pred, &gt).unwrap(), success_rate(&p2, &g2).unwrap());
    }

    #[test]
    fn curves_are_monotone_and_bounded((pred, gt) in arb_track()) {
        let pr = precision_curve(&pred, &gt).unwrap();
        prop_assert!(pr.windows(2).all(|w| w[0] <= w[1]));
        let (sr, auc) = success_rate(&pred, &gt).unwrap();
        prop_assert!(sr.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(pr.iter().chain(&sr).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&auc));
    }
}
