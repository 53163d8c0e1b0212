//! RoIAlign over a single `[C,H,W]` feature map.
//!
//! Boxes are `(x, y, w, h)` in image pixels and are mapped to feature
//! coordinates by `spatial_scale` with the half-pixel alignment offset.
//! Each of the `ROI_OUT × ROI_OUT` bins averages `ROI_SAMPLES²` bilinear
//! samples; samples further than one cell outside the map contribute zero.

use super::{shape_err, Real, Result, Tensor};

pub const ROI_OUT: usize = 3;
pub const ROI_SAMPLES: usize = 2;

/// Bilinear taps `(flat index, weight)` for a sample at `(y, x)`.
fn taps(h: usize, w: usize, mut y: f64, mut x: f64) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// Visits every bilinear tap of every bin: `f(bin, flat_index, weight)`,
/// where weights already include the per-bin averaging factor.
fn for_each_tap(h: usize, w: usize, roi: [f64; 4], scale: f64, mut f: impl FnMut(usize, usize, f64)) {
    let [bx, by, bw, bh] = roi;
    let x0 = bx * scale - 0.5;
    let y0 = by * scale - 0.5;
    let bin_w = bw * scale / ROI_OUT as f64;
    let bin_h = bh * scale / ROI_OUT as f64;
    let norm = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
    for py in 0..ROI_OUT {
        for px in 0..ROI_OUT {
            let bin = py * ROI_OUT + px;
            for sy in 0..ROI_SAMPLES {
                let y = y0 + py as f64 * bin_h + (sy as f64 + 0.5) * bin_h / ROI_SAMPLES as f64;
                for sx in 0..ROI_SAMPLES {
                    let x =
                        x0 + px as f64 * bin_w + (sx as f64 + 0.5) * bin_w / ROI_SAMPLES as f64;
                    if let Some(t) = taps(h, w, y, x) {
                        for (idx, wt) in t {
                            f(bin, idx, wt * norm);
                        }
                    }
                }
            }
        }
    }
}

fn feature_dims<R: Real>(feature: &Tensor<R>) -> Result<(usize, usize, usize)> {
    match feature.shape() {
        [c, h, w] if *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        s => Err(shape_err("roi_align", format!("feature must be [C,H,W], got {s:?}"))),
    }
}

/// Pools each box into `[C, 3, 3]`; output shape `[N, C, 3, 3]`.
pub fn roi_align<R: Real>(
    feature: &Tensor<R>,
    boxes: &[[f64; 4]],
    spatial_scale: f64,
) -> Result<Tensor<R>> {
    let (c, h, w) = feature_dims(feature)?;
    let bins = ROI_OUT * ROI_OUT;
    let fd = feature.data();
    let mut out = vec![R::zero(); boxes.len() * c * bins];
    let mut plan: Vec<(usize, usize, R)> = Vec::with_capacity(bins * 16);
    for (n, roi) in boxes.iter().enumerate() {
        plan.clear();
        for_each_tap(h, w, *roi, spatial_scale, |bin, idx, wt| {
            plan.push((bin, idx, R::of(wt)))
        });
        let dst = &mut out[n * c * bins..(n + 1) * c * bins];
        for ch in 0..c {
            let plane = &fd[ch * h * w..(ch + 1) * h * w];
            let cell = &mut dst[ch * bins..(ch + 1) * bins];
            for &(bin, idx, wt) in &plan {
                cell[bin] += plane[idx] * wt;
            }
        }
    }
    Tensor::new([boxes.len(), c, ROI_OUT, ROI_OUT], out)
}

/// Gradient of [`roi_align`] with respect to the feature map.
pub(crate) fn roi_align_backward<R: Real>(
    feature_shape: &[usize],
    boxes: &[[f64; 4]],
    spatial_scale: f64,
    dy: &[R],
) -> Vec<R> {
    let (c, h, w) = (feature_shape[0], feature_shape[1], feature_shape[2]);
    let bins = ROI_OUT * ROI_OUT;
    let mut dx = vec![R::zero(); c * h * w];
    let mut plan: Vec<(usize, usize, R)> = Vec::new();
    for (n, roi) in boxes.iter().enumerate() {
        plan.clear();
        for_each_tap(h, w, *roi, spatial_scale, |bin, idx, wt| {
            plan.push((bin, idx, R::of(wt)))
        });
        let src = &dy[n * c * bins..(n + 1) * c * bins];
        for ch in 0..c {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for &(bin, idx, wt) in &plan {
                plane[idx] += src[ch * bins + bin] * wt;
            }
        }
    }
    dx
}
