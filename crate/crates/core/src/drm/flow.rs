//! Sparse pyramidal Lucas-Kanade optical flow.

use crate::tensor::{Real, Tensor};

use super::DrmError;

/// Binomial blur taps.
const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Minimum side of the coarsest level.
pub const MIN_LEVEL_SIDE: usize = 8;

/// A single-channel image plane in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_tensor<R: Real>(t: &Tensor<R>) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Plane {
            width: w,
            height: h,
            data: t.data()[..h * w].iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::from_fn([1, self.height, self.width], |i| R::of(self.data[i]))
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with replicated borders.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.at(xi, yi) * (1.0 - fx) + self.at(xi + 1, yi) * fx;
        let bot = self.at(xi, yi + 1) * (1.0 - fx) + self.at(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn blur(&self) -> Plane {
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = TAPS
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * self.at(x as isize + k as isize - 2, y as isize))
                    .sum();
            }
        }
        let rows = Plane { width: w, height: h, data: tmp };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = TAPS
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * rows.at(x as isize, y as isize + k as isize - 2))
                    .sum();
            }
        }
        Plane { width: w, height: h, data: out }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.width.div_ceil(2), self.height.div_ceil(2));
        let data = (0..w * h)
            .map(|i| self.at(2 * (i % w) as isize, 2 * (i / w) as isize))
            .collect();
        Plane { width: w, height: h, data }
    }
}

/// Blurred image at successively halved resolutions; level 0 is full size.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPyramid {
    pub levels: Vec<Plane>,
}

impl FlowPyramid {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

pub fn build_pyramid<R: Real>(image: &Tensor<R>, n_levels: usize) -> Result<FlowPyramid, DrmError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(DrmError::Geometry(format!("expected [1,h,w], got {s:?}")));
    }
    if n_levels == 0 {
        return Err(DrmError::Geometry("a pyramid needs at least one level".into()));
    }
    let need = (1usize << (n_levels - 1)) * MIN_LEVEL_SIDE;
    if s[1] < need || s[2] < need {
        return Err(DrmError::Geometry(format!(
            "{}x{} is too small for {n_levels} levels (need {need}x{need})",
            s[2], s[1]
        )));
    }
    let mut levels = vec![Plane::from_tensor(image).blur()];
    for _ in 1..n_levels {
        let next = levels.last().expect("non-empty").downsample().blur();
        levels.push(next);
    }
    Ok(FlowPyramid { levels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    pub window: usize,
    pub iters: usize,
    pub det_eps: f64,
    pub max_flow: f64,
}

/// Flow estimate at one seed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub kept: bool,
}

/// Below this, a window residual counts as an exact match.
const EXACT: f64 = 1e-12;

fn track_point(prev: &FlowPyramid, curr: &FlowPyramid, x: f64, y: f64, p: &LkParams) -> Option<(f64, f64)> {
    let r = (p.window / 2) as isize;
    let (mut gx, mut gy) = (0.0, 0.0);
    for level in (0..prev.n_levels()).rev() {
        let scale = (1u32 << level) as f64;
        let (px, py) = (x / scale, y / scale);
        let i_img = &prev.levels[level];
        let j_img = &curr.levels[level];
        let mut grads = Vec::with_capacity(p.window * p.window);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for oy in -r..=r {
            for ox in -r..=r {
                let (sx, sy) = (px + ox as f64, py + oy as f64);
                let ix = 0.5 * (i_img.sample(sx + 1.0, sy) - i_img.sample(sx - 1.0, sy));
                let iy = 0.5 * (i_img.sample(sx, sy + 1.0) - i_img.sample(sx, sy - 1.0));
                a += ix * ix;
                b += ix * iy;
                c += iy * iy;
                grads.push((sx, sy, ix, iy, i_img.sample(sx, sy)));
            }
        }
        let det = a * c - b * b;
        let (mut vx, mut vy) = (0.0, 0.0);
        if det < p.det_eps {
            // Textureless window: usable only if it already matches exactly.
            let residual: f64 = grads
                .iter()
                .map(|&(sx, sy, _, _, iv)| (iv - j_img.sample(sx + gx, sy + gy)).abs())
                .sum();
            if residual > EXACT {
                return None;
            }
        } else {
            for _ in 0..p.iters {
                let (mut ex, mut ey) = (0.0, 0.0);
                for &(sx, sy, ix, iy, iv) in &grads {
                    let diff = iv - j_img.sample(sx + gx + vx, sy + gy + vy);
                    ex += diff * ix;
                    ey += diff * iy;
                }
                let ux = (c * ex - b * ey) / det;
                let uy = (a * ey - b * ex) / det;
                vx += ux;
                vy += uy;
                if ux.hypot(uy) < 0.01 {
                    break;
                }
            }
        }
        if level == 0 {
            gx += vx;
            gy += vy;
        } else {
            gx = 2.0 * (gx + vx);
            gy = 2.0 * (gy + vy);
        }
    }
    (gx.is_finite() && gy.is_finite() && gx.hypot(gy) <= p.max_flow).then_some((gx, gy))
}

/// Coarse-to-fine iterative flow for each point. Points with a degenerate
/// structure tensor or a displacement above `max_flow` are marked dropped.
pub fn lk_flow(
    prev: &FlowPyramid,
    curr: &FlowPyramid,
    points: &[(f64, f64)],
    params: &LkParams,
) -> Result<Vec<FlowPoint>, DrmError> {
    let same = prev.n_levels() == curr.n_levels()
        && prev
            .levels
            .iter()
            .zip(&curr.levels)
            .all(|(a, b)| (a.width, a.height) == (b.width, b.height));
    if !same {
        return Err(DrmError::Geometry("pyramids differ in geometry".into()));
    }
    if params.window.is_multiple_of(2) {
        return Err(DrmError::Geometry(format!("window {} must be odd", params.window)));
    }
    let out: Vec<FlowPoint> = points
        .iter()
        .map(|&(x, y)| match track_point(prev, curr, x, y, params) {
            Some((dx, dy)) => FlowPoint { x, y, dx, dy, kept: true },
            None => FlowPoint { x, y, dx: 0.0, dy: 0.0, kept: false },
        })
        .collect();
    if !out.iter().any(|p| p.kept) {
        return Err(DrmError::Untrackable(points.len()));
    }
    Ok(out)
}

/// Mean displacement over kept points.
pub fn mean_flow(points: &[FlowPoint]) -> Option<(f64, f64)> {
    let kept: Vec<&FlowPoint> = points.iter().filter(|p| p.kept).collect();
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    Some((
        kept.iter().map(|p| p.dx).sum::<f64>() / n,
        kept.iter().map(|p| p.dy).sum::<f64>() / n,
    ))
}
