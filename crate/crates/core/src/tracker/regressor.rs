use nalgebra::{DMatrix, DVector};

use super::{BBox, TrackError};
use crate::tensor::kernels::gemm;

/// Ridge regression from RoI features to box deltas
/// `(dx, dy, dw, dh) = ((gx - px)/pw, (gy - py)/ph, ln(gw/pw), ln(gh/ph))`
/// on box centers and sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegressor {
    dim: usize,
    /// `[dim, 4]` row-major.
    weights: Vec<f64>,
    bias: [f64; 4],
    mean: Vec<f64>,
}

pub fn box_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.w,
        (ty - fy) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

pub fn apply_deltas(b: &BBox, d: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    BBox::from_center(cx + d[0] * b.w, cy + d[1] * b.h, b.w * d[2].exp(), b.h * d[3].exp())
}

impl BoxRegressor {
    /// Predicts zero deltas for every input.
    pub fn zero(dim: usize) -> Self {
        BoxRegressor {
            dim,
            weights: vec![0.0; dim * 4],
            bias: [0.0; 4],
            mean: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fits on `features[N,dim]` (row-major) of boxes `boxes` toward `gt`.
    /// Solved in the dual, `W = Xᵀ (X Xᵀ + λI)⁻¹ Y`, on centred data.
    pub fn fit(features: &[f64], boxes: &[BBox], gt: &BBox, lambda: f64) -> Result<Self, TrackError> {
        let n = boxes.len();
        if n == 0 || !features.len().is_multiple_of(n) {
            return Err(TrackError::Regressor(format!(
                "{} feature values for {n} boxes",
                features.len()
            )));
        }
        let dim = features.len() / n;
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let xc: Vec<f64> = features
            .chunks(dim)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        let targets: Vec<[f64; 4]> = boxes.iter().map(|b| box_deltas(b, gt)).collect();
        let mut bias = [0.0; 4];
        for t in &targets {
            for k in 0..4 {
                bias[k] += t[k] / n as f64;
            }
        }
        let mut gram = vec![0.0; n * n];
        gemm(false, true, n, n, dim, &xc, &xc, &mut gram, false);
        let mut k = DMatrix::from_row_slice(n, n, &gram);
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let chol = k
            .cholesky()
            .ok_or_else(|| TrackError::Regressor("kernel matrix is not positive definite".into()))?;
        let mut alpha = vec![0.0; n * 4];
        for c in 0..4 {
            let y = DVector::from_iterator(n, targets.iter().map(|t| t[c] - bias[c]));
            let a = chol.solve(&y);
            for i in 0..n {
                alpha[i * 4 + c] = a[i];
            }
        }
        let mut weights = vec![0.0; dim * 4];
        gemm(true, false, dim, 4, n, &xc, &alpha, &mut weights, false);
        Ok(BoxRegressor {
            dim,
            weights,
            bias,
            mean,
        })
    }

    pub fn deltas(&self, feature: &[f64]) -> [f64; 4] {
        let mut d = self.bias;
        for (i, (v, m)) in feature.iter().zip(&self.mean).enumerate() {
            let x = v - m;
            if x != 0.0 {
                for (k, dk) in d.iter_mut().enumerate() {
                    *dk += x * self.weights[i * 4 + k];
                }
            }
        }
        d
    }

    pub fn predict(&self, feature: &[f64], b: &BBox) -> BBox {
        apply_deltas(b, self.deltas(feature))
    }
}
