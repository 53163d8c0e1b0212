//! Registered RGB/thermal frame pairs and 8-bit image I/O.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("rgb must be [3,H,W] and thermal [1,H,W] of equal size, got {rgb:?} and {thermal:?}")]
    Geometry { rgb: Vec<usize>, thermal: Vec<usize> },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// One time step: registered visible and thermal images, plus the fused X
/// modality once it has been generated. All channels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair<R> {
    pub rgb: Tensor<R>,
    pub thermal: Tensor<R>,
    pub x_modality: Option<Tensor<R>>,
}

impl<R: Real> FramePair<R> {
    /// Validates geometry and clamps every channel into `[0, 1]`.
    pub fn new(rgb: Tensor<R>, thermal: Tensor<R>) -> Result<Self, FrameError> {
        let ok = matches!((rgb.shape(), thermal.shape()),
            ([3, h, w], [1, h2, w2]) if h == h2 && w == w2 && *h > 0 && *w > 0);
        if !ok {
            return Err(FrameError::Geometry {
                rgb: rgb.shape().to_vec(),
                thermal: thermal.shape().to_vec(),
            });
        }
        Ok(FramePair {
            rgb: clamp01(&rgb),
            thermal: clamp01(&thermal),
            x_modality: None,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    /// Luminance used by optical flow: the X modality when present, else RGB.
    pub fn flow_luma(&self) -> Tensor<R> {
        luma(self.x_modality.as_ref().unwrap_or(&self.rgb))
    }

    pub fn cast<S: Real>(&self) -> FramePair<S> {
        FramePair {
            rgb: self.rgb.cast(),
            thermal: self.thermal.cast(),
            x_modality: self.x_modality.as_ref().map(Tensor::cast),
        }
    }
}

pub fn clamp01<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    t.map(|v| v.max(R::zero()).min(R::one()))
}

/// BT.601 luma of a `[3,H,W]` image as `[1,H,W]`.
pub fn luma<R: Real>(rgb: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let n = h * w;
    let d = rgb.data();
    let (wr, wg, wb) = (R::of(0.299), R::of(0.587), R::of(0.114));
    Tensor::from_fn([1, h, w], |i| wr * d[i] + wg * d[n + i] + wb * d[2 * n + i])
}

/// Repeats a `[1,H,W]` plane into `[3,H,W]`.
pub fn gray_to_rgb<R: Real>(g: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (g.shape()[1], g.shape()[2]);
    let n = h * w;
    let d = g.data();
    Tensor::from_fn([3, h, w], |i| d[i % n])
}

fn to_u8<R: Real>(v: R) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_image<R: Real>(t: &Tensor<R>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let n = h * w;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[n + i]), to_u8(d[2 * n + i])])
    })
}

pub fn gray_to_image<R: Real>(t: &Tensor<R>) -> GrayImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(d[y as usize * w + x as usize])])
    })
}

pub fn image_to_rgb<R: Real>(img: &RgbImage) -> Tensor<R> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        R::of(raw[p * 3 + c] as f64 / 255.0)
    })
}

pub fn image_to_gray<R: Real>(img: &GrayImage) -> Tensor<R> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, h, w], |i| R::of(raw[i] as f64 / 255.0))
}

pub fn read_rgb<R: Real>(path: &Path) -> Result<Tensor<R>, FrameError> {
    let img = image::open(path).map_err(|source| FrameError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(image_to_rgb(&img.to_rgb8()))
}

pub fn read_gray<R: Real>(path: &Path) -> Result<Tensor<R>, FrameError> {
    let img = image::open(path).map_err(|source| FrameError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(image_to_gray(&img.to_luma8()))
}

pub fn save_png<R: Real>(t: &Tensor<R>, path: &Path) -> Result<(), FrameError> {
    let res = match t.shape()[0] {
        3 => rgb_to_image(t).save(path),
        _ => gray_to_image(t).save(path),
    };
    res.map_err(|source| FrameError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Min-max normalised single-plane heat map as an 8-bit image.
pub fn heatmap_image<R: Real>(plane: &Tensor<R>) -> GrayImage {
    let (lo, hi) = plane
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm = plane.map(|v| R::of((v.as_f64() - lo) / span));
    gray_to_image(&norm)
}
