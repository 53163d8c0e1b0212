use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Rescales about the center; `sx`, `sy` multiply width and height.
    pub fn rescale(&self, sx: f64, sy: f64) -> Self {
        if sx == 1.0 && sy == 1.0 {
            return *self;
        }
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.w * sx, self.h * sy)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (a, b) = (self.center(), other.center());
        (a.0 - b.0).hypot(a.1 - b.1)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Shrinks the size to fit a `width`×`height` frame and shifts it inside.
    pub fn clamp_to(&self, width: usize, height: usize) -> Self {
        let (fw, fh) = (width as f64, height as f64);
        let w = self.w.clamp(1.0, fw);
        let h = self.h.clamp(1.0, fh);
        let (cx, cy) = self.center();
        let x = (cx - w / 2.0).clamp(0.0, fw - w);
        let y = (cy - h / 2.0).clamp(0.0, fh - h);
        BBox::new(x, y, w, h)
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width as f64 && self.bottom() <= height as f64
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Component-wise mean of boxes.
pub fn mean_box(boxes: &[BBox]) -> BBox {
    let n = boxes.len().max(1) as f64;
    let s = boxes.iter().fold([0.0; 4], |mut acc, b| {
        acc[0] += b.x;
        acc[1] += b.y;
        acc[2] += b.w;
        acc[3] += b.h;
        acc
    });
    BBox::new(s[0] / n, s[1] / n, s[2] / n, s[3] / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 2.0, 2.0)), 0.0);
        assert!((a.iou(&BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn clamp_keeps_box_inside() {
        let b = BBox::new(-5.0, 60.0, 10.0, 10.0).clamp_to(64, 64);
        assert!(b.inside(64, 64));
        assert_eq!((b.w, b.h), (10.0, 10.0));
    }

    #[test]
    fn rescale_keeps_center() {
        let b = BBox::new(3.0, 4.0, 10.0, 6.0);
        assert_eq!(b.rescale(1.5, 0.5).center(), b.center());
    }
}
