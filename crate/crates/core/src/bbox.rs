//! Axis-aligned boxes and overlap measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Image pixels, origin at the top-left corner.
    Pixel,
    /// Fractions of a search region side, in `[0, 1]`.
    Normalized,
}

/// Center/size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame: Frame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: Frame) -> Self {
        BBox { cx, cy, w, h, frame }
    }

    pub fn normalized(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Frame::Normalized)
    }

    /// Pixel box from its top-left corner and size.
    pub fn pixel_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h, Frame::Pixel)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, frame: Frame) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, frame)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Top-left `x, y, w, h`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0(), self.y0(), self.w, self.h]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Positive finite size, and for normalized boxes all fields in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let fields = self.to_array();
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite box {fields:?}")));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Input(format!("degenerate box: w = {}, h = {}", self.w, self.h)));
        }
        if self.frame == Frame::Normalized && fields.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("normalized box {fields:?} leaves [0, 1]")));
        }
        Ok(())
    }
}

fn positive_area(b: &BBox) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.area().is_finite() {
        return Err(Error::Input(format!("box needs positive area: w = {}, h = {}", b.w, b.h)));
    }
    Ok(())
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    iw * ih
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    positive_area(a)?;
    positive_area(b)?;
    let inter = intersection(a, b);
    Ok(inter / (a.area() + b.area() - inter))
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing box. Lies in `(−1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    positive_area(a)?;
    positive_area(b)?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enc = (a.x1().max(b.x1()) - a.x0().min(b.x0())) * (a.y1().max(b.y1()) - a.y0().min(b.y0()));
    Ok(inter / union - (enc - union) / enc)
}
