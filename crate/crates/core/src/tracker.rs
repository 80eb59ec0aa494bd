//! Online tracking: template initialization, search cropping, window
//! penalty and mapping predictions back to the image.

use crate::attention::AttentionRecord;
use crate::bbox::{BBox, Frame};
use crate::config::{Config, STRIDE};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::fusion::GridFeatures;
use crate::model::{embed, forward_features, fusion_options, ModelParams};
use crate::params::bind_constants;
use crate::tensor::{Graph, Tensor};

/// Square image window `[x0, x0 + side) × [y0, y0 + side)` resampled to
/// `out × out` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    pub fn centered(cx: f64, cy: f64, side: f64, out: usize) -> Self {
        CropWindow { x0: cx - side / 2.0, y0: cy - side / 2.0, side, out }
    }

    /// Normalized crop box to image pixels.
    pub fn to_pixel(&self, b: &BBox) -> BBox {
        BBox::new(self.x0 + b.cx * self.side, self.y0 + b.cy * self.side, b.w * self.side, b.h * self.side, Frame::Pixel)
    }

    /// Image pixel box to normalized crop coordinates (not range checked).
    pub fn to_normalized(&self, b: &BBox) -> BBox {
        BBox::normalized((b.cx - self.x0) / self.side, (b.cy - self.y0) / self.side, b.w / self.side, b.h / self.side)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// `3×out×out`, values in [0, 1].
    pub patch: Tensor,
    pub window: CropWindow,
    /// Output pixels whose sample point fell outside the image.
    pub padded: usize,
}

/// Bilinear crop of a square window; samples outside the image take the
/// per-channel image mean.
pub fn crop_patch(image: &RgbImage, cx: f64, cy: f64, side: f64, out: usize) -> Result<Crop> {
    if !(side > 0.0 && side.is_finite() && cx.is_finite() && cy.is_finite()) || out == 0 {
        return Err(Error::Input(format!("invalid crop: center ({cx}, {cy}), side {side}, out {out}")));
    }
    let window = CropWindow::centered(cx, cy, side, out);
    let (w, h) = (image.width(), image.height());
    let mean = image.channel_means();
    let scale = side / out as f64;
    let mut data = vec![0.0; 3 * out * out];
    let mut padded = 0;
    for v in 0..out {
        let sy = window.y0 + (v as f64 + 0.5) * scale - 0.5;
        for u in 0..out {
            let sx = window.x0 + (u as f64 + 0.5) * scale - 0.5;
            let rgb = if sx < -0.5 || sx >= w as f64 - 0.5 || sy < -0.5 || sy >= h as f64 - 0.5 {
                padded += 1;
                mean
            } else {
                bilinear(image, sx, sy)
            };
            for c in 0..3 {
                data[c * out * out + v * out + u] = rgb[c] / 255.0;
            }
        }
    }
    Ok(Crop { patch: Tensor::new(&[3, out, out], data)?, window, padded })
}

fn bilinear(image: &RgbImage, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = (image.width(), image.height());
    let (fx, fy) = (sx.floor(), sy.floor());
    let (ax, ay) = (sx - fx, sy - fy);
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clampi(fx, w), clampi(fx + 1.0, w));
    let (y0, y1) = (clampi(fy, h), clampi(fy + 1.0, h));
    let (p00, p10, p01, p11) = (image.pixel(x0, y0), image.pixel(x1, y0), image.pixel(x0, y1), image.pixel(x1, y1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        // skip zero-weight taps so integer positions reproduce pixels exactly
        let mut acc = (1.0 - ax) * (1.0 - ay) * p00[c] as f64;
        if ax > 0.0 {
            acc += ax * (1.0 - ay) * p10[c] as f64;
        }
        if ay > 0.0 {
            acc += (1.0 - ax) * ay * p01[c] as f64;
        }
        if ax > 0.0 && ay > 0.0 {
            acc += ax * ay * p11[c] as f64;
        }
        out[c] = acc;
    }
    out
}

/// Symmetric Hann window `0.5·(1 − cos(2πn/(N−1)))`, `n = 0..N`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())).collect()
}

/// `(1 − w)·score + w·hann_outer` over a row-major `grid×grid` score map.
pub fn window_penalty(scores: &[f64], grid: usize, w: f64) -> Result<Vec<f64>> {
    if scores.len() != grid * grid {
        return Err(Error::Input(format!("{} scores for a {grid}×{grid} grid", scores.len())));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Input(format!("window weight {w} outside [0, 1]")));
    }
    let win = hann(grid);
    Ok(scores.iter().enumerate().map(|(i, s)| (1.0 - w) * s + w * win[i / grid] * win[i % grid]).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Clip to the image, keeping at least one pixel in each dimension.
pub fn clip_box(b: &BBox, width: usize, height: usize) -> BBox {
    let span = |lo: f64, hi: f64, n: usize| {
        let n = n as f64;
        let (mut lo, mut hi) = (lo.clamp(0.0, n), hi.clamp(0.0, n));
        if hi - lo < 1.0 {
            lo = lo.min(n - 1.0);
            hi = lo + 1.0;
        }
        (lo, hi)
    };
    let (x0, x1) = span(b.x0(), b.x1(), width);
    let (y0, y1) = span(b.y0(), b.y1(), height);
    BBox::from_corners(x0, y0, x1, y1, Frame::Pixel)
}

/// Square crop side `factor·√(w·h)` around a target box.
pub fn crop_side(factor: f64, b: &BBox) -> f64 {
    factor * (b.w * b.h).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    template: Tensor,
    template_grid: (usize, usize),
    prev_box: BBox,
    last_window: Option<CropWindow>,
}

impl TrackState {
    /// Template features, `(H_z·W_z)×d`, fixed at initialization.
    pub fn template_features(&self) -> &Tensor {
        &self.template
    }

    pub fn prev_box(&self) -> BBox {
        self.prev_box
    }

    pub fn last_window(&self) -> Option<CropWindow> {
        self.last_window
    }
}

/// Crops the template around `init_box` (side `template_factor·√(wh)`) and
/// stores its features.
pub fn init_state(cfg: &Config, params: &ModelParams, image: &RgbImage, init_box: &BBox) -> Result<TrackState> {
    init_box.validate()?;
    if init_box.frame != Frame::Pixel {
        return Err(Error::Input("initial box must be in pixels".into()));
    }
    let t = &cfg.tracker;
    let side = crop_side(t.template_factor, init_box);
    let crop = crop_patch(image, init_box.cx, init_box.cy, side, t.template_size)?;
    let mut g = Graph::new();
    let backbone = bind_constants(&mut g, &params.backbone);
    let patch = g.constant(crop.patch);
    let grid = embed(&mut g, &backbone, patch)?;
    Ok(TrackState {
        template: g.value(grid.features).clone(),
        template_grid: (grid.height, grid.width),
        prev_box: *init_box,
        last_window: None,
    })
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub bbox: BBox,
    /// Raw classification scores, row-major over the search grid.
    pub scores: Vec<f64>,
    pub selected: usize,
    pub window: CropWindow,
    pub records: Vec<AttentionRecord>,
}

/// Locates the target in `image` and updates the state.
pub fn track_frame(
    state: &mut TrackState,
    cfg: &Config,
    params: &ModelParams,
    image: &RgbImage,
    record: bool,
) -> Result<FrameResult> {
    let t = &cfg.tracker;
    let prev = state.prev_box;
    let side = crop_side(t.search_factor, &prev);
    let crop = crop_patch(image, prev.cx, prev.cy, side, t.search_size)?;

    let mut g = Graph::new();
    let pid = bind_constants(&mut g, params);
    let template = GridFeatures {
        features: g.constant(state.template.clone()),
        height: state.template_grid.0,
        width: state.template_grid.1,
    };
    let patch = g.constant(crop.patch);
    let out = forward_features(&mut g, &pid, template, patch, &fusion_options(&cfg.model), record)?;
    let pred = out.head.prediction(&g);
    let (gh, gw) = out.search_grid;
    if gh != gw || gh != t.search_size / STRIDE {
        return Err(Error::Contract(format!("search grid {gh}×{gw} is not square")));
    }
    let penalized = window_penalty(&pred.scores, gh, t.window_weight)?;
    let selected = argmax(&penalized);
    let bbox = clip_box(&crop.window.to_pixel(&pred.bbox(selected)), image.width(), image.height());
    state.prev_box = bbox;
    state.last_window = Some(crop.window);
    Ok(FrameResult { bbox, scores: pred.scores, selected, window: crop.window, records: out.records })
}

/// Owns the per-sequence state and refuses to track before `init`.
pub struct Tracker<'a> {
    cfg: &'a Config,
    params: &'a ModelParams,
    state: Option<TrackState>,
}

impl<'a> Tracker<'a> {
    pub fn new(cfg: &'a Config, params: &'a ModelParams) -> Self {
        Tracker { cfg, params, state: None }
    }

    pub fn init(&mut self, image: &RgbImage, init_box: &BBox) -> Result<()> {
        self.state = Some(init_state(self.cfg, self.params, image, init_box)?);
        Ok(())
    }

    pub fn track(&mut self, image: &RgbImage, record: bool) -> Result<FrameResult> {
        let state = self.state.as_mut().ok_or_else(|| Error::Contract("tracker used before init".into()))?;
        track_frame(state, self.cfg, self.params, image, record)
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.state.as_ref()
    }
}
