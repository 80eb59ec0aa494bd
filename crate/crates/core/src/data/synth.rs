use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::Sequence;
use crate::bbox::{BBox, Frame};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Recipe for a synthetic sequence. The target is a two-colour checkerboard
/// rectangle whose width and height oscillate independently; distractors are
/// solid rectangles of similar size. Every object moves at constant velocity
/// plus bounded per-frame jitter and bounces off the frame border, so the
/// target always stays fully inside the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per-frame positional jitter bound, pixels.
    pub jitter: f64,
    /// Relative amplitude of the target's size oscillation.
    pub scale_amplitude: f64,
    /// Oscillation period, frames.
    pub scale_period: f64,
    pub distractor_count: usize,
    /// Static grey bar drawn over everything.
    pub occluder: bool,
    pub checker_cell: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            frame_count: 60,
            width: 160,
            height: 120,
            min_size: 14.0,
            max_size: 20.0,
            min_speed: 0.8,
            max_speed: 2.0,
            jitter: 0.5,
            scale_amplitude: 0.2,
            scale_period: 40.0,
            distractor_count: 2,
            occluder: false,
            checker_cell: 4,
        }
    }
}

/// Center-based moving rectangle.
struct Mover {
    cx: f64,
    cy: f64,
    base_w: f64,
    base_h: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    /// Size oscillation phases for width and height.
    phase: [f64; 2],
}

impl Mover {
    fn spawn(spec: &SynthSpec, rng: &mut Rng) -> Mover {
        let w = rng.uniform(spec.min_size, spec.max_size).round();
        let h = rng.uniform(spec.min_size, spec.max_size).round();
        let speed = rng.uniform(spec.min_speed, spec.max_speed);
        let angle = rng.uniform(0.0, TAU);
        let phase = [rng.uniform(0.0, TAU), rng.uniform(0.0, TAU)];
        let mut m = Mover { cx: 0.0, cy: 0.0, base_w: w, base_h: h, w, h, vx: speed * angle.cos(), vy: speed * angle.sin(), phase };
        m.resize(spec, 0.0, 0.0);
        let (hw, hh) = (m.w / 2.0, m.h / 2.0);
        m.cx = rng.uniform(hw + 1.0, spec.width as f64 - hw - 1.0);
        m.cy = rng.uniform(hh + 1.0, spec.height as f64 - hh - 1.0);
        m
    }

    fn resize(&mut self, spec: &SynthSpec, amplitude: f64, t: f64) {
        let wave = |phase: f64| 1.0 + amplitude * (TAU * t / spec.scale_period + phase).sin();
        self.w = self.base_w * wave(self.phase[0]);
        self.h = self.base_h * wave(self.phase[1]);
    }

    fn step(&mut self, spec: &SynthSpec, amplitude: f64, t: f64, rng: &mut Rng) {
        self.resize(spec, amplitude, t);
        let jx = rng.uniform(-spec.jitter, spec.jitter);
        let jy = rng.uniform(-spec.jitter, spec.jitter);
        (self.cx, self.vx) = bounce(self.cx + self.vx + jx, self.vx, self.w / 2.0, spec.width as f64 - self.w / 2.0);
        (self.cy, self.vy) = bounce(self.cy + self.vy + jy, self.vy, self.h / 2.0, spec.height as f64 - self.h / 2.0);
    }

    fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    /// Pixels whose centre lies inside the box.
    fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5 - self.x0(), py as f64 + 0.5 - self.y0());
        x >= 0.0 && x < self.w && y >= 0.0 && y < self.h
    }
}

/// Reflect a coordinate into `[lo, hi]`, flipping the velocity on contact.
fn bounce(pos: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if pos < lo {
        ((2.0 * lo - pos).min(hi), v.abs())
    } else if pos > hi {
        ((2.0 * hi - pos).max(lo), -v.abs())
    } else {
        (pos, v)
    }
}

fn color(rng: &mut Rng) -> [u8; 3] {
    [0; 3].map(|_| rng.below(256) as u8)
}

pub fn synth_sequence(spec: &SynthSpec) -> Result<Sequence> {
    if spec.frame_count < 2 {
        return Err(Error::Input(format!("a sequence needs at least 2 frames, got {}", spec.frame_count)));
    }
    if !(spec.min_size >= 2.0 && spec.max_size >= spec.min_size) {
        return Err(Error::Input("object sizes must satisfy 2 ≤ min_size ≤ max_size".into()));
    }
    if !(0.0..0.5).contains(&spec.scale_amplitude) || !(spec.scale_period > 0.0) {
        return Err(Error::Input("scale_amplitude must lie in [0, 0.5) and scale_period be positive".into()));
    }
    if spec.max_size * (1.0 + spec.scale_amplitude) + 2.0 >= spec.width.min(spec.height) as f64 || spec.checker_cell == 0 {
        return Err(Error::Input("frame too small for the objects, or zero checker cell".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let (w, h) = (spec.width, spec.height);

    let bg = [color(&mut rng), color(&mut rng)];
    let mut noise_rng = rng.fork(1);
    let noise: Vec<i16> = (0..w * h * 3).map(|_| noise_rng.below(25) as i16 - 12).collect();

    let target_colors = {
        let a = color(&mut rng);
        [a, a.map(|c| 255 - c)]
    };
    let mut target = Mover::spawn(spec, &mut rng);
    let mut distractors: Vec<(Mover, [u8; 3])> =
        (0..spec.distractor_count).map(|_| (Mover::spawn(spec, &mut rng), color(&mut rng))).collect();
    let occluder_x = rng.below(w - 6);

    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut gt = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        if t > 0 {
            target.step(spec, spec.scale_amplitude, t as f64, &mut rng);
            for (d, _) in &mut distractors {
                d.step(spec, 0.0, t as f64, &mut rng);
            }
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let a = y as f64 / (h - 1) as f64;
            for x in 0..w {
                let px = if target.covers(x, y) {
                    let cell = spec.checker_cell as f64;
                    let (u, v) = (((x as f64 + 0.5 - target.x0()) / cell) as usize, ((y as f64 + 0.5 - target.y0()) / cell) as usize);
                    target_colors[(u + v) % 2]
                } else if let Some((_, c)) = distractors.iter().rev().find(|(d, _)| d.covers(x, y)) {
                    *c
                } else {
                    let i = 3 * (y * w + x);
                    [0, 1, 2].map(|c| {
                        let base = (1.0 - a) * bg[0][c] as f64 + a * bg[1][c] as f64;
                        (base.round() as i16 + noise[i + c]).clamp(0, 255) as u8
                    })
                };
                let px = if spec.occluder && (occluder_x..occluder_x + 6).contains(&x) { [128; 3] } else { px };
                data.extend_from_slice(&px);
            }
        }
        frames.push(RgbImage::new(w, h, data)?);
        gt.push(BBox::new(target.cx, target.cy, target.w, target.h, Frame::Pixel));
    }
    Ok(Sequence { name: format!("synth_{}", spec.seed), frames, gt })
}
