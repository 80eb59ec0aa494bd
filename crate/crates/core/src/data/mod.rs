//! Sequences, synthetic data, file formats and tracking metrics.

mod image;
mod io;
mod metrics;
mod synth;

pub use image::{write_pgm, RgbImage};
pub use io::{frame_file_name, read_boxes, read_sequence, write_boxes, write_sequence, GROUNDTRUTH_FILE};
pub use metrics::{compute_metrics, MetricReport};
pub use synth::{synth_sequence, SynthSpec};

use crate::bbox::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    /// Pixel-frame target box per frame.
    pub gt: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests;
