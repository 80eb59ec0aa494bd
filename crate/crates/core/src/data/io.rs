use std::fs;
use std::path::Path;

use super::image::RgbImage;
use super::Sequence;
use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// One `x,y,w,h` line per box, pixels, top-left origin.
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let text: String = boxes
        .iter()
        .map(|b| {
            let [x, y, w, h] = b.to_xywh();
            format!("{x},{y},{w},{h}\n")
        })
        .collect();
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_error = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(parse_error(i + 1, format!("expected 4 comma-separated values, found {}", fields.len())));
            }
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| parse_error(i + 1, format!("{f:?} is not a number")))?;
            }
            let b = BBox::pixel_xywh(v[0], v[1], v[2], v[3]);
            b.validate().map_err(|e| parse_error(i + 1, e.to_string()))?;
            Ok(b)
        })
        .collect()
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.write_ppm(&dir.join(frame_file_name(i)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH_FILE), &seq.gt)
}

/// Reads `frame_000000.ppm, frame_000001.ppm, …` up to the first gap and
/// pairs them with the annotation lines.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(RgbImage::read_ppm(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Input(format!("no {} in {}", frame_file_name(0), dir.display())));
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let gt = read_boxes(&gt_path)?;
    if gt.len() != frames.len() {
        let line = gt.len().min(frames.len()) + 1;
        let msg = if gt.len() < frames.len() {
            format!("missing annotation for frame {}", gt.len())
        } else {
            format!("annotation without a frame ({} frames)", frames.len())
        };
        return Err(Error::Parse { path: gt_path, line, msg });
    }
    let name = dir.file_name().map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Sequence { name, frames, gt })
}
