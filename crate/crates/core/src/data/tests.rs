use std::fs;

use proptest::prelude::{prop_assert, proptest, ProptestConfig};

use super::*;
use crate::bbox::Frame;
use crate::error::Error;

fn small(seed: u64, distractors: usize) -> SynthSpec {
    SynthSpec { seed, frame_count: 6, distractor_count: distractors, ..SynthSpec::default() }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = synth_sequence(&small(3, 2)).unwrap();
    assert_eq!(a, synth_sequence(&small(3, 2)).unwrap());
    assert_ne!(a.frames, synth_sequence(&small(4, 2)).unwrap().frames);
    assert_eq!(a.len(), 6);
}

#[test]
fn without_distractors_only_the_target_differs_from_background() {
    let spec = small(5, 0);
    let with_target = synth_sequence(&spec).unwrap();
    let bg_only = synth_sequence(&SynthSpec { min_size: 2.0, max_size: 2.0, ..spec.clone() }).unwrap();
    // Pixels outside the target box match a pure background render.
    let (img, gt) = (&with_target.frames[0], with_target.gt[0]);
    let mut changed = 0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let inside = (x as f64 + 0.5) >= gt.x0() && (x as f64 + 0.5) < gt.x1() && (y as f64 + 0.5) >= gt.y0() && (y as f64 + 0.5) < gt.y1();
            if !inside && img.pixel(x, y) != bg_only.frames[0].pixel(x, y) {
                let b = bg_only.gt[0];
                let in_small = (x as f64 + 0.5) >= b.x0() && (x as f64 + 0.5) < b.x1() && (y as f64 + 0.5) >= b.y0() && (y as f64 + 0.5) < b.y1();
                assert!(in_small, "pixel ({x},{y}) changed outside both targets");
                changed += 1;
            }
        }
    }
    assert!(changed <= 4);
}

#[test]
fn synth_rejects_single_frame() {
    assert!(synth_sequence(&SynthSpec { frame_count: 1, ..SynthSpec::default() }).is_err());
}

#[test]
fn sequence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_sequence(&small(9, 1)).unwrap();
    let path = dir.path().join(&seq.name);
    write_sequence(&path, &seq).unwrap();
    assert_eq!(read_sequence(&path).unwrap(), seq);
}

#[test]
fn missing_annotation_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_sequence(&small(9, 0)).unwrap();
    write_sequence(dir.path(), &seq).unwrap();
    let gt_path = dir.path().join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).unwrap();
    let kept: Vec<&str> = text.lines().take(4).collect();
    fs::write(&gt_path, kept.join("\n") + "\n").unwrap();
    match read_sequence(dir.path()) {
        Err(Error::Parse { line: 5, path, .. }) => assert_eq!(path, gt_path),
        other => panic!("expected parse error at line 5, got {other:?}"),
    }
}

#[test]
fn malformed_box_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.txt");
    fs::write(&path, "1,2,3,4\n1,2,x,4\n").unwrap();
    assert!(matches!(read_boxes(&path), Err(Error::Parse { line: 2, .. })));
    fs::write(&path, "1,2,3\n").unwrap();
    assert!(matches!(read_boxes(&path), Err(Error::Parse { line: 1, .. })));
    fs::write(&path, "1,2,0,4\n").unwrap();
    assert!(matches!(read_boxes(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn boxes_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.txt");
    let boxes = vec![BBox::pixel_xywh(0.1, 1.0 / 3.0, 17.25, 1e-3), BBox::pixel_xywh(5.0, 6.0, 7.0, 8.0)];
    write_boxes(&path, &boxes).unwrap();
    let back = read_boxes(&path).unwrap();
    for (a, b) in boxes.iter().zip(&back) {
        assert_eq!(a.to_xywh(), b.to_xywh());
        assert_eq!(b.frame, Frame::Pixel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn synth_gt_stays_inside_the_frame(seed in proptest::prelude::any::<u64>()) {
        let spec = SynthSpec { seed, frame_count: 40, width: 96, height: 80, ..SynthSpec::default() };
        let seq = synth_sequence(&spec).unwrap();
        prop_assert!(seq.gt.len() == seq.frames.len());
        for b in &seq.gt {
            prop_assert!(b.validate().is_ok());
            prop_assert!(b.x0() >= 0.0 && b.y0() >= 0.0);
            prop_assert!(b.x1() <= spec.width as f64 && b.y1() <= spec.height as f64);
        }
    }
}
