use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

use super::*;
use crate::bbox::giou;
use crate::params::bind_constants;
use crate::tensor::finite_diff_check;

fn run_predict(p: &HeadParams, f: &Tensor) -> Prediction {
    let mut g = Graph::new();
    let pid = bind_constants(&mut g, p);
    let fi = g.constant(f.clone());
    predict(&mut g, &pid, fi).unwrap().prediction(&g)
}

fn zero_head(d: usize) -> HeadParams {
    let p = HeadParams::init(d, &mut Rng::new(0));
    p.map_leaves(&mut |t| Tensor::zeros(t.shape()))
}

#[test]
fn one_prediction_per_vector() {
    let mut rng = Rng::new(1);
    let p = HeadParams::init(8, &mut rng);
    let f = Tensor::randn(&[1024, 8], 1.0, &mut rng);
    let pred = run_predict(&p, &f);
    assert_eq!((pred.scores.len(), pred.boxes.len()), (1024, 1024));
    assert!(pred.scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    assert!(pred.boxes.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn zero_head_predicts_halves() {
    let f = Tensor::randn(&[5, 8], 1.0, &mut Rng::new(2));
    let pred = run_predict(&zero_head(8), &f);
    assert!(pred.scores.iter().all(|&s| s == 0.5));
    assert!(pred.boxes.iter().all(|b| *b == [0.5; 4]));
}

#[test]
fn head_matches_manual_composition() {
    let mut rng = Rng::new(3);
    let mut p = HeadParams::init(6, &mut rng);
    p.visit_mut("", &mut |_, t| {
        if t.rank() == 1 {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
    });
    let f = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let pred = run_predict(&p, &f);
    let mlp = |m: &Mlp, row: &[f64]| -> Vec<f64> {
        let mut h = row.to_vec();
        for (li, l) in m.layers.iter().enumerate() {
            let (din, dout) = l.w.dims2();
            let mut next: Vec<f64> = (0..dout).map(|j| (0..din).map(|t| h[t] * l.w.get2(t, j)).sum::<f64>() + l.b.data()[j]).collect();
            if li < 2 {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h
    };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for i in 0..7 {
        assert!((pred.scores[i] - sig(mlp(&p.cls, f.row(i))[0])).abs() < 1e-12);
        for (a, b) in pred.boxes[i].iter().zip(mlp(&p.reg, f.row(i))) {
            assert!((a - sig(b)).abs() < 1e-12);
        }
    }
}

#[test]
fn predict_rejects_wrong_width() {
    let mut g = Graph::new();
    let pid = bind_constants(&mut g, &zero_head(8));
    let f = g.constant(Tensor::zeros(&[3, 6]));
    assert!(matches!(predict(&mut g, &pid, f), Err(Error::Dimension { .. })));
}

#[test]
fn assignment_examples() {
    let full = assign_samples(&BBox::normalized(0.5, 0.5, 1.0, 1.0), 4, 4).unwrap();
    assert_eq!(full.positive_count, 16);

    // Cell centers sit at 0.125, 0.375, 0.625, 0.875.
    let corner = assign_samples(&BBox::from_corners(0.0, 0.0, 0.5, 0.5, Frame::Normalized), 4, 4).unwrap();
    assert_eq!(corner.positives(), vec![0, 1, 4, 5]);
    assert_eq!(corner.positive_count, 4);

    // Tiny box around the center of cell (row 2, col 3) misses every center but that one is nearest.
    let tiny = assign_samples(&BBox::normalized(3.5 / 4.0 + 0.01, 2.5 / 4.0 - 0.02, 0.01, 0.01), 4, 4).unwrap();
    assert_eq!(tiny.positives(), vec![2 * 4 + 3]);

    assert!(matches!(assign_samples(&BBox::normalized(0.5, 0.5, 0.0, 0.2), 4, 4), Err(Error::Input(_))));
    assert!(assign_samples(&BBox::pixel_xywh(0.0, 0.0, 1.0, 1.0), 4, 4).is_err());
}

fn pred_from(scores: Vec<f64>, boxes: Vec<[f64; 4]>) -> Prediction {
    Prediction { scores, boxes }
}

#[test]
fn classification_loss_analytic_cases() {
    let cfg = LossConfig::default();
    let gt = BBox::normalized(0.5, 0.5, 1.0, 1.0);
    let pos = SampleAssignment { labels: vec![1], positive_count: 1 };
    let (cls, _) = loss_values(&pred_from(vec![0.5], vec![[0.5, 0.5, 1.0, 1.0]]), &gt, &pos, &cfg).unwrap();
    assert!((cls - 2f64.ln()).abs() < 1e-12);

    let neg = SampleAssignment { labels: vec![0, 1], positive_count: 1 };
    let (cls, _) = loss_values(&pred_from(vec![0.5, 1.0], vec![[0.5; 4]; 2]), &gt, &neg, &cfg).unwrap();
    // the positive contributes −ln(1 − 1e-7) from clamping
    assert!((cls - 2f64.ln() / 16.0 - (-(1.0 - P_MIN).ln())).abs() < 1e-12);
}

#[test]
fn classification_loss_vanishes_on_labels() {
    let cfg = LossConfig::default();
    let labels = vec![1, 0, 0, 1, 0];
    let asg = SampleAssignment { labels: labels.clone(), positive_count: 2 };
    let scores: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(&[5, 1], scores).unwrap());
    let l = classification_loss(&mut g, s, &asg, &cfg).unwrap();
    // Only the clamp residue remains: 2·(−ln(1−1e-7)) + 3/16·(−ln(1−1e-7)).
    assert!(g.value(l).item() < 5.0 * 1.1 * P_MIN);
    assert!(g.value(l).item() >= 0.0);
}

#[test]
fn regression_loss_examples() {
    let cfg = LossConfig::default();
    let gt = BBox::normalized(0.5, 0.5, 0.2, 0.2);
    let asg = assign_samples(&gt, 4, 4).unwrap();
    let perfect = pred_from(vec![0.5; 16], vec![gt.to_array(); 16]);
    let (_, reg) = loss_values(&perfect, &gt, &asg, &cfg).unwrap();
    assert!(reg.abs() < 1e-15);

    let one = SampleAssignment { labels: vec![1], positive_count: 1 };
    let shifted = pred_from(vec![0.5], vec![[0.51, 0.5, 0.2, 0.2]]);
    let (_, reg) = loss_values(&shifted, &gt, &one, &cfg).unwrap();
    // overlap 0.19×0.2, union 0.042, enclosure 0.21×0.2 = union
    let giou_hand = 0.038 / 0.042;
    assert!((reg - (5.0 * 0.01 + 2.0 * (1.0 - giou_hand))).abs() < 1e-12);
}

#[test]
fn zero_positive_regression_is_contract_error() {
    let mut g = Graph::new();
    let b = g.constant(Tensor::full(&[2, 4], 0.5));
    let asg = SampleAssignment { labels: vec![0, 0], positive_count: 0 };
    let err = regression_loss(&mut g, b, &BBox::normalized(0.5, 0.5, 0.1, 0.1), &asg, &LossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

/// Loop recomputation of the whole objective with explicit weights.
fn brute_objective(pred: &Prediction, gt: &BBox, labels: &[u8], sum: bool) -> f64 {
    let mut cls = 0.0;
    for (p, &y) in pred.scores.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        cls += if y == 1 { -p.ln() } else { -(1.0 - p).ln() / 16.0 };
    }
    let mut reg = 0.0;
    let mut count = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y == 1 {
            let b = pred.bbox(i);
            let l1: f64 = b.to_array().iter().zip(gt.to_array()).map(|(a, c)| (a - c).abs()).sum();
            reg += 2.0 * (1.0 - giou(&b, gt).unwrap()) + 5.0 * l1;
            count += 1.0;
        }
    }
    cls + if sum { reg } else { reg / count }
}

#[test]
fn objective_matches_brute_force() {
    let mut rng = Rng::new(4);
    for trial in 0..10 {
        let gt = BBox::normalized(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5));
        let asg = assign_samples(&gt, 5, 5).unwrap();
        let pred = pred_from(
            (0..25).map(|_| rng.uniform(0.01, 0.99)).collect(),
            (0..25).map(|_| [rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6)]).collect(),
        );
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let cfg = LossConfig { regression_reduction: reduction, ..LossConfig::default() };
            let (c, r) = loss_values(&pred, &gt, &asg, &cfg).unwrap();
            let expect = brute_objective(&pred, &gt, &asg.labels, reduction == Reduction::Sum);
            assert!((c + r - expect).abs() < 1e-12, "trial {trial}: {} vs {expect}", c + r);
        }
    }
}

#[test]
fn total_is_sum_of_parts() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(&[4, 1], vec![0.2, 0.7, 0.4, 0.9]).unwrap());
    let b = g.constant(Tensor::from_fn(&[4, 4], |i| 0.3 + 0.05 * i as f64));
    let out = HeadOutput { scores: s, boxes: b };
    let gt = BBox::normalized(0.4, 0.4, 0.5, 0.5);
    let asg = assign_samples(&gt, 2, 2).unwrap();
    let l = total_loss(&mut g, &out, &gt, &asg, &LossConfig::default()).unwrap();
    assert_eq!(g.value(l.total).item(), g.value(l.classification).item() + g.value(l.regression).item());
}

#[test]
fn graph_giou_matches_geometry() {
    let mut rng = Rng::new(5);
    let boxes = |rng: &mut Rng| Tensor::from_fn(&[20, 4], |i| if i % 4 < 2 { rng.uniform(0.0, 1.0) } else { rng.uniform(0.05, 0.6) });
    let (a, b) = (boxes(&mut rng), boxes(&mut rng));
    let mut g = Graph::new();
    let (ai, bi) = (g.constant(a.clone()), g.constant(b.clone()));
    let gi = giou_rows(&mut g, ai, bi).unwrap();
    for r in 0..20 {
        let ba = BBox::normalized(a.get2(r, 0), a.get2(r, 1), a.get2(r, 2), a.get2(r, 3));
        let bb = BBox::normalized(b.get2(r, 0), b.get2(r, 1), b.get2(r, 2), b.get2(r, 3));
        assert!((g.value(gi).data()[r] - giou(&ba, &bb).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn head_and_loss_gradients() {
    let mut rng = Rng::new(6);
    let p = HeadParams::init(6, &mut rng);
    let f = Tensor::randn(&[9, 6], 1.0, &mut rng);
    let gt = BBox::normalized(0.45, 0.55, 0.5, 0.4);
    let asg = assign_samples(&gt, 3, 3).unwrap();
    let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
    let mut flat: Vec<Tensor> = p.leaves().into_iter().map(|(_, t)| t.clone()).collect();
    let np = flat.len();
    flat.push(f);
    let cfg = LossConfig::default();
    let report = finite_diff_check(
        |g, ids| {
            let mut it = ids[..np].iter();
            let pid = p.map_leaves(&mut |_| *it.next().unwrap());
            let out = predict(g, &pid, ids[np])?;
            Ok(total_loss(g, &out, &gt, &asg, &cfg)?.total)
        },
        &flat,
        1e-6,
        1e-4,
    )
    .unwrap()
    .with_names(&names);
    assert!(report.passed(), "{report}");
}

proptest! {
    #[test]
    fn assignment_always_has_a_positive(cx in 0.0f64..=1.0, cy in 0.0f64..=1.0, w in 1e-4f64..1.0, h in 1e-4f64..1.0, gh in 1usize..12, gw in 1usize..12) {
        let asg = assign_samples(&BBox::normalized(cx, cy, w, h), gh, gw).unwrap();
        prop_assert!(asg.positive_count >= 1);
        prop_assert_eq!(asg.positive_count, asg.labels.iter().map(|&y| y as usize).sum::<usize>());
        prop_assert!(asg.labels.iter().all(|&y| y <= 1));
    }

    #[test]
    fn classification_loss_non_negative(scores in proptest::collection::vec(0.0f64..=1.0, 6), mask in 0u8..64) {
        let labels: Vec<u8> = (0..6).map(|i| (mask >> i) & 1).collect();
        let positive_count = labels.iter().map(|&y| y as usize).sum();
        let asg = SampleAssignment { labels, positive_count };
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[6, 1], scores).unwrap());
        let l = classification_loss(&mut g, s, &asg, &LossConfig::default()).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}
