//! Prediction head, sample assignment and the training objective.

use crate::bbox::{BBox, Frame};
use crate::config::{LossConfig, Reduction};
use crate::error::{Error, Result};
use crate::params::{join, Linear, ParamTree};
use crate::tensor::{Graph, NodeId, Rng, Tensor};

/// Probabilities are clamped to `[P_MIN, 1 − P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-7;

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Tensor> {
    pub layers: Vec<Linear<T>>,
}

impl Mlp<Tensor> {
    pub fn init(d: usize, out: usize, rng: &mut Rng) -> Self {
        Mlp { layers: vec![Linear::init(d, d, rng), Linear::init(d, d, rng), Linear::init(d, out, rng)] }
    }
}

impl Mlp<NodeId> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T> ParamTree<T> for Mlp<T> {
    type Mapped<U> = Mlp<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp { layers: self.layers.iter().map(|l| l.map_leaves(f)).collect() }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Tensor> {
    /// `d → d → d → 1`
    pub cls: Mlp<T>,
    /// `d → d → d → 4`
    pub reg: Mlp<T>,
}

impl HeadParams<Tensor> {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        HeadParams { cls: Mlp::init(d, 1, rng), reg: Mlp::init(d, 4, rng) }
    }
}

impl<T> ParamTree<T> for HeadParams<T> {
    type Mapped<U> = HeadParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams { cls: self.cls.map_leaves(f), reg: self.reg.map_leaves(f) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

/// Head outputs on a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Foreground probabilities, `N×1`.
    pub scores: NodeId,
    /// Normalized `(cx, cy, w, h)`, `N×4`.
    pub boxes: NodeId,
}

impl HeadOutput {
    pub fn prediction(&self, g: &Graph) -> Prediction {
        Prediction {
            scores: g.value(self.scores).data().to_vec(),
            boxes: g.value(self.boxes).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        }
    }
}

/// Per-cell scores and normalized boxes, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

impl Prediction {
    pub fn bbox(&self, i: usize) -> BBox {
        let [cx, cy, w, h] = self.boxes[i];
        BBox::normalized(cx, cy, w, h)
    }
}

/// Score and box for every feature vector of `f` (`N×d`).
pub fn predict(g: &mut Graph, p: &HeadParams<NodeId>, f: NodeId) -> Result<HeadOutput> {
    let d = g.shape(p.cls.layers[0].w)[0];
    match g.shape(f) {
        [_, c] if *c == d => {}
        s => return Err(Error::dim("predict", format!("features {s:?}, head expects width {d}"))),
    }
    let logits = p.cls.forward(g, f)?;
    let scores = g.sigmoid(logits);
    let raw = p.reg.forward(g, f)?;
    let boxes = g.sigmoid(raw);
    Ok(HeadOutput { scores, boxes })
}

/// Binary labels over the score grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleAssignment {
    pub labels: Vec<u8>,
    pub positive_count: usize,
}

impl SampleAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &y)| y == 1).map(|(i, _)| i).collect()
    }
}

/// Cells whose centers lie inside `gt` (boundary inclusive) are positive. If
/// none does, the cell whose center is nearest the box center is the single
/// positive, lowest index on ties.
pub fn assign_samples(gt: &BBox, height: usize, width: usize) -> Result<SampleAssignment> {
    if gt.frame != Frame::Normalized {
        return Err(Error::Input("sample assignment needs a normalized box".into()));
    }
    gt.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Input(format!("empty grid {height}×{width}")));
    }
    let center = |i: usize, j: usize| ((j as f64 + 0.5) / width as f64, (i as f64 + 0.5) / height as f64);
    let mut labels = vec![0u8; height * width];
    for i in 0..height {
        for j in 0..width {
            let (x, y) = center(i, j);
            if x >= gt.x0() && x <= gt.x1() && y >= gt.y0() && y <= gt.y1() {
                labels[i * width + j] = 1;
            }
        }
    }
    let mut positive_count = labels.iter().filter(|&&y| y == 1).count();
    if positive_count == 0 {
        let mut best = (f64::INFINITY, 0);
        for i in 0..height {
            for j in 0..width {
                let (x, y) = center(i, j);
                let dist = (x - gt.cx).powi(2) + (y - gt.cy).powi(2);
                if dist < best.0 {
                    best = (dist, i * width + j);
                }
            }
        }
        labels[best.1] = 1;
        positive_count = 1;
    }
    Ok(SampleAssignment { labels, positive_count })
}

/// Weighted binary cross-entropy over all cells; negatives are scaled by
/// `1 / negative_factor`.
pub fn classification_loss(
    g: &mut Graph,
    scores: NodeId,
    asg: &SampleAssignment,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let n = g.value(scores).len();
    if n != asg.labels.len() {
        return Err(Error::dim("classification_loss", format!("{n} scores for {} labels", asg.labels.len())));
    }
    let shape = g.shape(scores).to_vec();
    let neg_w = 1.0 / cfg.negative_factor;
    let pos_weights = Tensor::from_fn(&shape, |i| if asg.labels[i] == 1 { 1.0 } else { 0.0 });
    let neg_weights = Tensor::from_fn(&shape, |i| if asg.labels[i] == 1 { 0.0 } else { neg_w });
    let p = g.clamp(scores, P_MIN, 1.0 - P_MIN);
    let log_p = g.log(p);
    let neg_p = g.scale(p, -1.0);
    let one_minus = g.add_scalar(neg_p, 1.0);
    let log_q = g.log(one_minus);
    let wp = g.constant(pos_weights);
    let wn = g.constant(neg_weights);
    let a = g.mul(log_p, wp)?;
    let b = g.mul(log_q, wn)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    Ok(g.scale(total, -1.0))
}

/// Row-wise GIoU of two `P×4` center/size box tensors, shape `P×1`.
pub fn giou_rows(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let corners = |g: &mut Graph, t: NodeId| -> Result<[NodeId; 6]> {
        let cx = g.slice_cols(t, 0, 1)?;
        let cy = g.slice_cols(t, 1, 1)?;
        let w = g.slice_cols(t, 2, 1)?;
        let h = g.slice_cols(t, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?, w, h])
    };
    let [ax0, ay0, ax1, ay1, aw, ah] = corners(g, a)?;
    let [bx0, by0, bx1, by1, bw, bh] = corners(g, b)?;

    let ix0 = g.maximum(ax0, bx0)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let sum_area = g.add(area_a, area_b)?;
    let union = g.sub(sum_area, inter)?;
    let iou = g.div(inter, union)?;

    let ex0 = g.minimum(ax0, bx0)?;
    let ey0 = g.minimum(ay0, by0)?;
    let ex1 = g.maximum(ax1, bx1)?;
    let ey1 = g.maximum(ay1, by1)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let enc = g.mul(ew, eh)?;
    let gap = g.sub(enc, union)?;
    let frac = g.div(gap, enc)?;
    g.sub(iou, frac)
}

/// `λ_G·(1 − GIoU) + λ_1·‖b − ĝ‖₁` over positive cells, averaged or summed
/// per `cfg.regression_reduction`.
pub fn regression_loss(
    g: &mut Graph,
    boxes: NodeId,
    gt: &BBox,
    asg: &SampleAssignment,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let n = g.value(boxes).rows();
    if n != asg.labels.len() || g.value(boxes).cols() != 4 {
        return Err(Error::dim(
            "regression_loss",
            format!("boxes {:?} for {} labels", g.shape(boxes), asg.labels.len()),
        ));
    }
    let pos = asg.positives();
    if pos.is_empty() {
        return Err(Error::Contract("regression loss needs at least one positive sample".into()));
    }
    let pred = g.select_rows(boxes, &pos)?;
    let target = Tensor::from_fn(&[pos.len(), 4], |i| gt.to_array()[i % 4]);
    let target = g.constant(target);

    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let l1 = g.row_sums(abs)?;
    let gi = giou_rows(g, pred, target)?;
    let neg_gi = g.scale(gi, -1.0);
    let giou_loss = g.add_scalar(neg_gi, 1.0);
    let a = g.scale(giou_loss, cfg.lambda_giou);
    let b = g.scale(l1, cfg.lambda_l1);
    let per = g.add(a, b)?;
    let total = g.sum(per);
    Ok(match cfg.regression_reduction {
        Reduction::Mean => g.scale(total, 1.0 / pos.len() as f64),
        Reduction::Sum => total,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub classification: NodeId,
    pub regression: NodeId,
    pub total: NodeId,
}

pub fn total_loss(
    g: &mut Graph,
    out: &HeadOutput,
    gt: &BBox,
    asg: &SampleAssignment,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let classification = classification_loss(g, out.scores, asg, cfg)?;
    let regression = regression_loss(g, out.boxes, gt, asg, cfg)?;
    let total = g.add(classification, regression)?;
    Ok(LossNodes { classification, regression, total })
}

/// Loss values of a materialized prediction.
pub fn loss_values(pred: &Prediction, gt: &BBox, asg: &SampleAssignment, cfg: &LossConfig) -> Result<(f64, f64)> {
    let n = pred.scores.len();
    let mut g = Graph::new();
    let scores = g.constant(Tensor::new(&[n, 1], pred.scores.clone())?);
    let boxes = g.constant(Tensor::new(&[n, 4], pred.boxes.iter().flatten().copied().collect())?);
    let out = HeadOutput { scores, boxes };
    let l = total_loss(&mut g, &out, gt, asg, cfg)?;
    Ok((g.value(l.classification).item(), g.value(l.regression).item()))
}

#[cfg(test)]
mod tests;
