//! Toy training: pair sampling, AdamW and the training loop.

mod weights;

pub use weights::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};

use crate::bbox::BBox;
use crate::config::{Config, OptimConfig, TrackerConfig};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::head::{assign_samples, loss_values, total_loss};
use crate::model::{forward_pair, fusion_options, ModelParams};
use crate::params::{bind_params, collect_grads, ParamTree};
use crate::tensor::{Graph, NodeId, Rng, Tensor};
use crate::tracker::{crop_patch, crop_side};

/// Template patch, search patch and the target in normalized search
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub template: Tensor,
    pub search: Tensor,
    pub gt: BBox,
}

/// Crops a training pair as the tracker would see it: the template around
/// the frame-`i` target, and a search region sized from the frame-`i` box
/// (the last known one) but centred on the frame-`j` target shifted by
/// `shift` (fractions of the search side). Search brightness is scaled by
/// `brightness`. Errors when the target leaves the open unit square.
pub fn crop_pair(
    seq: &Sequence,
    i: usize,
    j: usize,
    shift: (f64, f64),
    brightness: f64,
    cfg: &TrackerConfig,
) -> Result<PairSample> {
    if i >= seq.len() || j >= seq.len() {
        return Err(Error::Input(format!("frames {i}, {j} out of range for {} frames", seq.len())));
    }
    let (zb, xb) = (seq.gt[i], seq.gt[j]);
    let template = crop_patch(&seq.frames[i], zb.cx, zb.cy, crop_side(cfg.template_factor, &zb), cfg.template_size)?;
    let side = crop_side(cfg.search_factor, &zb);
    let search = crop_patch(&seq.frames[j], xb.cx + shift.0 * side, xb.cy + shift.1 * side, side, cfg.search_size)?;
    let gt = search.window.to_normalized(&xb);
    if gt.to_array().iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::Input(format!("target {:?} falls outside the search crop", gt.to_array())));
    }
    Ok(PairSample { template: template.patch, search: search.patch.map(|v| (v * brightness).min(1.0)), gt })
}

/// Draws frames `i < j ≤ i + max_frame_gap`, a center shift and a
/// brightness factor, retrying up to `max_resample` times.
pub fn sample_pair(seq: &Sequence, cfg: &Config, rng: &mut Rng) -> Result<PairSample> {
    if seq.len() < 2 {
        return Err(Error::Input("pair sampling needs at least 2 frames".into()));
    }
    let t = &cfg.train;
    let mut last = None;
    for _ in 0..t.max_resample {
        let i = rng.below(seq.len() - 1);
        let j = i + 1 + rng.below(t.max_frame_gap.min(seq.len() - 1 - i));
        let shift = (rng.uniform(-t.center_jitter, t.center_jitter), rng.uniform(-t.center_jitter, t.center_jitter));
        let brightness = rng.uniform(1.0 - t.brightness_jitter, 1.0 + t.brightness_jitter);
        match crop_pair(seq, i, j, shift, brightness, &cfg.tracker) {
            Ok(pair) => return Ok(pair),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Input(format!("no valid pair after {} draws: {}", t.max_resample, last.expect("at least one draw"))))
}

/// AdamW moments, flattened in parameter-tree order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new<P: ParamTree<Tensor>>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params.leaves().into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

const BACKBONE_PREFIX: &str = "backbone.";

/// Learning rate of one parameter after step decay.
fn learning_rate(name: &str, cfg: &OptimConfig, step: u64) -> f64 {
    let base = if name.starts_with(BACKBONE_PREFIX) { cfg.lr_backbone } else { cfg.lr };
    match cfg.decay_every {
        Some(k) => base * cfg.decay_factor.powi(((step - 1) / k as u64) as i32),
        None => base,
    }
}

/// One decoupled-weight-decay Adam step. Parameters named `backbone.*` use
/// `lr_backbone`, the rest `lr`.
pub fn adamw_update<P: ParamTree<Tensor>>(params: &mut P, grads: &[Tensor], state: &mut OptimState, cfg: &OptimConfig) {
    state.step += 1;
    let step = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut k = 0;
    params.visit_mut("", &mut |name, p| {
        let lr = learning_rate(&name, cfg, step);
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *pi;
            *pi -= lr * update;
        }
        k += 1;
    });
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Batch mean of the total loss.
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
}

fn non_finite_diagnostic(g: &Graph, names: &[(NodeId, String)]) -> String {
    match g.first_non_finite() {
        Some((id, op)) => match names.iter().find(|(n, _)| *n == id) {
            Some((_, name)) => format!("parameter {name} is non-finite"),
            None => format!("first non-finite tensor is node {} produced by {op}", id.index()),
        },
        None => "loss is non-finite".into(),
    }
}

/// Gradient of the batch-mean total loss, then one AdamW update.
pub fn train_step(params: &mut ModelParams, optim: &mut OptimState, batch: &[PairSample], cfg: &Config) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut g = Graph::new();
    let pid = bind_params(&mut g, params);
    let names: Vec<(NodeId, String)> = pid.leaves().into_iter().map(|(n, id)| (*id, n)).collect();
    let opts = fusion_options(&cfg.model);
    let grid = cfg.tracker.search_grid();
    let mut losses = Vec::with_capacity(batch.len());
    let (mut cls, mut reg) = (0.0, 0.0);
    for sample in batch {
        let z = g.constant(sample.template.clone());
        let x = g.constant(sample.search.clone());
        let out = forward_pair(&mut g, &pid, z, x, &opts, false)?;
        let asg = assign_samples(&sample.gt, grid, grid)?;
        let l = total_loss(&mut g, &out.head, &sample.gt, &asg, &cfg.loss)?;
        cls += g.value(l.classification).item();
        reg += g.value(l.regression).item();
        losses.push(l.total);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = g.add(sum, l)?;
    }
    let n = batch.len() as f64;
    let mean = g.scale(sum, 1.0 / n);
    let loss = g.value(mean).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(non_finite_diagnostic(&g, &names)));
    }
    let grads = g.backward(mean)?;
    let grads = collect_grads(&g, &pid, &grads);
    let flat: Vec<Tensor> = grads.leaves().into_iter().map(|(_, t)| t.clone()).collect();
    if let Some((name, _)) = grads.leaves().into_iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} is non-finite")));
    }
    adamw_update(params, &flat, optim, &cfg.optim);
    Ok(StepStats { loss, classification: cls / n, regression: reg / n })
}

/// Classification loss, regression loss and IoU of the top-scoring box for
/// one pair, without gradients.
pub fn evaluate_pair(params: &ModelParams, sample: &PairSample, cfg: &Config) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let pid = crate::params::bind_constants(&mut g, params);
    let z = g.constant(sample.template.clone());
    let x = g.constant(sample.search.clone());
    let out = forward_pair(&mut g, &pid, z, x, &fusion_options(&cfg.model), false)?;
    let pred = out.head.prediction(&g);
    let grid = cfg.tracker.search_grid();
    let asg = assign_samples(&sample.gt, grid, grid)?;
    let (cls, reg) = loss_values(&pred, &sample.gt, &asg, &cfg.loss)?;
    let best = crate::tracker::argmax(&pred.scores);
    Ok((cls, reg, crate::bbox::iou(&pred.bbox(best), &sample.gt)?))
}

/// Trains a freshly initialized model on pairs drawn from `seq`. `report`
/// sees every step's statistics.
pub fn train(seq: &Sequence, cfg: &Config, steps: usize, mut report: impl FnMut(usize, &StepStats)) -> Result<ModelParams> {
    cfg.validate()?;
    let mut root = Rng::new(cfg.train.seed);
    let mut params = ModelParams::init(&cfg.model, &mut root.fork(1))?;
    let mut sampler = root.fork(2);
    let mut optim = OptimState::new(&params);
    for step in 0..steps {
        let batch = (0..cfg.optim.batch_size).map(|_| sample_pair(seq, cfg, &mut sampler)).collect::<Result<Vec<_>>>()?;
        let stats = train_step(&mut params, &mut optim, &batch, cfg)?;
        report(step, &stats);
    }
    Ok(params)
}

#[cfg(test)]
mod tests;
