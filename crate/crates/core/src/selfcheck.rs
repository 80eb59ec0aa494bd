//! Runtime suite behind `transt selfcheck`: gradient checks plus the core
//! invariants, each reported as one pass/fail line.

use std::fmt;

use crate::attention::{multi_head, MhaParams};
use crate::bbox::{giou, BBox, Frame};
use crate::config::{Config, ModelConfig};
use crate::data::compute_metrics;
use crate::error::Result;
use crate::fusion::{fusion_forward, FusionOptions, FusionParams, GridFeatures};
use crate::head::{classification_loss, SampleAssignment};
use crate::model::{pipeline_gradient_check, ModelParams};
use crate::params::{bind_constants, ParamTree};
use crate::tensor::{op_gradient_suite, Graph, Rng, Tensor};
use crate::tracker::{argmax, window_penalty};
use crate::train::{decode_model, encode_model};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<22} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type Check = fn() -> Result<std::result::Result<String, String>>;

const SUITES: [(&str, Check); 9] = [
    ("op gradients", op_gradients),
    ("pipeline gradients", pipeline_gradients),
    ("attention invariants", attention_invariants),
    ("residual identity", residual_identity),
    ("loss oracles", loss_oracles),
    ("default constants", default_constants),
    ("window penalty", window_checks),
    ("metric oracles", metric_oracles),
    ("weight file", weight_file),
];

pub fn run_all() -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check() {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            SuiteResult { name, passed, detail }
        })
        .collect()
}

fn verdict(ok: bool, detail: String) -> std::result::Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn op_gradients() -> Result<std::result::Result<String, String>> {
    let reports = op_gradient_suite(7, 1e-5, 1e-5)?;
    let worst = reports.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| *n).collect();
    Ok(verdict(failed.is_empty(), format!("{} ops, max rel error {worst:.2e}, failed {failed:?}", reports.len())))
}

fn pipeline_gradients() -> Result<std::result::Result<String, String>> {
    let cfg = ModelConfig { d_model: 8, n_heads: 2, layers: 2, backbone_channels: 8, ffn_dim: Some(16), ..ModelConfig::default() };
    let r = pipeline_gradient_check(&cfg, 1, 1e-4)?;
    Ok(verdict(r.passed(), format!("{} tensors, max rel error {:.2e}", r.params.len(), r.max_rel_error())))
}

fn attention_invariants() -> Result<std::result::Result<String, String>> {
    let mut rng = Rng::new(3);
    let p = MhaParams::init(8, 2, &mut rng)?;
    let q = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let kv = Tensor::randn(&[7, 8], 1.0, &mut rng);
    let run = |q: &Tensor, kv: &Tensor| -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, &p);
        let (qi, ki) = (g.constant(q.clone()), g.constant(kv.clone()));
        let (out, rec) = multi_head(&mut g, &pid, qi, ki, ki, Some("check"))?;
        Ok((g.value(out).clone(), rec.expect("recorded").head_weights))
    };
    let (base, weights) = run(&q, &kv)?;
    let row_err = weights.iter().flat_map(|w| (0..w.rows()).map(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
    let kv_perm: Vec<usize> = vec![3, 0, 6, 1, 5, 2, 4];
    let permute = |t: &Tensor, idx: &[usize]| Tensor::from_fn(&[idx.len(), t.cols()], |i| t.get2(idx[i / t.cols()], i % t.cols()));
    let (kv_out, _) = run(&q, &permute(&kv, &kv_perm))?;
    let q_perm = [4, 2, 0, 3, 1];
    let (q_out, _) = run(&permute(&q, &q_perm), &kv)?;
    let kv_err = kv_out.max_abs_diff(&base);
    let q_err = q_out.max_abs_diff(&permute(&base, &q_perm));
    Ok(verdict(
        row_err <= 1e-6 && kv_err <= 1e-9 && q_err <= 1e-9,
        format!("row sum error {row_err:.1e}, kv permutation {kv_err:.1e}, query permutation {q_err:.1e}"),
    ))
}

fn residual_identity() -> Result<std::result::Result<String, String>> {
    let mut rng = Rng::new(4);
    let mut p = FusionParams::init(8, 2, 16, 2, &mut rng)?;
    p.visit_mut("", &mut |name, t| {
        if name.ends_with("w_o") || name.contains("ffn.") {
            *t = Tensor::zeros(t.shape());
        }
    });
    let z = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let pid = bind_constants(&mut g, &p);
    let template = GridFeatures { features: g.constant(z), height: 2, width: 2 };
    let search = GridFeatures { features: g.constant(x.clone()), height: 4, width: 4 };
    let out = fusion_forward(&mut g, &pid, template, search, &FusionOptions::default(), false)?;
    let same = g.value(out.features) == &x;
    Ok(verdict(same, format!("search branch returned {}", if same { "bitwise unchanged" } else { "modified" })))
}

fn loss_oracles() -> Result<std::result::Result<String, String>> {
    let px = |x0, y0, x1, y1| BBox::from_corners(x0, y0, x1, y1, Frame::Pixel);
    let giou_err = [
        (giou(&px(0.0, 0.0, 1.0, 1.0), &px(0.0, 0.0, 1.0, 1.0))?, 1.0),
        (giou(&px(0.0, 0.0, 1.0, 1.0), &px(1.0, 0.0, 2.0, 1.0))?, 0.0),
        (giou(&px(0.0, 0.0, 2.0, 2.0), &px(0.0, 0.0, 1.0, 2.0))?, 0.5),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max);
    let cfg = Config::default().loss;
    let bce = |p: f64, label: u8| -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[1, 1], vec![p])?);
        let asg = SampleAssignment { labels: vec![label], positive_count: label as usize };
        let l = classification_loss(&mut g, s, &asg, &cfg)?;
        Ok(g.value(l).item())
    };
    let pos_err = (bce(0.5, 1)? - 2f64.ln()).abs();
    let neg_err = (bce(0.5, 0)? - 2f64.ln() / 16.0).abs();
    Ok(verdict(
        giou_err <= 1e-12 && pos_err <= 1e-12 && neg_err <= 1e-12,
        format!("GIoU cases {giou_err:.1e}, BCE positive {pos_err:.1e}, BCE negative {neg_err:.1e}"),
    ))
}

fn default_constants() -> Result<std::result::Result<String, String>> {
    let c = Config::default();
    let checks = [
        c.model.n_heads == 8,
        c.model.d_model == 256,
        c.model.head_dim() == 32,
        c.model.layers == 4,
        c.tracker.template_grid().pow(2) == 256,
        c.tracker.search_grid().pow(2) == 1024,
        c.tracker.window_weight == 0.49,
        c.loss.lambda_giou == 2.0 && c.loss.lambda_l1 == 5.0 && c.loss.negative_factor == 16.0,
    ];
    let ok = checks.iter().filter(|&&b| b).count();
    Ok(verdict(ok == checks.len(), format!("{ok}/{} constants match", checks.len())))
}

fn window_checks() -> Result<std::result::Result<String, String>> {
    let mut rng = Rng::new(5);
    let scores: Vec<f64> = (0..1024).map(|_| rng.unit()).collect();
    let identity = window_penalty(&scores, 32, 0.0)? == scores;
    let best = argmax(&window_penalty(&[0.5; 1024], 32, 1.0)?);
    let peak = [15, 16].contains(&(best / 32)) && [15, 16].contains(&(best % 32));
    Ok(verdict(identity && peak, format!("w=0 identity {identity}, w=1 argmax at ({}, {})", best / 32, best % 32)))
}

fn metric_oracles() -> Result<std::result::Result<String, String>> {
    let a = BBox::pixel_xywh(0.0, 0.0, 2.0, 2.0);
    let r = compute_metrics(&[a, BBox::pixel_xywh(0.0, 0.0, 1.0, 2.0), BBox::pixel_xywh(9.0, 9.0, 2.0, 2.0)], &[a; 3])?;
    let hand = r.ao == 0.5 && r.sr_050 == 1.0 / 3.0 && r.sr_075 == 1.0 / 3.0;
    let p = compute_metrics(&[a, a], &[a, a])?;
    let perfect = [p.success_auc, p.precision_at_20px, p.norm_precision_auc, p.ao, p.sr_050, p.sr_075].iter().all(|&v| v == 1.0);
    Ok(verdict(hand && perfect, format!("ao {}, sr_050 {:.4}, sr_075 {:.4}, perfect {perfect}", r.ao, r.sr_050, r.sr_075)))
}

fn weight_file() -> Result<std::result::Result<String, String>> {
    let cfg = ModelConfig { d_model: 8, n_heads: 2, layers: 1, backbone_channels: 8, ffn_dim: Some(16), ..ModelConfig::default() };
    let p = ModelParams::init(&cfg, &mut Rng::new(6))?;
    let bytes = encode_model(&p);
    let again = encode_model(&decode_model(&bytes, &p)?);
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    let rejected = decode_model(&corrupt, &p).is_err();
    Ok(verdict(bytes == again && rejected, format!("{} bytes, stable {}, bad magic rejected {rejected}", bytes.len(), bytes == again)))
}
