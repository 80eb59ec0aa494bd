//! The full network: backbone, fusion stack and prediction head.

use crate::attention::AttentionRecord;
use crate::bbox::BBox;
use crate::backbone::{extract, reduce_and_flatten, BackboneParams};
use crate::config::{LossConfig, ModelConfig, STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{fusion_forward, FusionOptions, FusionParams, GridFeatures};
use crate::head::{assign_samples, predict, total_loss, HeadOutput, HeadParams};
use crate::params::{join, ParamTree};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, NodeId, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub backbone: BackboneParams<T>,
    pub fusion: FusionParams<T>,
    pub head: HeadParams<T>,
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(ModelParams {
            backbone: BackboneParams::init(cfg.backbone_channels, d, &mut rng.fork(1))?,
            fusion: FusionParams::init(d, cfg.n_heads, cfg.ffn_width(), cfg.layers, &mut rng.fork(2))?,
            head: HeadParams::init(d, &mut rng.fork(3)),
        })
    }
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.map_leaves(f),
            fusion: self.fusion.map_leaves(f),
            head: self.head.map_leaves(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn fusion_options(cfg: &ModelConfig) -> FusionOptions {
    FusionOptions { temperature: cfg.pos_temperature, post_norm: cfg.post_norm }
}

/// Backbone features of a `3×H×W` patch as a flattened `(H/8)·(W/8)` grid.
pub fn embed(g: &mut Graph, p: &BackboneParams<NodeId>, patch: NodeId) -> Result<GridFeatures> {
    let (h, w) = match g.shape(patch) {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Contract(format!("patch must be 3×H×W, got {s:?}"))),
    };
    let f = extract(g, p, patch)?;
    let features = reduce_and_flatten(g, p, f)?;
    Ok(GridFeatures { features, height: h / STRIDE, width: w / STRIDE })
}

pub struct ModelOutput {
    pub head: HeadOutput,
    pub search_grid: (usize, usize),
    pub records: Vec<AttentionRecord>,
}

/// Fusion and head on already embedded template features.
pub fn forward_features(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    template: GridFeatures,
    search_patch: NodeId,
    opts: &FusionOptions,
    record: bool,
) -> Result<ModelOutput> {
    let search = embed(g, &p.backbone, search_patch)?;
    let fused = fusion_forward(g, &p.fusion, template, search, opts, record)?;
    Ok(ModelOutput {
        head: predict(g, &p.head, fused.features)?,
        search_grid: (search.height, search.width),
        records: fused.records,
    })
}

/// Full forward pass on a template patch and a search patch.
pub fn forward_pair(
    g: &mut Graph,
    p: &ModelParams<NodeId>,
    template_patch: NodeId,
    search_patch: NodeId,
    opts: &FusionOptions,
    record: bool,
) -> Result<ModelOutput> {
    let template = embed(g, &p.backbone, template_patch)?;
    forward_features(g, p, template, search_patch, opts, record)
}

/// Central-difference check of the total loss through backbone, fusion and
/// head, perturbing every parameter and both input patches. `eps = 1e-6`
/// keeps perturbations from crossing ReLU kinks.
pub fn pipeline_gradient_check(cfg: &ModelConfig, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let p = ModelParams::init(cfg, &mut rng)?;
    let z = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
    let gt = BBox::normalized(0.45, 0.55, 0.4, 0.35);
    let asg = assign_samples(&gt, 3, 3)?;
    let loss_cfg = LossConfig::default();
    let opts = fusion_options(cfg);
    let mut names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
    let mut flat: Vec<Tensor> = p.leaves().into_iter().map(|(_, t)| t.clone()).collect();
    let np = flat.len();
    flat.extend([z, x]);
    names.extend(["template".into(), "search".into()]);
    let report = finite_diff_check(
        |g, ids| {
            let mut it = ids[..np].iter();
            let pid = p.map_leaves(&mut |_| *it.next().expect("one id per leaf"));
            let out = forward_pair(g, &pid, ids[np], ids[np + 1], &opts, false)?;
            Ok(total_loss(g, &out.head, &gt, &asg, &loss_cfg)?.total)
        },
        &flat,
        1e-6,
        tol,
    )?;
    Ok(report.with_names(&names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{bind_constants, param_count};

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, layers: 1, backbone_channels: 8, ffn_dim: Some(16), ..ModelConfig::default() }
    }

    #[test]
    fn names_are_unique_and_grouped() {
        let p = ModelParams::init(&tiny(), &mut Rng::new(0)).unwrap();
        let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().all(|n| ["backbone.", "fusion.", "head."].iter().any(|p| n.starts_with(p))));
        assert_eq!(param_count(&p), param_count(&p.backbone) + param_count(&p.fusion) + param_count(&p.head));
    }

    #[test]
    fn init_is_deterministic_and_rejects_bad_config() {
        let a = ModelParams::init(&tiny(), &mut Rng::new(4)).unwrap();
        assert_eq!(a, ModelParams::init(&tiny(), &mut Rng::new(4)).unwrap());
        let bad = ModelConfig { n_heads: 3, ..tiny() };
        assert!(matches!(ModelParams::init(&bad, &mut Rng::new(4)), Err(Error::Config(_))));
    }

    #[test]
    fn pair_forward_shapes() {
        let mut rng = Rng::new(1);
        let p = ModelParams::init(&tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, &p);
        let z = g.constant(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng));
        let x = g.constant(Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng));
        let out = forward_pair(&mut g, &pid, z, x, &FusionOptions::default(), true).unwrap();
        assert_eq!(out.search_grid, (4, 4));
        assert_eq!(g.shape(out.head.scores), [16, 1]);
        assert_eq!(g.shape(out.head.boxes), [16, 4]);
        assert_eq!(out.records.len(), 5);
    }

    #[test]
    fn full_pipeline_gradients() {
        let report = pipeline_gradient_check(&tiny(), 2, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
    }
}
