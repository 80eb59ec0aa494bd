//! Toy convolutional feature extractor with total stride 8, followed by the
//! 1×1 channel reduction and row-major flattening.

use crate::config::STRIDE;
use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::tensor::{Graph, NodeId, Rng, Tensor};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = Tensor> {
    /// `C_out×C_in×3×3`
    pub w: T,
    pub b: T,
}

impl<T> ParamTree<T> for ConvParams<T> {
    type Mapped<U> = ConvParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ConvParams<U> {
        ConvParams { w: f(&self.w), b: f(&self.b) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// Three stride-2 3×3 convolutions (3 → C/4 → C/2 → C) plus the `C→d`
/// reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T = Tensor> {
    pub stages: Vec<ConvParams<T>>,
    /// `C×d`
    pub reduce_w: T,
    pub reduce_b: T,
}

impl BackboneParams<Tensor> {
    pub fn init(channels: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!("backbone channels {channels} must be a multiple of 4")));
        }
        let plan = [3, channels / 4, channels / 2, channels];
        let stages = plan
            .windows(2)
            .map(|io| {
                let (c_in, c_out) = (io[0], io[1]);
                // He-uniform for ReLU stacks
                let limit = (6.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
                ConvParams {
                    w: Tensor::uniform(&[c_out, c_in, KERNEL, KERNEL], -limit, limit, rng),
                    b: Tensor::zeros(&[c_out]),
                }
            })
            .collect();
        Ok(BackboneParams {
            stages,
            reduce_w: crate::params::xavier(channels, d, rng),
            reduce_b: Tensor::zeros(&[d]),
        })
    }
}

impl<T> ParamTree<T> for BackboneParams<T> {
    type Mapped<U> = BackboneParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BackboneParams<U> {
        BackboneParams {
            stages: self.stages.iter().map(|s| s.map_leaves(f)).collect(),
            reduce_w: f(&self.reduce_w),
            reduce_b: f(&self.reduce_b),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        f(join(prefix, "reduce_w"), &self.reduce_w);
        f(join(prefix, "reduce_b"), &self.reduce_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        f(join(prefix, "reduce_w"), &mut self.reduce_w);
        f(join(prefix, "reduce_b"), &mut self.reduce_b);
    }
}

/// Feature map `C×(H/8)×(W/8)` of a `3×H×W` image.
pub fn extract(g: &mut Graph, p: &BackboneParams<NodeId>, image: NodeId) -> Result<NodeId> {
    match g.shape(image) {
        [3, h, w] if h % STRIDE == 0 && w % STRIDE == 0 => {}
        s => {
            return Err(Error::Contract(format!(
                "backbone input must be 3×H×W with H, W divisible by {STRIDE}, got {s:?}"
            )))
        }
    }
    let mut x = image;
    for stage in &p.stages {
        let y = g.conv2d(x, stage.w, stage.b, 2, 1)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Per-pixel `C→d` linear map, flattened row-major to `(H·W)×d`.
pub fn reduce_and_flatten(g: &mut Graph, p: &BackboneParams<NodeId>, f: NodeId) -> Result<NodeId> {
    let (c, h, w) = match g.shape(f) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim("reduce_and_flatten", format!("expected C×H×W, got {s:?}"))),
    };
    let c_red = g.shape(p.reduce_w)[0];
    if c != c_red {
        return Err(Error::dim("reduce_and_flatten", format!("{c} feature channels, reduction expects {c_red}")));
    }
    let flat = g.reshape(f, &[c, h * w])?;
    let pixels = g.transpose(flat)?;
    let proj = g.matmul(pixels, p.reduce_w)?;
    g.add_row(proj, p.reduce_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind_constants;
    use crate::tensor::finite_diff_check;

    fn features(p: &BackboneParams, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, p);
        let x = g.constant(img.clone());
        let f = extract(&mut g, &pid, x)?;
        Ok(g.value(f).clone())
    }

    #[test]
    fn stride_eight_shape_contract() {
        let mut rng = Rng::new(1);
        let p = BackboneParams::init(32, 16, &mut rng).unwrap();
        for (h, w) in [(256, 256), (128, 128), (64, 40), (8, 8)] {
            let img = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
            assert_eq!(features(&p, &img).unwrap().shape(), &[32, h / 8, w / 8]);
        }
        let bad = Tensor::zeros(&[3, 20, 16]);
        assert!(matches!(features(&p, &bad), Err(Error::Contract(_))));
        assert!(matches!(features(&p, &Tensor::zeros(&[1, 16, 16])), Err(Error::Contract(_))));
    }

    #[test]
    fn extraction_is_deterministic() {
        let p = BackboneParams::init(8, 4, &mut Rng::new(2)).unwrap();
        let q = BackboneParams::init(8, 4, &mut Rng::new(2)).unwrap();
        let img = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut Rng::new(3));
        let (a, b) = (features(&p, &img).unwrap(), features(&q, &img).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_reduction_is_a_pure_flatten() {
        let mut rng = Rng::new(4);
        let mut p = BackboneParams::init(4, 4, &mut rng).unwrap();
        p.reduce_w = Tensor::eye(4);
        let f = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, &p);
        let fi = g.constant(f.clone());
        let out = reduce_and_flatten(&mut g, &pid, fi).unwrap();
        let out = g.value(out);
        assert_eq!(out.shape(), &[15, 4]);
        // Row y*W+x holds pixel (y, x) across channels; unflatten and compare.
        for y in 0..3 {
            for x in 0..5 {
                for c in 0..4 {
                    assert_eq!(out.get2(y * 5 + x, c), f.data()[(c * 3 + y) * 5 + x]);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let p = BackboneParams::init(8, 4, &mut Rng::new(5)).unwrap();
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, &p);
        let f = g.constant(Tensor::zeros(&[4, 2, 2]));
        assert!(matches!(reduce_and_flatten(&mut g, &pid, f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backbone_gradients() {
        let mut rng = Rng::new(6);
        let p = BackboneParams::init(8, 4, &mut rng).unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
        let mut flat: Vec<Tensor> = p.leaves().into_iter().map(|(_, t)| t.clone()).collect();
        let np = flat.len();
        flat.push(img);
        let readout = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let report = finite_diff_check(
            |g, ids| {
                let mut it = ids[..np].iter();
                let pid = p.map_leaves(&mut |_| *it.next().unwrap());
                let f = extract(g, &pid, ids[np])?;
                let r = reduce_and_flatten(g, &pid, f)?;
                let w = g.constant(readout.clone());
                let m = g.mul(r, w)?;
                Ok(g.sum(m))
            },
            &flat,
            1e-6,
            1e-4,
        )
        .unwrap()
        .with_names(&names);
        assert!(report.passed(), "{report}");
    }
}
