//! Named parameter trees.
//!
//! Model parameter structs are generic over their leaf type: `Tensor` for
//! stored weights, `NodeId` once bound to a graph, and `Tensor` again for
//! gradients or optimizer moments. Leaf names are dotted paths such as
//! `fusion.layer0.eca_search.w_q.1`.

use crate::error::Result;
use crate::tensor::{Gradients, Graph, NodeId, Rng, Tensor};

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));

    fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> ParamTree<T> for Vec<T> {
    type Mapped<U> = Vec<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Vec<U> {
        self.iter().map(f).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, t) in self.iter().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }
}

/// Register every tensor of a tree on `g` as a trainable leaf.
pub fn bind_params<P: ParamTree<Tensor>>(g: &mut Graph, p: &P) -> P::Mapped<NodeId> {
    p.map_leaves(&mut |t| g.param(t.clone()))
}

/// Register every tensor of a tree on `g` as a constant.
pub fn bind_constants<P: ParamTree<Tensor>>(g: &mut Graph, p: &P) -> P::Mapped<NodeId> {
    p.map_leaves(&mut |t| g.constant(t.clone()))
}

/// Collect the gradient of each bound leaf, zeros where the loss did not reach it.
pub fn collect_grads<P: ParamTree<NodeId>>(g: &Graph, ids: &P, grads: &Gradients) -> P::Mapped<Tensor> {
    ids.map_leaves(&mut |id| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*id))))
}

pub fn param_count<P: ParamTree<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// Weight matrix `in×out` plus bias `out`, applied as `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl Linear<Tensor> {
    /// Xavier-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear { w: xavier(fan_in, fan_out, rng), b: Tensor::zeros(&[fan_out]) }
    }
}

impl Linear<NodeId> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, self.w)?;
        g.add_row(xw, self.b)
    }
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear { w: f(&self.w), b: f(&self.b) }
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

/// Xavier/Glorot uniform matrix of shape `fan_in×fan_out`.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -limit, limit, rng)
}
