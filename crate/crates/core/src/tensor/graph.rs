use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, Vec<f64>),
    Sum(NodeId),
    RowSums(NodeId),
    AddRow(NodeId, NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, geom: ConvGeom },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::Sum(_) => "sum",
            Op::RowSums(_) => "row_sums",
            Op::AddRow(..) => "add_row",
            Op::Reshape(_) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of executed operations.
///
/// Every op evaluates eagerly and records its inputs; [`Graph::backward`]
/// replays the tape in reverse. Inputs always precede their consumers, so the
/// node order is already topological.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf that reached it.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a 2-D tensor, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// First recorded node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (NodeId(i), n.op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_2d("matmul_nt", self.value(a))?;
        let (n, k2) = require_2d("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T: inner dimensions differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        require_2d("transpose", self.value(a))?;
        let value = self.value(a).transpose2();
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("minimum", a, b, Op::Minimum(a, b), |x, y| if x.is_nan() || x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("maximum", a, b, Op::Maximum(a, b), |x, y| if x.is_nan() || x >= y { x } else { y })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x < 0.0 { 0.0 } else { x })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = require_2d("softmax_rows", self.value(a))?;
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(self.value(a).data(), r, c, &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::SoftmaxRows(a), rg))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = require_2d("layer_norm_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::LayerNormRows(a, inv_std), rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Per-row sums of a 2-D tensor, shape `[rows, 1]`.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = require_2d("row_sums", self.value(a))?;
        let x = self.value(a).data();
        let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[r, 1], out)?, Op::RowSums(a), rg))
    }

    /// Adds the vector `bias` (length `cols`) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = require_2d("add_row", self.value(a))?;
        let b = self.value(bias);
        if b.len() != c || b.rank() != 1 {
            return Err(Error::dim("add_row", format!("bias shape {:?} for rows of width {c}", b.shape())));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::AddRow(a, bias), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = require_2d("slice_cols", self.value(a))?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of width {c}", start + len)));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let (r, _) = require_2d("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} and {pr} differ")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = require_2d("select_rows", self.value(a))?;
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("select_rows", format!("row {bad} out of range for {r} rows")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[rows.len(), c], out)?, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// 2-D convolution of a `C_in×H×W` input with `C_out×C_in×k×k` weights
    /// and a `C_out` bias, zero padding `pad`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (c_in, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv2d", format!("input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kernel) = match self.shape(weight) {
            [o, i, kh, kw] if *i == c_in && kh == kw => (*o, *kh),
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("weight shape {s:?} incompatible with {c_in} input channels"),
                ))
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(Error::dim("conv2d", format!("bias shape {:?}, expected [{c_out}]", self.shape(bias))));
        }
        if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::dim("conv2d", format!("kernel {kernel} stride {stride} on {h}×{w}")));
        }
        let geom = ConvGeom { c_in, h, w, kernel, stride, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let npix = oh * ow;
        let mut cols = vec![0.0; geom.patch_len() * npix];
        kernels::im2col(self.value(input).data(), geom, &mut cols);
        let mut out = vec![0.0; c_out * npix];
        kernels::matmul(self.value(weight).data(), &cols, c_out, geom.patch_len(), npix, &mut out);
        for (o, b) in out.chunks_mut(npix).zip(self.value(bias).data()) {
            for v in o {
                *v += b;
            }
        }
        let rg = [input, weight, bias].iter().any(|&n| self.requires_grad(n));
        Ok(self.push(Tensor::new(&[c_out, oh, ow], out)?, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Returns gradients for every trainable leaf the loss depends on; gradients
    /// from fan-out are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.map.insert(NodeId(idx), g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
            Tensor::new(a.shape(), data).expect("shape preserved")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g.data(), tb.data(), m, n, k, &mut da);
                    acc(*a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(ta.data(), g.data(), m, k, n, &mut db);
                    acc(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.rows();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g.data(), tb.data(), m, n, k, &mut da);
                    acc(*a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(g.data(), ta.data(), m, n, k, &mut db);
                    acc(*b, Tensor::new(&[n, k], db)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose2()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(tb, &|bv, gv| bv * gv));
                acc(*b, zip_map(ta, &|av, gv| av * gv));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(tb, &|bv, gv| gv / bv));
                let db = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .zip(g.data())
                    .map(|((&av, &bv), &gv)| -gv * av / (bv * bv))
                    .collect();
                acc(*b, Tensor::new(tb.shape(), db)?);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.len();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..n {
                    let (x, z) = (ta.data()[i], tb.data()[i]);
                    let pick_a = if is_min { x <= z } else { x >= z };
                    if pick_a {
                        da[i] = g.data()[i];
                    } else {
                        db[i] = g.data()[i];
                    }
                }
                acc(*a, Tensor::new(ta.shape(), da)?);
                acc(*b, Tensor::new(tb.shape(), db)?);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a))?),
            Op::Relu(a) => acc(*a, zip_map(self.value(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, zip_map(y, &|s, gv| gv * s * (1.0 - s))),
            Op::Log(a) => acc(*a, zip_map(self.value(*a), &|x, gv| gv / x)),
            Op::Abs(a) => acc(*a, zip_map(self.value(*a), &|x, gv| gv * sign(x))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                zip_map(self.value(*a), &|x, gv| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::new(&[r, c], dx)?);
            }
            Op::LayerNormRows(a, inv_std) => {
                let (r, c) = y.dims2();
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let g_mean = gr.iter().sum::<f64>() / cf;
                    let gy_mean = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                acc(*a, Tensor::new(&[r, c], dx)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).dims2();
                acc(*a, Tensor::from_fn(&[r, c], |i| g.data()[i / c]));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, Tensor::new(&[c], db)?);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims2();
                let len = y.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(*a, Tensor::new(&[r, c], dx)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = y.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, Tensor::new(&[r, w], dp)?);
                    offset += w;
                }
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = self.value(*a).dims2();
                let mut dx = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*a, Tensor::new(&[r, c], dx)?);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let c_out = self.shape(*weight)[0];
                let k = geom.patch_len();
                let npix = geom.out_h() * geom.out_w();
                if self.requires_grad(*bias) {
                    let db = g.data().chunks(npix).map(|c| c.iter().sum()).collect();
                    acc(*bias, Tensor::new(&[c_out], db)?);
                }
                let need_w = self.requires_grad(*weight);
                let need_x = self.requires_grad(*input);
                if need_w {
                    let mut cols = vec![0.0; k * npix];
                    kernels::im2col(self.value(*input).data(), *geom, &mut cols);
                    let mut dw = vec![0.0; c_out * k];
                    kernels::matmul_nt(g.data(), &cols, c_out, npix, k, &mut dw);
                    acc(*weight, Tensor::new(self.shape(*weight), dw)?);
                }
                if need_x {
                    let mut dcols = vec![0.0; k * npix];
                    kernels::matmul_tn(self.value(*weight).data(), g.data(), c_out, k, npix, &mut dcols);
                    let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                    kernels::col2im(&dcols, *geom, &mut dx);
                    acc(*input, Tensor::new(self.shape(*input), dx)?);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
