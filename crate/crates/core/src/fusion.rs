//! Feature fusion network: 2-D sine positional encodings, the self-attention
//! (ECA) and cross-attention (CFA) blocks, and the stacked dual-branch network
//! with its final decoding cross-attention.

use crate::attention::{multi_head, AttentionRecord, MhaParams};
use crate::error::{Error, Result};
use crate::params::{join, xavier, ParamTree};
use crate::tensor::{Graph, NodeId, Rng, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Sine/cosine encoding of a `height×width` grid, one row per cell in
/// row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding2D {
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub temperature: f64,
    pub values: Tensor,
}

/// Channels `0..d/2` encode the row coordinate, `d/2..d` the column
/// coordinate. Within each half, channel `2i` is `sin(p / T^(2i/(d/2)))` and
/// `2i+1` the matching cosine, with `p` the integer cell coordinate.
pub fn sine_pos_encoding(d: usize, height: usize, width: usize, temperature: f64) -> Result<PosEncoding2D> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("empty grid {height}×{width}")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| temperature.powf(2.0 * i as f64 / half as f64)).collect();
    let mut data = Vec::with_capacity(height * width * d);
    for y in 0..height {
        for x in 0..width {
            for p in [y as f64, x as f64] {
                for f in &freqs {
                    let a = p / f;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    let values = Tensor::new(&[height * width, d], data)?;
    Ok(PosEncoding2D { d, height, width, temperature, values })
}

/// Two-layer perceptron `max(0, x W₁ + b₁) W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl FfnParams<Tensor> {
    pub fn init(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        FfnParams {
            w1: xavier(d, d_ff, rng),
            b1: Tensor::zeros(&[d_ff]),
            w2: xavier(d_ff, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

impl<T> ParamTree<T> for FfnParams<T> {
    type Mapped<U> = FfnParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}

/// Cross-attention followed by a residual FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct CfaParams<T = Tensor> {
    pub attn: MhaParams<T>,
    pub ffn: FfnParams<T>,
}

impl CfaParams<Tensor> {
    pub fn init(d: usize, n_heads: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(CfaParams { attn: MhaParams::init(d, n_heads, rng)?, ffn: FfnParams::init(d, d_ff, rng) })
    }
}

impl<T> ParamTree<T> for CfaParams<T> {
    type Mapped<U> = CfaParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> CfaParams<U> {
        CfaParams { attn: self.attn.map_leaves(f), ffn: self.ffn.map_leaves(f) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Two ECAs and two CFAs, one of each per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayerParams<T = Tensor> {
    pub eca_search: MhaParams<T>,
    pub eca_template: MhaParams<T>,
    pub cfa_search: CfaParams<T>,
    pub cfa_template: CfaParams<T>,
}

impl<T> ParamTree<T> for FusionLayerParams<T> {
    type Mapped<U> = FusionLayerParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FusionLayerParams<U> {
        FusionLayerParams {
            eca_search: self.eca_search.map_leaves(f),
            eca_template: self.eca_template.map_leaves(f),
            cfa_search: self.cfa_search.map_leaves(f),
            cfa_template: self.cfa_template.map_leaves(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.eca_search.visit(&join(prefix, "eca_search"), f);
        self.eca_template.visit(&join(prefix, "eca_template"), f);
        self.cfa_search.visit(&join(prefix, "cfa_search"), f);
        self.cfa_template.visit(&join(prefix, "cfa_template"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.eca_search.visit_mut(&join(prefix, "eca_search"), f);
        self.eca_template.visit_mut(&join(prefix, "eca_template"), f);
        self.cfa_search.visit_mut(&join(prefix, "cfa_search"), f);
        self.cfa_template.visit_mut(&join(prefix, "cfa_template"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = Tensor> {
    pub layers: Vec<FusionLayerParams<T>>,
    pub decoder: CfaParams<T>,
}

impl FusionParams<Tensor> {
    pub fn init(d: usize, n_heads: usize, d_ff: usize, n_layers: usize, rng: &mut Rng) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("fusion network needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|_| {
                Ok(FusionLayerParams {
                    eca_search: MhaParams::init(d, n_heads, rng)?,
                    eca_template: MhaParams::init(d, n_heads, rng)?,
                    cfa_search: CfaParams::init(d, n_heads, d_ff, rng)?,
                    cfa_template: CfaParams::init(d, n_heads, d_ff, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FusionParams { layers, decoder: CfaParams::init(d, n_heads, d_ff, rng)? })
    }
}

impl<T> ParamTree<T> for FusionParams<T> {
    type Mapped<U> = FusionParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FusionParams<U> {
        FusionParams {
            layers: self.layers.iter().map(|l| l.map_leaves(f)).collect(),
            decoder: self.decoder.map_leaves(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Parameter count of a fusion network, by formula.
pub fn fusion_param_count(d: usize, d_ff: usize, n_heads: usize, n_layers: usize) -> usize {
    let dk = d / n_heads;
    let mha = n_heads * (3 * d * dk) + n_heads * dk * d;
    let ffn = d * d_ff + d_ff + d_ff * d + d;
    n_layers * 2 * mha + n_layers * 2 * (mha + ffn) + (mha + ffn)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOptions {
    pub temperature: f64,
    /// Row-normalize after every residual addition. Off reproduces the bare
    /// residual equations.
    pub post_norm: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { temperature: 10_000.0, post_norm: false }
    }
}

/// A flattened feature grid on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GridFeatures {
    pub features: NodeId,
    pub height: usize,
    pub width: usize,
}

fn maybe_norm(g: &mut Graph, x: NodeId, opts: &FusionOptions) -> Result<NodeId> {
    if opts.post_norm {
        g.layer_norm_rows(x, NORM_EPS)
    } else {
        Ok(x)
    }
}

fn check_rows(op: &'static str, g: &Graph, x: NodeId, pe: NodeId) -> Result<()> {
    if g.shape(x) != g.shape(pe) {
        return Err(Error::dim(
            op,
            format!("features {:?} and positional encoding {:?} differ", g.shape(x), g.shape(pe)),
        ));
    }
    Ok(())
}

/// `X + MultiHead(X + P, X + P, X)`.
pub fn eca_forward(
    g: &mut Graph,
    p: &MhaParams<NodeId>,
    x: NodeId,
    pe: NodeId,
    opts: &FusionOptions,
    record: Option<&str>,
) -> Result<(NodeId, Option<AttentionRecord>)> {
    check_rows("eca", g, x, pe)?;
    let xp = g.add(x, pe)?;
    let (attn, rec) = multi_head(g, p, xp, xp, x, record)?;
    let out = g.add(x, attn)?;
    Ok((maybe_norm(g, out, opts)?, rec))
}

pub fn ffn_forward(g: &mut Graph, p: &FfnParams<NodeId>, x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

/// `X̃ = X_q + MultiHead(X_q + P_q, X_kv + P_kv, X_kv)`, then `X̃ + FFN(X̃)`.
#[allow(clippy::too_many_arguments)]
pub fn cfa_forward(
    g: &mut Graph,
    p: &CfaParams<NodeId>,
    x_q: NodeId,
    p_q: NodeId,
    x_kv: NodeId,
    p_kv: NodeId,
    opts: &FusionOptions,
    record: Option<&str>,
) -> Result<(NodeId, Option<AttentionRecord>)> {
    check_rows("cfa", g, x_q, p_q)?;
    check_rows("cfa", g, x_kv, p_kv)?;
    let q = g.add(x_q, p_q)?;
    let k = g.add(x_kv, p_kv)?;
    let (attn, rec) = multi_head(g, &p.attn, q, k, x_kv, record)?;
    let mixed = g.add(x_q, attn)?;
    let mixed = maybe_norm(g, mixed, opts)?;
    let ff = ffn_forward(g, &p.ffn, mixed)?;
    let out = g.add(mixed, ff)?;
    Ok((maybe_norm(g, out, opts)?, rec))
}

pub struct FusionOutput {
    /// Decoded search-branch features, one row per search cell.
    pub features: NodeId,
    pub records: Vec<AttentionRecord>,
}

/// Runs the stacked fusion layers and the final decoding CFA.
///
/// Attention sites are tagged `L{n}_search_self`, `L{n}_template_self`,
/// `L{n}_search_cross`, `L{n}_template_cross` for layer `n` (1-based) and
/// `L{N+1}_decode` for the decoder.
pub fn fusion_forward(
    g: &mut Graph,
    p: &FusionParams<NodeId>,
    template: GridFeatures,
    search: GridFeatures,
    opts: &FusionOptions,
    record: bool,
) -> Result<FusionOutput> {
    fusion_forward_ordered(g, p, template, search, opts, record, false)
}

pub(crate) fn fusion_forward_ordered(
    g: &mut Graph,
    p: &FusionParams<NodeId>,
    template: GridFeatures,
    search: GridFeatures,
    opts: &FusionOptions,
    record: bool,
    template_first: bool,
) -> Result<FusionOutput> {
    if p.layers.is_empty() {
        return Err(Error::Config("fusion network has no layers".into()));
    }
    let d = p.decoder.attn.dims(g)?.d_model;
    for (name, grid) in [("template", template), ("search", search)] {
        if g.shape(grid.features) != [grid.height * grid.width, d] {
            return Err(Error::Config(format!(
                "{name} features {:?} do not match a {}×{} grid of width {d}",
                g.shape(grid.features),
                grid.height,
                grid.width
            )));
        }
    }
    let pe_z = sine_pos_encoding(d, template.height, template.width, opts.temperature)?;
    let pe_x = sine_pos_encoding(d, search.height, search.width, opts.temperature)?;
    let pz = g.constant(pe_z.values);
    let px = g.constant(pe_x.values);

    let mut records = Vec::new();
    let mut keep = |r: Option<AttentionRecord>| records.extend(r);
    let tag = |n: usize, site: &str| record.then(|| format!("L{n}_{site}"));

    let (mut z, mut x) = (template.features, search.features);
    for (i, layer) in p.layers.iter().enumerate() {
        let n = i + 1;
        let (ts, tt) = (tag(n, "search_self"), tag(n, "template_self"));
        let (zx, xz) = if template_first {
            let (z1, rz) = eca_forward(g, &layer.eca_template, z, pz, opts, tt.as_deref())?;
            let (x1, rx) = eca_forward(g, &layer.eca_search, x, px, opts, ts.as_deref())?;
            keep(rx);
            keep(rz);
            (z1, x1)
        } else {
            let (x1, rx) = eca_forward(g, &layer.eca_search, x, px, opts, ts.as_deref())?;
            let (z1, rz) = eca_forward(g, &layer.eca_template, z, pz, opts, tt.as_deref())?;
            keep(rx);
            keep(rz);
            (z1, x1)
        };
        let (cs, ct) = (tag(n, "search_cross"), tag(n, "template_cross"));
        // both CFAs read this layer's ECA outputs
        let (z2, x2) = if template_first {
            let (z2, rz) = cfa_forward(g, &layer.cfa_template, zx, pz, xz, px, opts, ct.as_deref())?;
            let (x2, rx) = cfa_forward(g, &layer.cfa_search, xz, px, zx, pz, opts, cs.as_deref())?;
            keep(rx);
            keep(rz);
            (z2, x2)
        } else {
            let (x2, rx) = cfa_forward(g, &layer.cfa_search, xz, px, zx, pz, opts, cs.as_deref())?;
            let (z2, rz) = cfa_forward(g, &layer.cfa_template, zx, pz, xz, px, opts, ct.as_deref())?;
            keep(rx);
            keep(rz);
            (z2, x2)
        };
        z = z2;
        x = x2;
    }
    let dt = tag(p.layers.len() + 1, "decode");
    let (f, rd) = cfa_forward(g, &p.decoder, x, px, z, pz, opts, dt.as_deref())?;
    keep(rd);
    Ok(FusionOutput { features: f, records })
}
