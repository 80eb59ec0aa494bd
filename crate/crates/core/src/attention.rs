//! Scaled dot-product and multi-head attention.

use crate::error::{Error, Result};
use crate::params::{join, xavier, ParamTree};
use crate::tensor::{Graph, NodeId, Rng, Tensor};

/// Attention weights captured from one multi-head call, one `N_q×N_kv`
/// matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_tag: String,
    pub head_weights: Vec<Tensor>,
}

impl AttentionRecord {
    /// Head-averaged weights of one query row.
    pub fn mean_row(&self, query: usize) -> Vec<f64> {
        let n = self.head_weights.len() as f64;
        let cols = self.head_weights[0].cols();
        let mut out = vec![0.0; cols];
        for h in &self.head_weights {
            for (o, v) in out.iter_mut().zip(h.row(query)) {
                *o += v / n;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaDims {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// Per-head projections `W_i^Q, W_i^K` (`d_m×d_k`), `W_i^V` (`d_m×d_v`) and the
/// output projection `W^O` (`n_h·d_v × d_m`). Bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T = Tensor> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: T,
}

impl MhaParams<Tensor> {
    /// Xavier-initialized heads with `d_k = d_v = d_model / n_heads`.
    pub fn init(d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {n_heads} heads")));
        }
        let d_k = d_model / n_heads;
        let mut heads = || (0..n_heads).map(|_| xavier(d_model, d_k, rng)).collect::<Vec<_>>();
        let (w_q, w_k, w_v) = (heads(), heads(), heads());
        let w_o = xavier(n_heads * d_k, d_model, rng);
        Ok(MhaParams { w_q, w_k, w_v, w_o })
    }

    pub fn dims(&self) -> Result<MhaDims> {
        mha_dims(&self.w_q, &self.w_k, &self.w_v, &self.w_o, |t| t.shape().to_vec())
    }
}

impl MhaParams<NodeId> {
    pub fn dims(&self, g: &Graph) -> Result<MhaDims> {
        mha_dims(&self.w_q, &self.w_k, &self.w_v, &self.w_o, |id| g.shape(*id).to_vec())
    }
}

fn mha_dims<T>(
    w_q: &[T],
    w_k: &[T],
    w_v: &[T],
    w_o: &T,
    shape: impl Fn(&T) -> Vec<usize>,
) -> Result<MhaDims> {
    let n_heads = w_q.len();
    if n_heads == 0 || w_k.len() != n_heads || w_v.len() != n_heads {
        return Err(Error::Config(format!(
            "head counts differ: {} query, {} key, {} value projections",
            w_q.len(),
            w_k.len(),
            w_v.len()
        )));
    }
    let (d_model, d_k) = match shape(&w_q[0])[..] {
        [m, k] => (m, k),
        ref s => return Err(Error::Config(format!("W^Q must be 2-D, got {s:?}"))),
    };
    let d_v = match shape(&w_v[0])[..] {
        [m, v] if m == d_model => v,
        ref s => return Err(Error::Config(format!("W^V shape {s:?} for d_model {d_model}"))),
    };
    for h in 0..n_heads {
        if shape(&w_q[h]) != [d_model, d_k] || shape(&w_k[h]) != [d_model, d_k] {
            return Err(Error::Config(format!("head {h}: W^Q/W^K must be {d_model}×{d_k}")));
        }
        if shape(&w_v[h]) != [d_model, d_v] {
            return Err(Error::Config(format!("head {h}: W^V must be {d_model}×{d_v}")));
        }
    }
    if shape(w_o) != [n_heads * d_v, d_model] {
        return Err(Error::Config(format!(
            "W^O shape {:?}, expected [{}, {d_model}]",
            shape(w_o),
            n_heads * d_v
        )));
    }
    Ok(MhaDims { n_heads, d_model, d_k, d_v })
}

impl<T> ParamTree<T> for MhaParams<T> {
    type Mapped<U> = MhaParams<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MhaParams<U> {
        MhaParams {
            w_q: self.w_q.map_leaves(f),
            w_k: self.w_k.map_leaves(f),
            w_v: self.w_v.map_leaves(f),
            w_o: f(&self.w_o),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        f(join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        f(join(prefix, "w_o"), &mut self.w_o);
    }
}

/// `softmax(q·kᵀ / √d_k)·v`. Returns the output and the attention weights.
pub fn sdp_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let (kv_rows, v_rows) = (g.value(k).rows(), g.value(v).rows());
    if g.shape(k).len() != 2 || g.shape(v).len() != 2 || kv_rows != v_rows {
        return Err(Error::dim(
            "sdp_attention",
            format!("keys {:?} and values {:?} must share a row count", g.shape(k), g.shape(v)),
        ));
    }
    let d_k = g.value(q).cols();
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `Concat(H_1..H_h)·W^O` with `H_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
///
/// With `record = Some(tag)` the per-head weights are returned in an
/// [`AttentionRecord`].
pub fn multi_head(
    g: &mut Graph,
    p: &MhaParams<NodeId>,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    record: Option<&str>,
) -> Result<(NodeId, Option<AttentionRecord>)> {
    let dims = p.dims(g)?;
    for (what, id) in [("queries", q_in), ("keys", k_in), ("values", v_in)] {
        match g.shape(id) {
            [_, c] if *c == dims.d_model => {}
            s => {
                return Err(Error::Config(format!(
                    "{what} shape {s:?} does not have d_model = {} columns",
                    dims.d_model
                )))
            }
        }
    }
    let mut heads = Vec::with_capacity(dims.n_heads);
    let mut weights = Vec::new();
    for h in 0..dims.n_heads {
        let q = g.matmul(q_in, p.w_q[h])?;
        let k = g.matmul(k_in, p.w_k[h])?;
        let v = g.matmul(v_in, p.w_v[h])?;
        let (out, w) = sdp_attention(g, q, k, v)?;
        heads.push(out);
        if record.is_some() {
            weights.push(g.value(w).clone());
        }
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(cat, p.w_o)?;
    let rec = record.map(|tag| AttentionRecord { layer_tag: tag.to_string(), head_weights: weights });
    Ok((out, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind_constants;
    use crate::tensor::finite_diff_check;

    fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (qi, ki, vi) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (o, w) = sdp_attention(&mut g, qi, ki, vi).unwrap();
        (g.value(o).clone(), g.value(w).clone())
    }

    /// Direct evaluation of the attention formula with explicit loops.
    fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (nq, dk) = q.dims2();
        let (nkv, dv) = v.dims2();
        let mut out = Tensor::zeros(&[nq, dv]);
        for i in 0..nq {
            let logits: Vec<f64> = (0..nkv)
                .map(|j| (0..dk).map(|t| q.get2(i, t) * k.get2(j, t)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dv {
                out.data_mut()[i * dv + c] = (0..nkv).map(|j| e[j] / z * v.get2(j, c)).sum();
            }
        }
        out
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(1);
        let k = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let (out, w) = attend(&Tensor::zeros(&[2, 4]), &k, &v);
        for x in w.data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
        for c in 0..3 {
            let mean: f64 = (0..5).map(|j| v.get2(j, c)).sum::<f64>() / 5.0;
            assert!((out.get2(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_key_selects_its_value() {
        let q = Tensor::from_rows(&[&[1.0, 0.0]]);
        // scores are q·k/√2: key 1 leads by 1000
        let s = 2f64.sqrt();
        let k = Tensor::from_rows(&[&[0.0, 0.0], &[1000.0 * s, 0.0], &[-3.0, 1.0]]);
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[-4.0, 7.5], &[0.5, 0.5]]);
        let (out, _) = attend(&q, &k, &v);
        assert!((out.get2(0, 0) + 4.0).abs() < 1e-6);
        assert!((out.get2(0, 1) - 7.5).abs() < 1e-6);
    }

    #[test]
    fn scaling_by_sqrt_dk_matches_formula() {
        let mut rng = Rng::new(2);
        let q = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let (out, _) = attend(&q, &k, &v);
        assert!(out.max_abs_diff(&brute_attention(&q, &k, &v)) < 1e-12);
        // Tiling doubles d_k and the raw dot products; the divisor grows by √2 only.
        let tile = |t: &Tensor| {
            let (r, c) = t.dims2();
            Tensor::from_fn(&[r, 2 * c], |i| t.get2(i / (2 * c), i % (2 * c) % c))
        };
        let (q2, k2) = (tile(&q), tile(&k));
        let (out2, w2) = attend(&q2, &k2, &v);
        assert!(out2.max_abs_diff(&brute_attention(&q2, &k2, &v)) < 1e-12);
        let (_, w1) = attend(&q.map(|x| x * 2f64.sqrt()), &k, &v);
        assert!(w2.max_abs_diff(&w1) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[4, 3]));
        let v = g.constant(Tensor::zeros(&[5, 3]));
        assert!(matches!(sdp_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
        let k2 = g.constant(Tensor::zeros(&[5, 2]));
        assert!(matches!(sdp_attention(&mut g, q, k2, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_head_is_projected_attention() {
        let mut rng = Rng::new(3);
        let p = MhaParams::init(4, 1, &mut rng).unwrap();
        let xq = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let xkv = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let pid = bind_constants(&mut g, &p);
        let (q, kv) = (g.constant(xq.clone()), g.constant(xkv.clone()));
        let (out, rec) = multi_head(&mut g, &pid, q, kv, kv, Some("t")).unwrap();
        let mm = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let o = g.matmul(x, y).unwrap();
            g.value(o).clone()
        };
        let h = brute_attention(&mm(&xq, &p.w_q[0]), &mm(&xkv, &p.w_k[0]), &mm(&xkv, &p.w_v[0]));
        let expected = mm(&h, &p.w_o);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
        assert_eq!(rec.unwrap().head_weights.len(), 1);
    }

    #[test]
    fn output_shape_independent_of_kv_count() {
        let mut rng = Rng::new(4);
        let p = MhaParams::init(8, 2, &mut rng).unwrap();
        for nkv in [1, 3, 17] {
            let mut g = Graph::new();
            let pid = bind_constants(&mut g, &p);
            let q = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
            let kv = g.constant(Tensor::randn(&[nkv, 8], 1.0, &mut rng));
            let (out, rec) = multi_head(&mut g, &pid, q, kv, kv, Some("x")).unwrap();
            assert_eq!(g.shape(out), &[5, 8]);
            for w in &rec.unwrap().head_weights {
                assert_eq!(w.shape(), &[5, nkv]);
                for i in 0..5 {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn default_head_geometry() {
        let p = MhaParams::init(256, 8, &mut Rng::new(0)).unwrap();
        let d = p.dims().unwrap();
        assert_eq!((d.n_heads, d.d_model, d.d_k, d.d_v), (8, 256, 32, 32));
    }

    #[test]
    fn inconsistent_params_are_config_errors() {
        let mut rng = Rng::new(5);
        let mut p = MhaParams::init(8, 2, &mut rng).unwrap();
        p.w_k.pop();
        assert!(matches!(p.dims(), Err(Error::Config(_))));
        let mut p = MhaParams::init(8, 2, &mut rng).unwrap();
        p.w_o = Tensor::zeros(&[4, 8]);
        assert!(matches!(p.dims(), Err(Error::Config(_))));
        assert!(MhaParams::init(10, 3, &mut rng).is_err());
    }

    #[test]
    fn multi_head_gradients() {
        let mut rng = Rng::new(6);
        let p = MhaParams::init(6, 2, &mut rng).unwrap();
        let xq = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let xkv = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut flat: Vec<Tensor> = p.leaves().into_iter().map(|(_, t)| t.clone()).collect();
        flat.push(xq);
        flat.push(xkv);
        let read = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let report = finite_diff_check(
            |g, ids| {
                let n = ids.len();
                let pid = MhaParams { w_q: ids[0..2].to_vec(), w_k: ids[2..4].to_vec(), w_v: ids[4..6].to_vec(), w_o: ids[6] };
                let (out, _) = multi_head(g, &pid, ids[n - 2], ids[n - 1], ids[n - 1], None)?;
                let r = g.constant(read.clone());
                let m = g.mul(out, r)?;
                Ok(g.sum(m))
            },
            &flat,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
