use std::fmt;

use super::{Graph, NodeId, Rng, Tensor};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

/// One-sided slopes differing by more than this (relative) mark a kink
/// inside the ±eps stencil, e.g. a ReLU input crossing zero.
const KINK_GAP: f64 = 0.1;

/// At a kink the analytic value must match one of the one-sided slopes.
const KINK_MATCH: f64 = 1e-2;

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
    /// Coordinates judged against one-sided slopes because the stencil
    /// straddles a non-differentiable point.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Replace positional names with caller-supplied ones.
    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for (p, n) in self.params.iter_mut().zip(names) {
            p.name = n.as_ref().to_string();
        }
        self
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(f, "{verdict}: max rel error {:.3e} (tol {:.1e})", self.max_rel_error(), self.tol)?;
        if let Some(w) = self.worst() {
            write!(
                f,
                ", worst {}[{}] analytic {:.6e} numeric {:.6e}",
                w.name, w.worst_coord, w.analytic, w.numeric
            )?;
        }
        if self.kinks() > 0 {
            write!(f, ", {} kinked coordinates", self.kinks())?;
        }
        Ok(())
    }
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(f: &impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok(g.value(out).item())
}

/// Check reverse-mode gradients of `f` against central differences.
///
/// `f` receives one node per entry of `params` and must return a
/// one-element node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    compare_gradients(f, params, &analytic, eps, tol)
}

/// Compare supplied gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work: Vec<Tensor> = params.to_vec();
    let base = eval(&f, &work)?;
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: format!("param{pi}"),
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
            kinks: 0,
        };
        for i in 0..work[pi].len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let mut err = relative_error(a, numeric);
            if err > tol {
                let (fwd, bwd) = ((plus - base) / eps, (base - minus) / eps);
                let side = relative_error(a, fwd).min(relative_error(a, bwd));
                if relative_error(fwd, bwd) > KINK_GAP && side <= KINK_MATCH {
                    check.kinks += 1;
                    err = 0.0;
                }
            }
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_coord = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error <= tol;
        checks.push(check);
    }
    Ok(GradCheckReport { params: checks, tol })
}

/// Values bounded away from zero so kinked ops stay differentiable under ±eps.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.2, 1.5);
        if rng.unit() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn weighted_check(
    params: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    // Weight the output with a fixed random tensor so every element matters.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let shape = g.shape(out).to_vec();
    let mut rng = Rng::new(99);
    let weights = Tensor::randn(&shape, 1.0, &mut rng);
    finite_diff_check(
        |g, p| {
            let y = f(g, p)?;
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        },
        &params,
        eps,
        tol,
    )
}

/// Central-difference check of every graph operation on small random
/// inputs, each output weighted by a fixed random tensor.
pub fn op_gradient_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut check_op = |name: &'static str, params: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>| -> Result<()> {
        out.push((name, weighted_check(params, f, eps, tol)?));
        Ok(())
    };
    check_op("matmul", vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4, 2], 1.0, r)], &|g, p| g.matmul(p[0], p[1]))?;
    check_op("matmul_nt", vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[5, 4], 1.0, r)], &|g, p| g.matmul_nt(p[0], p[1]))?;
    check_op("transpose", vec![Tensor::randn(&[3, 4], 1.0, r)], &|g, p| g.transpose(p[0]))?;
    check_op("add", vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)], &|g, p| g.add(p[0], p[1]))?;
    check_op("sub", vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)], &|g, p| g.sub(p[0], p[1]))?;
    check_op("mul", vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)], &|g, p| g.mul(p[0], p[1]))?;
    check_op("div", vec![Tensor::randn(&[2, 3], 1.0, r), away_from_zero(&[2, 3], r)], &|g, p| g.div(p[0], p[1]))?;
    let a = Tensor::randn(&[2, 3], 1.0, r);
    let b = a.map(|v| v + 0.5);
    let b = Tensor::from_fn(&[2, 3], |i| if i % 2 == 0 { b.data()[i] } else { a.data()[i] - 0.5 });
    check_op("minimum", vec![a.clone(), b.clone()], &|g, p| g.minimum(p[0], p[1]))?;
    check_op("maximum", vec![a, b], &|g, p| g.maximum(p[0], p[1]))?;
    check_op("scale", vec![Tensor::randn(&[4], 1.0, r)], &|g, p| Ok(g.scale(p[0], -1.7)))?;
    check_op("add_scalar", vec![Tensor::randn(&[4], 1.0, r)], &|g, p| Ok(g.add_scalar(p[0], 0.3)))?;
    check_op("relu", vec![away_from_zero(&[3, 3], r)], &|g, p| Ok(g.relu(p[0])))?;
    check_op("sigmoid", vec![Tensor::randn(&[3, 3], 2.0, r)], &|g, p| Ok(g.sigmoid(p[0])))?;
    check_op("log", vec![Tensor::uniform(&[5], 0.3, 3.0, r)], &|g, p| Ok(g.log(p[0])))?;
    check_op("abs", vec![away_from_zero(&[5], r)], &|g, p| Ok(g.abs(p[0])))?;
    check_op("clamp", vec![Tensor::new(&[4], vec![-2.0, -0.5, 0.4, 3.0]).unwrap()], &|g, p| Ok(g.clamp(p[0], -1.0, 1.0)))?;
    check_op("softmax_rows", vec![Tensor::randn(&[3, 5], 2.0, r)], &|g, p| g.softmax_rows(p[0]))?;
    check_op("layer_norm_rows", vec![Tensor::randn(&[3, 6], 1.0, r)], &|g, p| g.layer_norm_rows(p[0], 1e-5))?;
    check_op("sum", vec![Tensor::randn(&[2, 3], 1.0, r)], &|g, p| Ok(g.sum(p[0])))?;
    check_op("row_sums", vec![Tensor::randn(&[3, 4], 1.0, r)], &|g, p| g.row_sums(p[0]))?;
    check_op("add_row", vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4], 1.0, r)], &|g, p| g.add_row(p[0], p[1]))?;
    check_op("reshape", vec![Tensor::randn(&[2, 6], 1.0, r)], &|g, p| g.reshape(p[0], &[3, 4]))?;
    check_op("slice_cols", vec![Tensor::randn(&[3, 6], 1.0, r)], &|g, p| g.slice_cols(p[0], 2, 3))?;
    check_op("concat_cols", vec![Tensor::randn(&[3, 2], 1.0, r), Tensor::randn(&[3, 3], 1.0, r)], &|g, p| g.concat_cols(&[p[0], p[1], p[0]]))?;
    check_op("select_rows", vec![Tensor::randn(&[4, 3], 1.0, r)], &|g, p| g.select_rows(p[0], &[3, 1, 3]))?;
    check_op(
        "conv2d",
        vec![Tensor::randn(&[2, 6, 5], 1.0, r), Tensor::randn(&[3, 2, 3, 3], 0.5, r), Tensor::randn(&[3], 1.0, r)],
        &|g, p| g.conv2d(p[0], p[1], p[2], 2, 1),
    )?;
    check_op(
        "conv2d_stride1",
        vec![Tensor::randn(&[1, 4, 4], 1.0, r), Tensor::randn(&[2, 1, 3, 3], 0.5, r), Tensor::randn(&[2], 1.0, r)],
        &|g, p| g.conv2d(p[0], p[1], p[2], 1, 1),
    )?;
    Ok(out)
}
