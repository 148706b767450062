//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every op records its parents and a backward closure. Nodes whose parents are all
//! constants are themselves constants and skip gradient work.

use std::collections::HashMap;

use crate::params::Params;
use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: `(grad_out, out_value, parent_values) -> one gradient per parent`.
/// A `None` entry means "no contribution".
pub type BackwardFn = Box<dyn Fn(&Matrix, &Matrix, &[&Matrix]) -> Vec<Option<Matrix>>>;

struct Node {
    value: Matrix,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Binds a named parameter as a leaf, once per tape. Frozen parameters become constants.
    pub fn param(&mut self, store: &Params, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if store.is_frozen(name) { self.constant(value) } else { self.leaf(value) };
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers an op with a hand-written backward.
    pub fn custom(&mut self, parents: &[Var], value: Matrix, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let parent_vals: Vec<&Matrix> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = bw(&g, &node.value, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape mismatch");
                    match &mut self.grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last `backward` root w.r.t. `v`, or `None` when it does not
    /// depend on `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when absent.
    pub fn grad_or_zero(&self, v: Var) -> Matrix {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shape(v);
            Matrix::zeros(r, c)
        })
    }

    /// Gradients of every bound, trainable parameter.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&Matrix>)> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, v)| (k.as_str(), self.grad(*v)))
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, 0.0);
        self.custom(
            &[a, b],
            out,
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                gemm(g, false, b, true, &mut ga, 0.0);
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                gemm(a, true, g, false, &mut gb, 0.0);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        self.custom(
            &[a, b],
            out,
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                gemm(g, false, b, false, &mut ga, 0.0);
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                gemm(g, true, a, false, &mut gb, 0.0);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], out, Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], out, Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scaled(-1.0))]))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "add_row expects a 1 x cols bias");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.custom(&[a, row], out, Box::new(|g, _, _| vec![Some(g.clone()), Some(column_sums(g))]))
    }

    /// `a · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(a, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            out,
            Box::new(|g, _, p| vec![Some(g.zip_map(p[1], |x, y| x * y)), Some(g.zip_map(p[0], |x, y| x * y))]),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.custom(&[a], out, Box::new(move |g, _, _| vec![Some(g.scaled(s))]))
    }

    /// Multiplies `a` by a `1 × 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(a).scaled(k);
        self.custom(
            &[a, s],
            out,
            Box::new(|g, _, p| {
                let k = p[1].item();
                let ds = g.data().iter().zip(p[0].data()).map(|(x, y)| x * y).sum::<f64>();
                vec![Some(g.scaled(k)), Some(Matrix::scalar(ds))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(|g, _, p| vec![Some(Matrix::filled(p[0].rows(), p[0].cols(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.custom(
            &[a],
            out,
            Box::new(|g, _, p| {
                let n = p[0].rows().max(1) as f64;
                let mut ga = Matrix::zeros(p[0].rows(), p[0].cols());
                for r in 0..ga.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let out = Matrix::from_vec(rows, cols, v.data().to_vec());
        self.custom(
            &[a],
            out,
            Box::new(|g, _, p| vec![Some(Matrix::from_vec(p[0].rows(), p[0].cols(), g.data().to_vec()))]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.custom(&[a], out, Box::new(|g, _, _| vec![Some(g.transpose())]))
    }

    // ---- elementwise nonlinearities ----

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh()));
        self.custom(
            &[a],
            out,
            Box::new(|g, _, p| {
                let d = p[0].map(|x| {
                    let u = K * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
                });
                vec![Some(g.zip_map(&d, |x, y| x * y))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.custom(&[a], out, Box::new(|g, y, _| vec![Some(g.zip_map(y, |g, s| g * s * (1.0 - s)))]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.custom(&[a], out, Box::new(|g, y, _| vec![Some(g.zip_map(y, |g, t| g * (1.0 - t * t)))]))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax_rows(a, None)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + offset`.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Var {
        self.masked_softmax_rows(a, Some(offset))
    }

    fn masked_softmax_rows(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let visible = causal_offset.map_or(va.cols(), |o| (r + o + 1).min(va.cols()));
            softmax_into(&va.row(r)[..visible], &mut out.row_mut(r)[..visible]);
        }
        self.custom(
            &[a],
            out,
            Box::new(|g, y, _| {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let va = self.value(a);
        let n = va.cols() as f64;
        let mut xhat = Matrix::zeros(va.rows(), va.cols());
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, x) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
            inv_std.push(is);
        }
        let normed = self.custom(
            &[a],
            xhat,
            Box::new(move |g, y, _| {
                let n = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(ga)]
            }),
        );
        let scaled = self.mul_row(normed, gain);
        self.add_row(scaled, bias)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "mul_row expects a 1 x cols row");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        self.custom(
            &[a, row],
            out,
            Box::new(|g, _, p| {
                let (a, w) = (p[0], p[1]);
                let mut ga = g.clone();
                let mut gw = Matrix::zeros(1, w.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga[(r, c)] *= w[(0, c)];
                        gw[(0, c)] += g[(r, c)] * a[(r, c)];
                    }
                }
                vec![Some(ga), Some(gw)]
            }),
        )
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&vals);
        let sizes: Vec<usize> = vals.iter().map(|m| m.rows()).collect();
        self.custom(
            parts,
            out,
            Box::new(move |g, _, p| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(p)
                    .map(|(&n, pv)| {
                        let gm = if n == 0 { Matrix::zeros(0, pv.cols()) } else { g.slice_rows(start, n) };
                        start += n;
                        Some(gm)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.custom(
            &[a],
            out,
            Box::new(move |g, _, p| {
                let mut ga = Matrix::zeros(p[0].rows(), p[0].cols());
                let c = ga.cols();
                ga.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Some(ga)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|m| m.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, total);
        for r in 0..rows {
            let mut c0 = 0;
            for m in &vals {
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + m.cols()].copy_from_slice(m.row(r));
                c0 += m.cols();
            }
        }
        self.custom(
            parts,
            out,
            Box::new(move |g, _, _| {
                let mut c0 = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut gm = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gm.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        c0 += w;
                        Some(gm)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.custom(
            &[a],
            out,
            Box::new(move |g, _, p| {
                let mut ga = Matrix::zeros(p[0].rows(), p[0].cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), vt.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vt.row(id));
        }
        let ids = ids.to_vec();
        self.custom(
            &[table],
            out,
            Box::new(move |g, _, p| {
                let mut gt = Matrix::zeros(p[0].rows(), p[0].cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                vec![Some(gt)]
            }),
        )
    }

    /// Mean token cross-entropy of row-wise logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "one target per logit row");
        assert!(!targets.is_empty(), "cross_entropy needs at least one row");
        let mut probs = Matrix::zeros(vl.rows(), vl.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            softmax_into(vl.row(r), probs.row_mut(r));
            loss -= log_softmax_at(vl.row(r), t);
        }
        let n = targets.len() as f64;
        let targets = targets.to_vec();
        self.custom(
            &[logits],
            Matrix::scalar(loss / n),
            Box::new(move |g, _, _| {
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[(r, t)] -= 1.0;
                }
                gl.scale_assign(g.item() / n);
                vec![Some(gl)]
            }),
        )
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `x` written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `log softmax(x)[t]`.
pub fn log_softmax_at(x: &[f64], t: usize) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x[t] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn primitive_ops_pass_gradient_check() {
        let a = rand_m(3, 4, 1);
        let b = rand_m(4, 2, 2);
        let c = rand_m(3, 4, 3);
        let row = rand_m(1, 4, 4);

        let r = check_gradients(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone()], |t, v| t.gelu(v[0]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone()], |t, v| t.sigmoid(v[0]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone()], |t, v| t.softmax_rows(v[0]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[rand_m(4, 4, 9)], |t, v| t.causal_softmax_rows(v[0], 0));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), row.clone(), rand_m(1, 4, 5)], |t, v| t.layer_norm(v[0], v[1], v[2]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), c.clone()], |t, v| {
            let x = t.concat_cols(&[v[0], v[1]]);
            let y = t.slice_cols(x, 2, 5);
            let z = t.concat_rows(&[y, y]);
            t.slice_rows(z, 1, 3)
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone()], |t, v| t.cross_entropy(v[0], &[1, 3, 0]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a.clone(), Matrix::scalar(0.7)], |t, v| t.scale_by(v[0], v[1]));
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients(&[a], |t, v| {
            let m = t.mean_rows(v[0]);
            let tr = t.transpose(m);
            t.reshape(tr, 2, 2)
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(2.0));
        let k = t.constant(Matrix::scalar(3.0));
        let y = t.mul(a, k);
        t.backward(y);
        assert_eq!(t.grad(a).unwrap().item(), 3.0);
        assert!(t.grad(k).is_none());
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let mut t = Tape::new();
        let a = t.leaf(rand_m(3, 3, 11));
        let s = t.causal_softmax_rows(a, 0);
        let v = t.value(s);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(0, 2)], 0.0);
        assert_eq!(v[(1, 2)], 0.0);
        assert!((v[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
