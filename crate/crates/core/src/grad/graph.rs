//! Eager tape: every op computes its value immediately and records enough
//! to replay the chain rule in reverse creation order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{GradError, ParamId, ParamStore, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Rows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    GaussianNll {
        mu: Var,
        log_var: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic computation graph, rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(var.graph, self.graph, "var from a different graph");
        let shape = &self.shapes[var.index];
        match &self.grads[var.index] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Overwrite every parameter gradient in `store`; unreachable parameters get zeros.
    pub fn write_into(&self, store: &mut ParamStore) {
        store.zero_grad();
        for &(id, index) in &self.params {
            if let Some(g) = &self.grads[index] {
                let slot = store.get_mut(id).grad.as_mut().expect("zeroed");
                for (s, v) in slot.data_mut().iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let cols = t.last_dim();
    (t.numel() / cols.max(1), cols)
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes; logical shapes are
/// `[m, k]` and `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by callers to cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var, op: &'static str) -> Result<(), GradError> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(GradError::ForeignVar { op });
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> GradError {
        GradError::ShapeMismatch {
            op,
            node: format!("#{}", self.nodes.len()),
            lhs: self.nodes[a.index].value.shape().to_vec(),
            rhs: self.nodes[b.index].value.shape().to_vec(),
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "var from a different graph");
        &self.nodes[var.index].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `a[..., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = rows_of(av);
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        self.check(a, name)?;
        self.check(b, name)?;
        let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if av.shape() != bv.shape() {
            return Err(self.mismatch(name, a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1-D `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, GradError> {
        self.check(a, "add_row")?;
        self.check(row, "add_row")?;
        let (av, rv) = (&self.nodes[a.index].value, &self.nodes[row.index].value);
        if rv.shape().len() != 1 || av.last_dim() != rv.numel() {
            return Err(self.mismatch("add_row", a, row));
        }
        let n = rv.numel();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(rv.data()) {
                *x += r;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        self.check(x, name)?;
        let xv = &self.nodes[x.index].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GradError> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary(
            x,
            "gelu",
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        self.check(x, "softmax")?;
        let xv = &self.nodes[x.index].value;
        let (_, n) = rows_of(xv);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, GradError> {
        self.check(x, "layer_norm")?;
        self.check(gamma, "layer_norm")?;
        self.check(beta, "layer_norm")?;
        let xv = &self.nodes[x.index].value;
        let (gv, bv) = (&self.nodes[gamma.index].value, &self.nodes[beta.index].value);
        let (m, n) = rows_of(xv);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[batch, time, dim]`
    /// inputs with a causal mask. `key_valid` (length `batch * time`) hides
    /// padded keys; a query always sees itself.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var, GradError> {
        for var in [q, k, v] {
            self.check(var, "attention")?;
        }
        let qv = &self.nodes[q.index].value;
        if qv.shape().len() != 3 {
            return Err(self.mismatch("attention", q, k));
        }
        if self.nodes[k.index].value.shape() != qv.shape() {
            return Err(self.mismatch("attention", q, k));
        }
        if self.nodes[v.index].value.shape() != qv.shape() {
            return Err(self.mismatch("attention", q, v));
        }
        let (b, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(GradError::HeadSplit { dim: d, heads });
        }
        if let Some(mask) = key_valid {
            if mask.len() != b * t {
                return Err(GradError::BadData {
                    shape: vec![b, t],
                    len: mask.len(),
                });
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            qv.data(),
            self.nodes[k.index].value.data(),
            self.nodes[v.index].value.data(),
        );
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        let mut scores = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + off..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let visible = j == i || key_valid.is_none_or(|m| m[bi * t + j]);
                        if visible {
                            let kj = &kd[(bi * t + j) * d + off..][..hd];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
                        denom += *s;
                    }
                    let prow = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    let orow = &mut out[(bi * t + i) * d + off..][..hd];
                    for j in 0..=i {
                        let p = scores[j] / denom;
                        prow[j] = p;
                        if p != 0.0 {
                            let vj = &vd[(bi * t + j) * d + off..][..hd];
                            for (o, &x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }))
    }

    /// Looks up rows of a `[vocab, dim]` table; output shape is `index_shape + [dim]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var, GradError> {
        self.check(table, "gather")?;
        let tv = &self.nodes[table.index].value;
        if tv.shape().len() != 2 || index_shape.iter().product::<usize>() != indices.len() {
            return Err(GradError::BadData {
                shape: index_shape.to_vec(),
                len: indices.len(),
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(GradError::IndexOutOfRange { index: bad, len: vocab });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Selects rows (last axis kept) of `x` viewed as `[rows, dim]`; output is `[rows.len(), dim]`.
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, GradError> {
        self.check(x, "rows")?;
        let xv = &self.nodes[x.index].value;
        let (m, n) = rows_of(xv);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(GradError::IndexOutOfRange { index: bad, len: m });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            value,
            Op::Rows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check(a, "concat")?;
        self.check(b, "concat")?;
        let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let (ma, na) = rows_of(av);
        let (mb, nb) = rows_of(bv);
        let lead_a = &av.shape()[..av.shape().len().saturating_sub(1)];
        let lead_b = &bv.shape()[..bv.shape().len().saturating_sub(1)];
        if ma != mb || lead_a != lead_b {
            return Err(self.mismatch("concat", a, b));
        }
        let mut data = Vec::with_capacity(ma * (na + nb));
        for r in 0..ma {
            data.extend_from_slice(&av.data()[r * na..(r + 1) * na]);
            data.extend_from_slice(&bv.data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(na + nb);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        self.check(x, "reshape")?;
        let value = self.nodes[x.index].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        self.check(x, "sum")?;
        let s = self.nodes[x.index].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        self.check(x, "mean")?;
        let xv = &self.nodes[x.index].value;
        let s = xv.data().iter().sum::<f64>() / xv.numel().max(1) as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, GradError> {
        self.check(x, "dropout")?;
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let xv = &self.nodes[x.index].value;
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Weighted mean squared error. `row_weights` has one entry per row of
    /// `pred` viewed as `[rows, dim]`; the loss averages over weighted elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor, row_weights: Option<&[f64]>) -> Result<Var, GradError> {
        self.check(pred, "mse")?;
        let pv = &self.nodes[pred.index].value;
        if pv.shape() != target.shape() {
            return Err(GradError::ShapeMismatch {
                op: "mse",
                node: format!("#{}", self.nodes.len()),
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (m, n) = rows_of(pv);
        let weights = expand_row_weights(row_weights, m, n)?;
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for ((p, t), w) in pv.data().iter().zip(target.data()).zip(&weights) {
                loss += w * (p - t) * (p - t);
            }
            loss /= total;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights,
            },
        ))
    }

    /// Weighted mean of `(mu - y)^2 / exp(log_var) + log_var`.
    pub fn gaussian_nll(
        &mut self,
        mu: Var,
        log_var: Var,
        target: &Tensor,
        weights: Option<&[f64]>,
    ) -> Result<Var, GradError> {
        self.check(mu, "gaussian_nll")?;
        self.check(log_var, "gaussian_nll")?;
        let (mv, lv) = (&self.nodes[mu.index].value, &self.nodes[log_var.index].value);
        if mv.shape() != lv.shape() {
            return Err(self.mismatch("gaussian_nll", mu, log_var));
        }
        if mv.numel() != target.numel() {
            return Err(GradError::ShapeMismatch {
                op: "gaussian_nll",
                node: format!("#{}", self.nodes.len()),
                lhs: mv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let weights = expand_row_weights(weights, mv.numel(), 1)?;
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for i in 0..mv.numel() {
                let (m, l, y) = (mv.data()[i], lv.data()[i], target.data()[i]);
                loss += weights[i] * ((m - y) * (m - y) * (-l).exp() + l);
            }
            loss /= total;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::GaussianNll {
                mu,
                log_var,
                target: target.data().to_vec(),
                weights,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads, GradError> {
        if self.nodes.is_empty() {
            return Err(GradError::NoForward);
        }
        self.check(loss, "backward")?;
        let lv = &self.nodes[loss.index].value;
        if lv.numel() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Grads {
            graph: self.id,
            grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`Graph::backward`] and stores parameter gradients in `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), GradError> {
        self.backward(loss)?.write_into(store);
        Ok(())
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = rows_of(av);
                let n = bv.shape()[1];
                gemm(m, n, k, gout, false, bv.data(), true, acc(grads, *a, m * k), true);
                gemm(k, m, n, av.data(), true, gout, false, acc(grads, *b, k * n), true);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                add_into(acc(grads, *b, gout.len()), gout, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                add_into(acc(grads, *b, gout.len()), gout, -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let ga = acc(grads, *a, gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i] * bd[i];
                }
                let gb = acc(grads, *b, gout.len());
                for i in 0..gout.len() {
                    gb[i] += gout[i] * ad[i];
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                let n = val(*row).numel();
                let gr = acc(grads, *row, n);
                for chunk in gout.chunks(n) {
                    add_into(gr, chunk, 1.0);
                }
            }
            Op::Scale(x, c) => add_into(acc(grads, *x, gout.len()), gout, *c),
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = acc(grads, *x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = acc(grads, *x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * y[i];
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                let gx = acc(grads, *x, gout.len());
                for i in 0..gout.len() {
                    let v = xd[i];
                    let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    gx[i] += gout[i] * d;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim().max(1);
                let gx = acc(grads, *x, gout.len());
                for r in 0..gout.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gout[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = val(*gamma).data();
                let n = g.len();
                let m = gout.len() / n;
                {
                    let gg = acc(grads, *gamma, n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta, n);
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += gout[r * n + j];
                        }
                    }
                }
                let gx = acc(grads, *x, m * n);
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gout[r * n + j] * g[j];
                        dxhat[j] = d;
                        mean_d += d;
                        mean_dx += d * xhat[r * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gout, grads);
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let gt = acc(grads, *table, tv.numel());
                for (n, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &gout[n * d..(n + 1) * d], 1.0);
                }
            }
            Op::Rows { x, rows } => {
                let xv = val(*x);
                let n = xv.last_dim();
                let gx = acc(grads, *x, xv.numel());
                for (o, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * n..(r + 1) * n], &gout[o * n..(o + 1) * n], 1.0);
                }
            }
            Op::Concat(a, b) => {
                let (ma, na) = rows_of(val(*a));
                let nb = val(*b).last_dim();
                {
                    let ga = acc(grads, *a, ma * na);
                    for r in 0..ma {
                        add_into(&mut ga[r * na..(r + 1) * na], &gout[r * (na + nb)..][..na], 1.0);
                    }
                }
                let gb = acc(grads, *b, ma * nb);
                for r in 0..ma {
                    add_into(&mut gb[r * nb..(r + 1) * nb], &gout[r * (na + nb) + na..][..nb], 1.0);
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, gout.len()), gout, 1.0),
            Op::Sum(x) => {
                let n = val(*x).numel();
                for g in acc(grads, *x, n) {
                    *g += gout[0];
                }
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let c = gout[0] / n.max(1) as f64;
                for g in acc(grads, *x, n) {
                    *g += c;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * mask[i];
                }
            }
            Op::Mse { pred, target, weights } => {
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    let pd = val(*pred).data();
                    let gp = acc(grads, *pred, pd.len());
                    for i in 0..pd.len() {
                        gp[i] += gout[0] * 2.0 * weights[i] * (pd[i] - target[i]) / total;
                    }
                }
            }
            Op::GaussianNll {
                mu,
                log_var,
                target,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    let (md, ld) = (val(*mu).data(), val(*log_var).data());
                    let n = md.len();
                    let inv: Vec<f64> = ld.iter().map(|l| (-l).exp()).collect();
                    {
                        let gm = acc(grads, *mu, n);
                        for i in 0..n {
                            gm[i] += gout[0] * weights[i] * 2.0 * (md[i] - target[i]) * inv[i] / total;
                        }
                    }
                    let gl = acc(grads, *log_var, n);
                    for i in 0..n {
                        let e = md[i] - target[i];
                        gl[i] += gout[0] * weights[i] * (1.0 - e * e * inv[i]) / total;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qv = &self.nodes[q.index].value;
        let (b, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            qv.data(),
            self.nodes[k.index].value.data(),
            self.nodes[v.index].value.data(),
        );
        let mut gq = vec![0.0; b * t * d];
        let mut gk = vec![0.0; b * t * d];
        let mut gv = vec![0.0; b * t * d];
        let mut dp = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..t {
                    let prow = &probs[((bi * heads + h) * t + i) * t..][..t];
                    let go = &gout[(bi * t + i) * d + off..][..hd];
                    let mut s = 0.0;
                    for j in 0..=i {
                        let vj = &vd[(bi * t + j) * d + off..][..hd];
                        dp[j] = dot(go, vj);
                        s += prow[j] * dp[j];
                        if prow[j] != 0.0 {
                            let gvj = &mut gv[(bi * t + j) * d + off..][..hd];
                            for (g, &x) in gvj.iter_mut().zip(go) {
                                *g += prow[j] * x;
                            }
                        }
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let qi = &qd[(bi * t + i) * d + off..][..hd];
                        let kj = &kd[(bi * t + j) * d + off..][..hd];
                        let gqi = &mut gq[(bi * t + i) * d + off..][..hd];
                        for (g, &x) in gqi.iter_mut().zip(kj) {
                            *g += ds * x;
                        }
                        let gkj = &mut gk[(bi * t + j) * d + off..][..hd];
                        for (g, &x) in gkj.iter_mut().zip(qi) {
                            *g += ds * x;
                        }
                    }
                }
            }
        }
        add_into(acc(grads, q, gq.len()), &gq, 1.0);
        add_into(acc(grads, k, gk.len()), &gk, 1.0);
        add_into(acc(grads, v, gv.len()), &gv, 1.0);
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.index].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn expand_row_weights(weights: Option<&[f64]>, rows: usize, cols: usize) -> Result<Vec<f64>, GradError> {
    match weights {
        None => Ok(vec![1.0; rows * cols]),
        Some(w) if w.len() == rows => Ok(w.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect()),
        Some(w) => Err(GradError::BadData {
            shape: vec![rows],
            len: w.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0; 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_linear_gives_zero_output() {
        let mut store = ParamStore::new();
        let lin = Linear::zeros(&mut store, "head", 3, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, -5.0, 2.0]]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn detached_parameter_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let used = Linear::new(&mut store, "used", 2, 1, &mut rng).unwrap();
        let unused = Linear::new(&mut store, "unused", 2, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let _ = unused.forward(&mut g, &store, x).unwrap();
        let y = used.forward(&mut g, &store, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward_into(l, &mut store).unwrap();
        let gw = store.get(unused.weight).grad.as_ref().unwrap();
        assert!(gw.data().iter().all(|&v| v == 0.0));
        let gu = store.get(used.weight).grad.as_ref().unwrap();
        assert_eq!(gu.data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_on_empty_graph_fails() {
        let mut other = Graph::new();
        let x = other.input(Tensor::scalar(1.0));
        let g = Graph::new();
        assert!(matches!(g.backward(x), Err(GradError::NoForward)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn vars_from_another_graph_are_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.input(Tensor::scalar(1.0));
        let _ = g2.input(Tensor::scalar(1.0));
        assert!(matches!(g2.exp(x), Err(GradError::ForeignVar { .. })));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let y = crate::grad::causal_self_attention(&mut g, x, 2).unwrap();
        assert!(close(g.value(y).data(), &[0.3, -1.0, 2.0, 0.5], 1e-15));
    }

    #[test]
    fn uniform_scores_give_running_mean_of_values() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[1, 3, 2]));
        let v = g.input(Tensor::new(vec![1, 3, 2], vec![3.0, 0.0, 0.0, 6.0, 3.0, 3.0]).unwrap());
        let y = g.attention(q, q, v, 1, None).unwrap();
        assert!(close(g.value(y).data(), &[3.0, 0.0, 1.5, 3.0, 2.0, 3.0], 1e-12));
    }

    #[test]
    fn indivisible_heads_fail() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 5]));
        assert!(matches!(
            crate::grad::causal_self_attention(&mut g, x, 2),
            Err(GradError::HeadSplit { dim: 5, heads: 2 })
        ));
    }

    #[test]
    fn future_inputs_do_not_reach_past_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, d) = (5, 4);
        let data: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for out_t in 0..t {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![t, d], data.clone()).unwrap());
            let y = crate::grad::causal_self_attention(&mut g, x, 2).unwrap();
            let row = g.rows(y, &[out_t]).unwrap();
            let l = g.sum(row).unwrap();
            let gx = g.backward(l).unwrap().wrt(x);
            for later in out_t + 1..t {
                assert!(gx.data()[later * d..(later + 1) * d].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn perturbing_a_later_step_leaves_earlier_outputs_unchanged() {
        let run = |bump: f64| {
            let mut data = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
            data[6] += bump;
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![4, 2], data).unwrap());
            let y = crate::grad::causal_self_attention(&mut g, x, 1).unwrap();
            g.value(y).data().to_vec()
        };
        let (a, b) = (run(0.0), run(5.0));
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6..], b[6..]);
    }

    fn nll(mu: f64, log_var: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let m = g.input(Tensor::new(vec![1, 1], vec![mu]).unwrap());
        let l = g.input(Tensor::new(vec![1, 1], vec![log_var]).unwrap());
        let out = g
            .gaussian_nll(m, l, &Tensor::new(vec![1, 1], vec![y]).unwrap(), None)
            .unwrap();
        g.value(out).item().unwrap()
    }

    #[test]
    fn gaussian_nll_closed_forms() {
        assert_eq!(nll(1.0, 0.0, 1.0), 0.0);
        assert_eq!(nll(0.0, 0.0, 1.0), 1.0);
        assert!((nll(0.0, 2f64.ln(), 2.0) - (2.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_is_minimised_at_squared_error() {
        let (mu, y) = (0.3, 1.8);
        let best = (0..2000)
            .map(|i| 0.01 + i as f64 * 0.005)
            .min_by(|a, b| nll(mu, a.ln(), y).total_cmp(&nll(mu, b.ln(), y)))
            .unwrap();
        assert!((best - (mu - y) * (mu - y)).abs() <= 0.005);
    }

    #[test]
    fn mse_with_zero_weights_is_zero() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let l = g.mse(p, &t, Some(&[0.0, 0.0])).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
        let l = g.mse(p, &t, Some(&[0.0, 1.0])).unwrap();
        assert_eq!(g.value(l).item(), Some(4.0));
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        use crate::grad::nn::{Transformer, TrunkConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = TrunkConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            dropout: 0.1,
        };
        let trunk = Transformer::new(&mut store, "t", cfg, &mut rng).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![2, 3, 8], x.clone()).unwrap());
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let y = trunk.forward(&mut g, &store, xv, None, Some(&mut r)).unwrap();
            g.value(y).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
