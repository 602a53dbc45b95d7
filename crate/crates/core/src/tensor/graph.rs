use super::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{MateError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sqrt(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    NarrowLast(Var, usize),
    ConcatLast(Vec<Var>),
    StackRows(Vec<Var>),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    /// Saved per-row norms.
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. A graph is single-threaded; independent graphs can live on
/// different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is tracked and
    /// reachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for tracked leaves that the
    /// root does not depend on.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    /// Registers a tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Untracked copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.tracked(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(MateError::Shape {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = va.zip_map(vb, f)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > 0.0)) {
            return Err(MateError::numeric("log of a non-positive value"));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > 0.0)) {
            return Err(MateError::numeric("sqrt of a non-positive value"));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Leading `d` entries along the last axis (the prefix of every row).
    pub fn narrow_last(&mut self, x: Var, d: usize) -> Result<Var> {
        let value = self.value(x).narrow_last(d)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::NarrowLast(x, d), rg))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MateError::param("concat of zero tensors"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(MateError::Shape {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = self.tracked(parts);
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Stacks `n` single-row tensors (shape `[c]` or `[1, c]`) into `n × c`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| MateError::param("stack of zero rows"))?;
        let c = self.value(*first).last_dim();
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let v = self.value(*r);
            if v.numel() != c || v.last_dim() != c {
                return Err(MateError::Shape {
                    op: "stack_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.tracked(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Softmax of `x / temperature` along the last axis, row by row.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let value = softmax_last(self.value(x), temperature)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x, temperature), rg))
    }

    /// Log-softmax of `x / temperature` along the last axis.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let t = self.value(x);
        check_finite(t, "log_softmax")?;
        let c = t.last_dim();
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
            let lse = row
                .iter()
                .map(|&v| (v / temperature - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            out.extend(row.iter().map(|&v| v / temperature - lse));
        }
        debug_assert_eq!(out.len(), t.rows() * c);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::LogSoftmaxRows(x, temperature), rg))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        check_finite(t, "l2_normalize")?;
        let c = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > eps) {
                return Err(MateError::numeric(format!(
                    "cannot normalize row {r}: norm {n:e} <= {eps:e}"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        debug_assert_eq!(out.len(), norms.len() * c);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows(x, norms), rg))
    }

    /// Weighted statistics pooling over the time axis.
    ///
    /// `x` is `T × C`, `weights` is `1 × T` (rows summing to one). Returns
    /// `1 × 2C`: the weighted mean followed by the weighted standard
    /// deviation `sqrt(max(E[x²] - E[x]², var_floor))`.
    pub fn stats_pool(&mut self, x: Var, weights: Var, var_floor: f64) -> Result<Var> {
        let mean = self.matmul(weights, x)?;
        let sq = self.mul(x, x)?;
        let second = self.matmul(weights, sq)?;
        let mean_sq = self.mul(mean, mean)?;
        let var = self.sub(second, mean_sq)?;
        let var = self.clamp_min(var, var_floor);
        let std = self.sqrt(var)?;
        self.concat_last(&[mean, std])
    }

    /// Unweighted mean over the rows of a `T × C` tensor, giving `1 × C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, _) = self.value(x).dims2("mean_rows")?;
        let w = self.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        self.matmul(w, x)
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(MateError::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip(g, vb, |gi, bi| gi * bi));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip(g, va, |gi, ai| gi * ai));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, zip(g, out, |gi, yi| gi * yi)),
            Op::Log(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, zip(g, vx, |gi, xi| gi / xi));
            }
            Op::Tanh(x) => self.accumulate(grads, *x, zip(g, out, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Sqrt(x) => self.accumulate(grads, *x, zip(g, out, |gi, yi| gi / (2.0 * yi))),
            Op::Softplus(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, zip(g, vx, |gi, xi| gi * sigmoid(xi)));
            }
            Op::ClampMin(x, floor) => {
                let vx = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip(g, vx, |gi, xi| if xi > *floor { gi } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g.data(), vb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, tensor(va.shape(), ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(va.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, tensor(vb.shape(), gb));
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("2-D gradient");
                self.accumulate(grads, *x, gt);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).expect("same numel");
                self.accumulate(grads, *x, gx);
            }
            Op::NarrowLast(x, d) => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let mut gx = vec![0.0; vx.numel()];
                for r in 0..vx.rows() {
                    gx[r * c..r * c + d].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, tensor(vx.shape(), gx));
            }
            Op::ConcatLast(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let w = vp.last_dim();
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(vp.numel());
                        for r in 0..vp.rows() {
                            gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, tensor(vp.shape(), gp));
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    if self.requires_grad(*r) {
                        let gr = g.row(i).to_vec();
                        self.accumulate(grads, *r, tensor(self.shape(*r), gr));
                    }
                }
            }
            Op::SoftmaxRows(x, temp) => {
                let c = out.last_dim();
                let mut gx = Vec::with_capacity(out.numel());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot) / temp));
                }
                debug_assert_eq!(gx.len(), out.rows() * c);
                self.accumulate(grads, *x, tensor(out.shape(), gx));
            }
            Op::LogSoftmaxRows(x, temp) => {
                let mut gx = Vec::with_capacity(out.numel());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let gsum: f64 = gr.iter().sum();
                    gx.extend(y.iter().zip(gr).map(|(yi, gi)| (gi - yi.exp() * gsum) / temp));
                }
                self.accumulate(grads, *x, tensor(out.shape(), gx));
            }
            Op::L2NormalizeRows(x, norms) => {
                let mut gx = Vec::with_capacity(out.numel());
                for (r, n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / n));
                }
                self.accumulate(grads, *x, tensor(out.shape(), gx));
            }
        }
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches its input")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("gradient shape matches its input")
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(MateError::param(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(MateError::numeric(format!("non-finite input to {op}")));
    }
    Ok(())
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Max-shifted softmax of `x / temperature` along the last axis.
pub(crate) fn softmax_last(t: &Tensor, temperature: f64) -> Result<Tensor> {
    check_finite(t, "softmax")?;
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v / temperature - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Softmax of a 1-D (or row-wise 2-D) tensor at the given temperature.
pub fn softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    softmax_last(x, temperature)
}

/// Unit-norm copy of every row; errors when a row norm is `<= eps`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.l2_normalize_rows(v, eps)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_root_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = x*x + x*x through a shared node: dy/dx = 4x
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, sq).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(MateError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let proj = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 0.]).unwrap());
        let col = g.constant(Tensor::matrix(2, 1, vec![5., 7.]).unwrap());
        let p = g.matmul(proj, col).unwrap();
        assert_eq!(g.value(p).data(), &[5., 0.]);

        let bad = g.constant(Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap());
        let err = g.matmul(m, bad).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[3, 1]"));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0; 4]), 1.0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);

        for c in [-50.0, 0.0, 7.25, 1e3] {
            let p = softmax(&Tensor::vector(vec![c, c + 3f64.ln()]), 1.0).unwrap();
            assert!((p.data()[0] - 0.25).abs() < 1e-12);
            assert!((p.data()[1] - 0.75).abs() < 1e-12);
        }

        // e^-1000 underflows to an exact zero after shifting.
        let p = softmax(&Tensor::vector(vec![1000.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_errors() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(softmax(&x, 0.0), Err(MateError::Param(_))));
        assert!(matches!(softmax(&x, -1.0), Err(MateError::Param(_))));
        let nan = Tensor::vector(vec![f64::NAN, 0.0]);
        assert!(matches!(softmax(&nan, 1.0), Err(MateError::Numeric(_))));
    }

    #[test]
    fn l2_normalize_examples() {
        let y = l2_normalize(&Tensor::vector(vec![3.0, 4.0]), 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&y, 1e-12).unwrap();
        for (a, b) in again.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let tiny = Tensor::vector(vec![1e-14, 0.0]);
        assert!(matches!(l2_normalize(&tiny, 1e-12), Err(MateError::Numeric(_))));
    }

    #[test]
    fn narrow_backward_scatters_into_prefix() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let p = g.narrow_last(x, 2).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
