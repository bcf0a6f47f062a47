//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every operation appends a node holding its output value and the
//! references it needs for the backward pass. Node order is execution
//! order, so a single reverse sweep visits each node once.

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use super::{kahan_sum, Array, DiffError, ParamId, ParameterStore};

/// Reference to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Mse(Var, Var),
    BernoulliNll(Var, Array),
    Clamp(Var, f64, f64),
    KlDiag {
        q_mean: Var,
        q_log_var: Var,
        p_mean: Var,
        p_log_var: Var,
    },
    Reparam {
        mean: Var,
        log_var: Var,
        eps: Array,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through differentiable parameters.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> DiffError {
    DiffError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Trainable parameter read from `store`.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(MatRef::new(av.data(), n, k), MatRef::new(bv.data(), k, m), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = bv.len();
        if xv.cols() != d || bv.cols() != d {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(kahan_sum(self.value(a).data().iter().copied()));
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Set mean pooling: `[n, d] -> [1, d]`, compensated summation per column.
    pub fn mean_pool_set(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.cols();
        let n = av.rows();
        let data = (0..d)
            .map(|j| kahan_sum((0..n).map(|i| av.data()[i * d + j])) / n as f64)
            .collect();
        let rg = self.rg(a);
        self.push(Array::row(data), Op::MeanRows(a), rg)
    }

    /// Repeat a `[1, d]` row `n` times: `[n, d]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rows() != 1 || n == 0 {
            return Err(DiffError::Shape {
                op: "repeat_rows",
                left: av.shape().to_vec(),
                right: vec![n],
            });
        }
        let d = av.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let rg = self.rg(a);
        Ok(self.push(Array::new(vec![n, d], data)?, Op::RepeatRows(a), rg))
    }

    /// Concatenate `[n, d_i]` matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Empty("concat"))?;
        let n = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(shape_err("concat", self.value(first), self.value(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Array::new(vec![n, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        let d = av.cols();
        if start >= end || end > d {
            return Err(DiffError::Shape {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let n = av.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * d + start..i * d + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Array::new(vec![n, w], data)?, Op::SliceCols(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Valid (unpadded) convolution.
    ///
    /// `input` is `[B, H, W, C]` (or `[H, W, C]`), `kernel` is `[kh, kw, C, O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var, DiffError> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let unbatched = iv.shape().len() == 3;
        let ishape: Vec<usize> = if unbatched {
            std::iter::once(1).chain(iv.shape().iter().copied()).collect()
        } else {
            iv.shape().to_vec()
        };
        let ks = kv.shape();
        if stride == 0
            || ishape.len() != 4
            || ks.len() != 4
            || ks[2] != ishape[3]
            || ks[0] > ishape[1]
            || ks[1] > ishape[2]
        {
            return Err(shape_err("conv2d", iv, kv));
        }
        let geom = ConvGeom {
            batch: ishape[0],
            in_h: ishape[1],
            in_w: ishape[2],
            in_c: ishape[3],
            k_h: ks[0],
            k_w: ks[1],
            out_h: (ishape[1] - ks[0]) / stride + 1,
            out_w: (ishape[2] - ks[1]) / stride + 1,
            stride,
            padding: 0,
        };
        let out_c = ks[3];
        let cols = im2col(&geom, iv.data());
        let mut out = vec![0.0; geom.out_positions() * out_c];
        gemm(
            MatRef::new(&cols, geom.out_positions(), geom.patch_len()),
            MatRef::new(kv.data(), geom.patch_len(), out_c),
            &mut out,
            0.0,
        );
        let mut shape = vec![geom.batch, geom.out_h, geom.out_w, out_c];
        if unbatched {
            shape.remove(0);
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(Array::new(shape, out)?, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Transposed convolution (the adjoint of a strided, padded convolution).
    ///
    /// `input` is `[B, H, W, Cin]`, `kernel` is `[Cin, kh, kw, Cout]`; the
    /// output is `[B, (H-1)*stride - 2*padding + kh, ..., Cout]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, DiffError> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let is = iv.shape();
        let ks = kv.shape();
        if stride == 0 || is.len() != 4 || ks.len() != 4 || ks[0] != is[3] {
            return Err(shape_err("conv_transpose2d", iv, kv));
        }
        let out_h = ((is[1] - 1) * stride + ks[1]).checked_sub(2 * padding);
        let out_w = ((is[2] - 1) * stride + ks[2]).checked_sub(2 * padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(shape_err("conv_transpose2d", iv, kv));
        };
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("conv_transpose2d", iv, kv));
        }
        let out_c = ks[3];
        // Geometry of the forward convolution this operation is the adjoint of.
        let geom = ConvGeom {
            batch: is[0],
            in_h: out_h,
            in_w: out_w,
            in_c: out_c,
            k_h: ks[1],
            k_w: ks[2],
            out_h: is[1],
            out_w: is[2],
            stride,
            padding,
        };
        let positions = geom.out_positions();
        let mut cols = vec![0.0; positions * geom.patch_len()];
        gemm(
            MatRef::new(iv.data(), positions, is[3]),
            MatRef::new(kv.data(), is[3], geom.patch_len()),
            &mut cols,
            0.0,
        );
        let mut out = vec![0.0; is[0] * out_h * out_w * out_c];
        col2im(&geom, &cols, &mut out);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            Array::new(vec![is[0], out_h, out_w, out_c], out)?,
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, DiffError> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(shape_err("mse", pv, tv));
        }
        let n = pv.len() as f64;
        let v = kahan_sum(pv.data().iter().zip(tv.data()).map(|(p, t)| (p - t) * (p - t))) / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Array::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Summed Bernoulli negative log-likelihood of `targets` under `sigmoid(logits)`.
    pub fn bernoulli_nll(&mut self, logits: Var, targets: &Array) -> Result<Var, DiffError> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(shape_err("bernoulli_nll", lv, targets));
        }
        if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(DiffError::InvalidArgument(
                "bernoulli targets must lie in [0, 1]".into(),
            ));
        }
        let v = kahan_sum(
            lv.data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| softplus(l) - t * l),
        );
        let rg = self.rg(logits);
        Ok(self.push(Array::scalar(v), Op::BernoulliNll(logits, targets.clone()), rg))
    }

    /// Elementwise clamp; gradient passes only strictly inside the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// KL divergence between diagonal Gaussians, summed over all elements.
    pub fn kl_diag(
        &mut self,
        q_mean: Var,
        q_log_var: Var,
        p_mean: Var,
        p_log_var: Var,
    ) -> Result<Var, DiffError> {
        let shape = self.value(q_mean).shape().to_vec();
        for v in [q_log_var, p_mean, p_log_var] {
            if self.value(v).shape() != shape.as_slice() {
                return Err(shape_err("kl_diag", self.value(q_mean), self.value(v)));
            }
        }
        let kl = super::gaussian::kl_terms(
            self.value(q_mean).data(),
            self.value(q_log_var).data(),
            self.value(p_mean).data(),
            self.value(p_log_var).data(),
        );
        let rg = [q_mean, q_log_var, p_mean, p_log_var].iter().any(|&v| self.rg(v));
        Ok(self.push(
            Array::scalar(kl),
            Op::KlDiag {
                q_mean,
                q_log_var,
                p_mean,
                p_log_var,
            },
            rg,
        ))
    }

    /// `mean + exp(log_var / 2) * eps`; `eps` is treated as a constant.
    pub fn reparameterize(&mut self, mean: Var, log_var: Var, eps: Array) -> Result<Var, DiffError> {
        let (mv, lv) = (self.value(mean), self.value(log_var));
        if mv.shape() != lv.shape() || mv.shape() != eps.shape() {
            return Err(shape_err("reparameterize", mv, &eps));
        }
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        let out = Array::new(mv.shape().to_vec(), data)?;
        let rg = self.rg(mean) || self.rg(log_var);
        Ok(self.push(out, Op::Reparam { mean, log_var, eps }, rg))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss`, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<(), DiffError> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g.data());
            }
        }
        Ok(())
    }

    fn backprop(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    accumulate(grads, *a, av.shape(), |buf| {
                        gemm(MatRef::new(gd, n, m), MatRef::new(bv.data(), k, m).t(), buf, 1.0)
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.shape(), |buf| {
                        gemm(MatRef::new(av.data(), n, k).t(), MatRef::new(gd, n, m), buf, 1.0)
                    });
                }
            }
            Op::AddBias(x, b) => {
                self.pass_through(grads, *x, gd);
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let d = bv.len();
                    accumulate(grads, *b, bv.shape(), |buf| {
                        for row in gd.chunks(d) {
                            for (o, v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.pass_through(grads, *a, gd);
                self.pass_through(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.pass_through(grads, *a, gd);
                if self.rg(*b) {
                    self.accumulate_map(grads, *b, |i| -gd[i]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate_map(grads, *a, |i| gd[i] * bv[i]);
                }
                if self.rg(*b) {
                    self.accumulate_map(grads, *b, |i| gd[i] * av[i]);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    self.accumulate_map(grads, *a, |i| gd[i] * s);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let av = self.value(*a).data();
                    self.accumulate_map(grads, *a, |i| if av[i] > 0.0 { gd[i] } else { 0.0 });
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let out = node.value.data();
                    self.accumulate_map(grads, *a, |i| gd[i] * out[i]);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let s = gd[0];
                    self.accumulate_map(grads, *a, |_| s);
                }
            }
            Op::MeanRows(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let d = av.cols();
                    let inv = 1.0 / av.rows() as f64;
                    self.accumulate_map(grads, *a, |i| gd[i % d] * inv);
                }
            }
            Op::RepeatRows(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let d = av.cols();
                    accumulate(grads, *a, av.shape(), |buf| {
                        for row in gd.chunks(d) {
                            for (o, v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate_map(grads, p, |idx| {
                            let (i, j) = (idx / w, idx % w);
                            gd[i * total + offset + j]
                        });
                    }
                    offset += w;
                }
                debug_assert_eq!(n * total, gd.len());
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let d = self.value(*a).cols();
                    let w = node.value.cols();
                    let start = *start;
                    self.accumulate_map(grads, *a, |idx| {
                        let (i, j) = (idx / d, idx % d);
                        if j >= start && j < start + w {
                            gd[i * w + j - start]
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::Reshape(a) => self.pass_through(grads, *a, gd),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                let out_c = kv.shape()[3];
                let positions = geom.out_positions();
                let plen = geom.patch_len();
                if self.rg(*kernel) {
                    let cols = im2col(geom, iv.data());
                    accumulate(grads, *kernel, kv.shape(), |buf| {
                        gemm(
                            MatRef::new(&cols, positions, plen).t(),
                            MatRef::new(gd, positions, out_c),
                            buf,
                            1.0,
                        )
                    });
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; positions * plen];
                    gemm(
                        MatRef::new(gd, positions, out_c),
                        MatRef::new(kv.data(), plen, out_c).t(),
                        &mut dcols,
                        0.0,
                    );
                    accumulate(grads, *input, iv.shape(), |buf| col2im(geom, &dcols, buf));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                let in_c = kv.shape()[0];
                let positions = geom.out_positions();
                let plen = geom.patch_len();
                let dcols = im2col(geom, gd);
                if self.rg(*kernel) {
                    accumulate(grads, *kernel, kv.shape(), |buf| {
                        gemm(
                            MatRef::new(iv.data(), positions, in_c).t(),
                            MatRef::new(&dcols, positions, plen),
                            buf,
                            1.0,
                        )
                    });
                }
                if self.rg(*input) {
                    accumulate(grads, *input, iv.shape(), |buf| {
                        gemm(
                            MatRef::new(&dcols, positions, plen),
                            MatRef::new(kv.data(), in_c, plen).t(),
                            buf,
                            1.0,
                        )
                    });
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let s = 2.0 * gd[0] / pv.len() as f64;
                if self.rg(*p) {
                    self.accumulate_map(grads, *p, |i| s * (pv[i] - tv[i]));
                }
                if self.rg(*t) {
                    self.accumulate_map(grads, *t, |i| -s * (pv[i] - tv[i]));
                }
            }
            Op::BernoulliNll(l, targets) => {
                if self.rg(*l) {
                    let lv = self.value(*l).data();
                    let td = targets.data();
                    let s = gd[0];
                    self.accumulate_map(grads, *l, |i| s * (sigmoid(lv[i]) - td[i]));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.rg(*a) {
                    let av = self.value(*a).data();
                    self.accumulate_map(grads, *a, |i| {
                        if av[i] > *lo && av[i] < *hi {
                            gd[i]
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::KlDiag {
                q_mean,
                q_log_var,
                p_mean,
                p_log_var,
            } => {
                let s = gd[0];
                let qm = self.value(*q_mean).data();
                let ql = self.value(*q_log_var).data();
                let pm = self.value(*p_mean).data();
                let pl = self.value(*p_log_var).data();
                if self.rg(*q_mean) {
                    self.accumulate_map(grads, *q_mean, |i| s * (qm[i] - pm[i]) * (-pl[i]).exp());
                }
                if self.rg(*p_mean) {
                    self.accumulate_map(grads, *p_mean, |i| -s * (qm[i] - pm[i]) * (-pl[i]).exp());
                }
                if self.rg(*q_log_var) {
                    self.accumulate_map(grads, *q_log_var, |i| {
                        s * 0.5 * ((ql[i] - pl[i]).exp() - 1.0)
                    });
                }
                if self.rg(*p_log_var) {
                    self.accumulate_map(grads, *p_log_var, |i| {
                        let d = qm[i] - pm[i];
                        s * 0.5 * (1.0 - (ql[i] - pl[i]).exp() - d * d * (-pl[i]).exp())
                    });
                }
            }
            Op::Reparam { mean, log_var, eps } => {
                self.pass_through(grads, *mean, gd);
                if self.rg(*log_var) {
                    let lv = self.value(*log_var).data();
                    let ed = eps.data();
                    self.accumulate_map(grads, *log_var, |i| gd[i] * 0.5 * (0.5 * lv[i]).exp() * ed[i]);
                }
            }
        }
    }

    fn pass_through(&self, grads: &mut [Option<Array>], v: Var, gd: &[f64]) {
        if self.rg(v) {
            self.accumulate_map(grads, v, |i| gd[i]);
        }
    }

    fn accumulate_map(&self, grads: &mut [Option<Array>], v: Var, f: impl Fn(usize) -> f64) {
        accumulate(grads, v, self.value(v).shape(), |buf| {
            for (i, o) in buf.iter_mut().enumerate() {
                *o += f(i);
            }
        });
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Array::zeros(shape));
    f(slot.data_mut());
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
