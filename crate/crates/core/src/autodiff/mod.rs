//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks it in reverse and returns the gradient of a scalar
//! output with respect to every recorded node. Inference code can rewind the
//! tape with [`Tape::truncate`] to drop intermediate activations.

pub mod kernels;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    ConcatTiled {
        x: Var,
        z: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    CosineSigmoid {
        e: Var,
        r: Var,
    },
    WeightedRowSum {
        x: Var,
        weights: Vec<f64>,
    },
    Mean(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reparam {
        mean: Var,
        log_var: Var,
        noise: Vec<f64>,
    },
    Kl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<u8>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
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

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 3x3 convolution, zero padding 1, on a `[H, W, Cin]` map with weights
    /// `[3, 3, Cin, Cout]` and bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.value(w).shape();
        assert_eq!(ws[..3], [3, 3, cin], "conv weight shape {ws:?} vs input {xs:?}");
        let cout = ws[3];
        let ho = kernels::conv_out_len(h, stride);
        let wo = kernels::conv_out_len(wd, stride);
        let cols = kernels::im2col(self.value(x).data(), h, wd, cin, stride);
        let y = kernels::linear(
            &cols,
            self.value(w).data(),
            self.value(b).data(),
            ho * wo,
            9 * cin,
            cout,
        );
        self.push(
            Tensor::new(vec![ho, wo, cout], y),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            },
        )
    }

    /// Affine map over the trailing axis: `[.., in] -> [.., out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let inp = xv.last_dim();
        let rows = xv.rows();
        let ws = self.value(w).shape();
        assert_eq!(ws[0], inp, "linear weight {ws:?} vs input {:?}", xv.shape());
        let out = ws[1];
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(out);
        } else {
            *shape.last_mut().unwrap() = out;
        }
        let y = kernels::linear(
            xv.data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            inp,
            out,
        );
        self.push(Tensor::new(shape, y), Op::Linear { x, w, b })
    }

    /// `[m, k] x [k, n]`, or `[m, k] x [n, k]^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = (av.rows(), av.last_dim());
        let n = if trans_b { bv.rows() } else { bv.last_dim() };
        assert_eq!(if trans_b { bv.last_dim() } else { bv.rows() }, k);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut c, 0.0);
        self.push(Tensor::new(vec![m, n], c), Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.len(), self.value(b).len(), "add operands differ in size");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = v.data().iter().map(|&x| kernels::silu(x)).collect();
        self.push(Tensor::new(v.shape().to_vec(), y), Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = kernels::softmax_rows(v.data(), v.last_dim());
        self.push(Tensor::new(v.shape().to_vec(), y), Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (y, inv_std) = kernels::layer_norm_rows(v.data(), v.last_dim());
        self.push(
            Tensor::new(v.shape().to_vec(), y),
            Op::LayerNormRows { x, inv_std },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Nearest-neighbour 2x upsampling of a `[H, W, C]` map.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut y = vec![0.0; 4 * h * w * c];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((oy / 2) * w + ox / 2) * c;
                let dst = (oy * 2 * w + ox) * c;
                y[dst..dst + c].copy_from_slice(&v.data()[src..src + c]);
            }
        }
        self.push(Tensor::new(vec![2 * h, 2 * w, c], y), Op::Upsample2x(a))
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows(), "concat row mismatch");
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            y.extend_from_slice(ra);
            y.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(shape, y), Op::Concat(a, b))
    }

    /// Appends the vector `z` to every row of `x`.
    pub fn concat_tiled(&mut self, x: Var, z: Var) -> Var {
        let xv = self.value(x);
        let zv = self.value(z);
        let c = xv.last_dim();
        let mut y = Vec::with_capacity(xv.rows() * (c + zv.len()));
        for row in xv.data().chunks_exact(c) {
            y.extend_from_slice(row);
            y.extend_from_slice(zv.data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c + zv.len();
        self.push(Tensor::new(shape, y), Op::ConcatTiled { x, z })
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let c = xv.last_dim();
        assert_eq!(xv.rows(), sv.len(), "scale_rows length mismatch");
        let mut y = xv.data().to_vec();
        for (row, f) in y.chunks_exact_mut(c).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(Tensor::new(xv.shape().to_vec(), y), Op::ScaleRows { x, s })
    }

    /// `sigmoid(cos(e_i, r))` for every row `e_i` of `e`; output drops the
    /// trailing axis.
    pub fn cosine_sigmoid(&mut self, e: Var, r: Var) -> Var {
        let ev = self.value(e);
        let rv = self.value(r);
        let c = ev.last_dim();
        assert_eq!(c, rv.len(), "cosine_sigmoid dimension mismatch");
        let y = ev
            .data()
            .chunks_exact(c)
            .map(|row| kernels::sigmoid(kernels::cosine(row, rv.data())))
            .collect();
        let shape = ev.shape()[..ev.shape().len() - 1].to_vec();
        self.push(Tensor::new(shape, y), Op::CosineSigmoid { e, r })
    }

    /// `sum_i weights[i] * x_i` over the rows of `x`.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert_eq!(weights.len(), xv.rows());
        let mut y = vec![0.0; c];
        for (row, wgt) in xv.data().chunks_exact(c).zip(&weights) {
            if *wgt != 0.0 {
                for (o, v) in y.iter_mut().zip(row) {
                    *o += wgt * v;
                }
            }
        }
        self.push(Tensor::vector(y), Op::WeightedRowSum { x, weights })
    }

    /// Element-wise arithmetic mean of equally shaped nodes.
    pub fn mean(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = self.value(vars[0]).clone();
        for v in &vars[1..] {
            acc.add_assign(self.value(*v));
        }
        acc.scale(1.0 / vars.len() as f64);
        self.push(acc, Op::Mean(vars.to_vec()))
    }

    /// Sub-vector `[start, start + len)` of a 1-D node.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).data()[start..start + len].to_vec();
        self.push(Tensor::vector(v), Op::Slice { x, start })
    }

    /// `mean + noise * exp(log_var / 2)`.
    pub fn reparameterize(&mut self, mean: Var, log_var: Var, noise: Vec<f64>) -> Var {
        let m = self.value(mean).data();
        let lv = self.value(log_var).data();
        assert_eq!(m.len(), noise.len());
        let y = m
            .iter()
            .zip(lv)
            .zip(&noise)
            .map(|((m, l), e)| m + e * (0.5 * l).exp())
            .collect();
        self.push(
            Tensor::vector(y),
            Op::Reparam {
                mean,
                log_var,
                noise,
            },
        )
    }

    /// Closed-form KL(q || p) of diagonal Gaussians in (mean, log-variance)
    /// form. Rounding noise below zero is clamped in the value only.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let kl = kernels::kl_diag(
            self.value(mq).data(),
            self.value(lq).data(),
            self.value(mp).data(),
            self.value(lp).data(),
        );
        self.push(Tensor::scalar(kl.max(0.0)), Op::Kl { mq, lq, mp, lp })
    }

    /// Mean per-pixel two-class cross-entropy of `[.., 2]` logits.
    pub fn cross_entropy(&mut self, logits: Var, target: Vec<u8>) -> Var {
        let v = self.value(logits);
        assert_eq!(v.last_dim(), 2);
        assert_eq!(v.rows(), target.len());
        let ce = kernels::cross_entropy2(v.data(), &target);
        self.push(Tensor::scalar(ce), Op::CrossEntropy { logits, target })
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.value(*w).shape()[3];
                let rows = cols.len() / (9 * cin);
                let (dcols, dw, db) =
                    kernels::linear_backward(cols, self.value(*w).data(), gd, rows, 9 * cin, cout);
                let dx = kernels::col2im(&dcols, h, wd, cin, *stride);
                accumulate(grads, *x, self.value(*x).shape(), dx);
                accumulate(grads, *w, self.value(*w).shape(), dw);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) = kernels::linear_backward(
                    xv.data(),
                    wv.data(),
                    gd,
                    xv.rows(),
                    xv.last_dim(),
                    wv.shape()[1],
                );
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *w, wv.shape(), dw);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.last_dim());
                let n = g.last_dim();
                // da = g b^T (or g b when b was transposed)
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, gd, false, bv.data(), !*trans_b, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                if *trans_b {
                    // b is [n, k]: db = g^T a
                    kernels::gemm(n, m, k, gd, true, av.data(), false, &mut db, 0.0);
                } else {
                    kernels::gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a).shape(), gd.to_vec());
                accumulate(grads, *b, self.value(*b).shape(), gd.to_vec());
            }
            Op::Scale(a, f) => {
                let d = gd.iter().map(|v| v * f).collect();
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, gv)| gv * kernels::silu_grad(x))
                    .collect();
                accumulate(grads, *a, xv.shape(), d);
            }
            Op::SoftmaxRows(a) => {
                let d = kernels::softmax_rows_backward(node.value.data(), gd, g.last_dim());
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::LayerNormRows { x, inv_std } => {
                let d = kernels::layer_norm_rows_backward(
                    node.value.data(),
                    inv_std,
                    gd,
                    g.last_dim(),
                );
                accumulate(grads, *x, self.value(*x).shape(), d);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, self.value(*a).shape(), gd.to_vec());
            }
            Op::Upsample2x(a) => {
                let s = self.value(*a).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; h * w * c];
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        let dst = ((oy / 2) * w + ox / 2) * c;
                        let src = (oy * 2 * w + ox) * c;
                        for (o, v) in d[dst..dst + c].iter_mut().zip(&gd[src..src + c]) {
                            *o += v;
                        }
                    }
                }
                accumulate(grads, *a, s, d);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in gd.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, self.value(*a).shape(), da);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::ConcatTiled { x, z } => {
                let c = self.value(*x).last_dim();
                let dz_len = self.value(*z).len();
                let mut dx = Vec::with_capacity(self.value(*x).len());
                let mut dz = vec![0.0; dz_len];
                for row in gd.chunks_exact(c + dz_len) {
                    dx.extend_from_slice(&row[..c]);
                    for (o, v) in dz.iter_mut().zip(&row[c..]) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
                accumulate(grads, *z, self.value(*z).shape(), dz);
            }
            Op::ScaleRows { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let c = xv.last_dim();
                let mut dx = gd.to_vec();
                let mut ds = Vec::with_capacity(sv.len());
                for ((drow, xrow), f) in dx
                    .chunks_exact_mut(c)
                    .zip(xv.data().chunks_exact(c))
                    .zip(sv.data())
                {
                    ds.push(kernels::dot(drow, xrow));
                    drow.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *s, sv.shape(), ds);
            }
            Op::CosineSigmoid { e, r } => {
                let ev = self.value(*e);
                let rv = self.value(*r);
                let c = ev.last_dim();
                let mut de = vec![0.0; ev.len()];
                let mut dr = vec![0.0; rv.len()];
                for ((row, drow), (y, gv)) in ev
                    .data()
                    .chunks_exact(c)
                    .zip(de.chunks_exact_mut(c))
                    .zip(node.value.data().iter().zip(gd))
                {
                    let upstream = gv * y * (1.0 - y);
                    kernels::cosine_backward(row, rv.data(), upstream, drow, &mut dr);
                }
                accumulate(grads, *e, ev.shape(), de);
                accumulate(grads, *r, rv.shape(), dr);
            }
            Op::WeightedRowSum { x, weights } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (row, wgt) in dx.chunks_exact_mut(c).zip(weights) {
                    for (o, v) in row.iter_mut().zip(gd) {
                        *o = wgt * v;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Mean(vars) => {
                let f = 1.0 / vars.len() as f64;
                for v in vars {
                    let d = gd.iter().map(|x| x * f).collect();
                    accumulate(grads, *v, self.value(*v).shape(), d);
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::Reparam {
                mean,
                log_var,
                noise,
            } => {
                let lv = self.value(*log_var).data();
                let dl = lv
                    .iter()
                    .zip(noise)
                    .zip(gd)
                    .map(|((l, e), gv)| gv * e * 0.5 * (0.5 * l).exp())
                    .collect();
                accumulate(grads, *mean, self.value(*mean).shape(), gd.to_vec());
                accumulate(grads, *log_var, self.value(*log_var).shape(), dl);
            }
            Op::Kl { mq, lq, mp, lp } => {
                let up = gd[0];
                let parts = kernels::kl_diag_backward(
                    self.value(*mq).data(),
                    self.value(*lq).data(),
                    self.value(*mp).data(),
                    self.value(*lp).data(),
                );
                for (var, mut d) in [*mq, *lq, *mp, *lp].into_iter().zip(parts) {
                    d.iter_mut().for_each(|v| *v *= up);
                    accumulate(grads, var, self.value(var).shape(), d);
                }
            }
            Op::CrossEntropy { logits, target } => {
                let lv = self.value(*logits);
                let mut d = kernels::cross_entropy2_backward(lv.data(), target);
                d.iter_mut().for_each(|v| *v *= gd[0]);
                accumulate(grads, *logits, lv.shape(), d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta)),
    }
}
