//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation records its inputs on the tape; [`Graph::backward`] walks
//! the tape in reverse and applies each operation's hand-derived
//! vector-Jacobian product. Parameters are interned by address so that a
//! model's tensors map to stable leaves for the lifetime of the borrow.

use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::ttt::TttParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    Concat0(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
    },
    Standardize {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Affine {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        k: usize,
    },
    UpsampleNearest2(Var),
    Bilinear(Var),
    CrossEntropy {
        logits: Var,
        target: Rc<[u8]>,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
    Ttt {
        x: Var,
        snapshots: Rc<[TttParams]>,
        init: Option<Vec<Var>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of tensor operations that can be differentiated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<*const Tensor, Var>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<*const Tensor, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a tensor registered with [`Graph::param`]; `None` if it never reached the loss.
    pub fn param(&self, t: &Tensor) -> Option<&Tensor> {
        self.params.get(&(t as *const Tensor)).and_then(|v| self.get(*v))
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable tensor. The same tensor always maps to the same leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "add: {:?} vs {:?}", x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape(), data).unwrap();
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape()[1..], y.shape()[1..], "concat0 trailing shapes");
        let mut shape = x.shape().to_vec();
        shape[0] += y.dim(0);
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let t = Tensor::new(&shape, data).unwrap();
        self.push(t, Op::Concat0(a, b), &[a, b])
    }

    /// `x·wᵀ + b` for `x` n×i and `w` o×i.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, i) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(0);
        assert_eq!(wv.dim(1), i, "linear: input width {} vs weight {:?}", i, wv.shape());
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(n, i, o, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let t = Tensor::new(&[n, o], out).unwrap();
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Linear { x, w, b }, &ins)
    }

    /// `a·bᵀ` for `a` n×d and `b` m×d.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d, m) = (av.dim(0), av.dim(1), bv.dim(0));
        assert_eq!(bv.dim(1), d);
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, d, m, av.data(), false, bv.data(), true, 0.0, &mut out);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::MatMulNt(a, b), &[a, b])
    }

    /// `a·b` for `a` n×m and `b` m×d.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m, d) = (av.dim(0), av.dim(1), bv.dim(1));
        assert_eq!(bv.dim(0), m);
        let mut out = vec![0.0; n * d];
        kernels::gemm(n, m, d, av.data(), false, bv.data(), false, 0.0, &mut out);
        self.push(Tensor::new(&[n, d], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    /// Row softmax of an n×m matrix; masked-out entries receive probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let m = xv.dim(1);
        let p = kernels::softmax_rows(xv.data(), m, mask);
        let t = Tensor::new(xv.shape(), p).unwrap();
        self.push(t, Op::Softmax { x }, &[x])
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn standardize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.dim(1);
        let (xhat, inv_std) = kernels::standardize_rows(xv.data(), d);
        let t = Tensor::new(xv.shape(), xhat.clone()).unwrap();
        self.push(t, Op::Standardize { x, xhat, inv_std }, &[x])
    }

    /// Per-column `x·gain + bias` on an n×d matrix.
    pub fn affine(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.dim(1);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), d);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        self.push(t, Op::Affine { x, gain, bias }, &[x, gain, bias])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let s = self.standardize(x);
        self.affine(s, gain, bias)
    }

    /// Dense convolution of a C×H×W map with an O×C×k×k kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (o, k) = (wv.dim(0), wv.dim(2));
        assert_eq!(wv.dim(1), c, "conv2d: {} input channels vs kernel {:?}", c, wv.shape());
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let out = kernels::conv2d(&geom, xv.data(), wv.data(), b.map(|b| self.value(b).data()), o);
        let t = Tensor::new(&[o, geom.out_h(), geom.out_w()], out).unwrap();
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, &ins)
    }

    /// Per-channel k×k convolution with same padding; `w` is C×k×k.
    pub fn depthwise(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let k = wv.dim(1);
        assert_eq!(wv.dim(0), c);
        let out = kernels::depthwise(c, h, wd, k, k / 2, xv.data(), wv.data());
        let t = Tensor::new(&[c, h, wd], out).unwrap();
        self.push(t, Op::Depthwise { x, w, k }, &[x, w])
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], out).unwrap();
        self.push(t, Op::UpsampleNearest2(x), &[x])
    }

    /// Bilinear resampling of a C×H×W map to C×oh×ow.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let out = kernels::bilinear(c, h, w, oh, ow, xv.data());
        let t = Tensor::new(&[c, oh, ow], out).unwrap();
        self.push(t, Op::Bilinear(x), &[x])
    }

    /// Mean per-pixel softmax cross-entropy of C×H×W logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, target: Rc<[u8]>) -> Var {
        let lv = self.value(logits);
        let (c, hw) = (lv.dim(0), lv.dim(1) * lv.dim(2));
        assert_eq!(target.len(), hw);
        let mut probs = vec![0.0; c * hw];
        let mut loss = 0.0;
        let l = lv.data();
        for p in 0..hw {
            let max = (0..c).map(|k| l[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (l[k * hw + p] - max).exp();
                probs[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                probs[k * hw + p] /= sum;
            }
            let tgt = target[p] as usize;
            loss += -(l[tgt * hw + p] - max - sum.ln());
        }
        let t = Tensor::new(&[1], vec![loss / hw as f64]).unwrap();
        self.push(t, Op::CrossEntropy { logits, target, probs }, &[logits])
    }

    /// Sum of scalar (single-element) nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|v| self.value(*v).data()[0]).sum();
        self.push(Tensor::new(&[1], vec![s]).unwrap(), Op::Sum(xs.to_vec()), xs)
    }

    /// Row-wise TTT output `f(snapshot_t; x_t)` with the inner-model parameters held fixed.
    ///
    /// When `init` is given, gradients with respect to each snapshot are routed
    /// to those leaves, i.e. each snapshot is treated as `init + constant`.
    pub fn ttt(&mut self, x: Var, snapshots: Rc<[TttParams]>, init: Option<Vec<Var>>) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.dim(0), xv.dim(1));
        assert_eq!(snapshots.len(), n);
        let mut out = Tensor::zeros(&[n, d]);
        for (t, snap) in snapshots.iter().enumerate() {
            snap.forward_into(xv.row(t), out.row_mut(t));
        }
        let mut ins = vec![x];
        if let Some(init) = &init {
            ins.extend(init.iter().copied());
        }
        self.push(out, Op::Ttt { x, snapshots, init }, &ins)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(grads, v, self.value(v).shape()).iter_mut().zip(gd).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    acc(grads, *a, self.value(*a).shape())
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, v)| *d += s * v);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = acc(grads, *a, self.value(*a).shape());
                for i in 0..d.len() {
                    if x[i] > 0.0 {
                        d[i] += gd[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = acc(grads, *a, self.value(*a).shape());
                for i in 0..d.len() {
                    d[i] += gd[i] * kernels::gelu_grad(x[i]);
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, self.value(*a).shape()).iter_mut().zip(gd).for_each(|(d, s)| *d += s);
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(grads, *a, self.value(*a).shape())
                    .iter_mut()
                    .zip(gt.data())
                    .for_each(|(d, s)| *d += s);
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    acc(grads, *a, self.value(*a).shape())
                        .iter_mut()
                        .zip(&gd[..na])
                        .for_each(|(d, s)| *d += s);
                }
                if self.wants(*b) {
                    acc(grads, *b, self.value(*b).shape())
                        .iter_mut()
                        .zip(&gd[na..])
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.wants(*x) {
                    let dx = acc(grads, *x, xv.shape());
                    kernels::gemm(n, o, i, gd, false, wv.data(), false, 1.0, dx);
                }
                if self.wants(*w) {
                    let dw = acc(grads, *w, wv.shape());
                    kernels::gemm(o, n, i, gd, true, xv.data(), false, 1.0, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = acc(grads, *b, self.value(*b).shape());
                        for row in gd.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d, m) = (av.dim(0), av.dim(1), bv.dim(0));
                if self.wants(*a) {
                    kernels::gemm(n, m, d, gd, false, bv.data(), false, 1.0, acc(grads, *a, av.shape()));
                }
                if self.wants(*b) {
                    kernels::gemm(m, n, d, gd, true, av.data(), false, 1.0, acc(grads, *b, bv.shape()));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, d) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.wants(*a) {
                    kernels::gemm(n, d, m, gd, false, bv.data(), true, 1.0, acc(grads, *a, av.shape()));
                }
                if self.wants(*b) {
                    kernels::gemm(m, n, d, av.data(), true, gd, false, 1.0, acc(grads, *b, bv.shape()));
                }
            }
            Op::Softmax { x } => {
                let p = node.value.data();
                let m = node.value.dim(1);
                let dx = acc(grads, *x, node.value.shape());
                for ((pr, gr), dr) in p.chunks(m).zip(gd.chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Standardize { x, xhat, inv_std } => {
                let d = node.value.dim(1);
                let dx = acc(grads, *x, node.value.shape());
                for (r, ((xr, gr), dr)) in xhat.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dr[j] += inv_std[r] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
            Op::Affine { x, gain, bias } => {
                let xv = self.value(*x);
                let d = xv.dim(1);
                let gain_v = self.value(*gain).data();
                if self.wants(*x) {
                    let dx = acc(grads, *x, xv.shape());
                    for (dr, gr) in dx.chunks_mut(d).zip(gd.chunks(d)) {
                        for j in 0..d {
                            dr[j] += gr[j] * gain_v[j];
                        }
                    }
                }
                if self.wants(*gain) {
                    let dgn = acc(grads, *gain, &[d]);
                    for (xr, gr) in xv.data().chunks(d).zip(gd.chunks(d)) {
                        for j in 0..d {
                            dgn[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = acc(grads, *bias, &[d]);
                    for gr in gd.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let o = wv.dim(0);
                let hw = geom.out_h() * geom.out_w();
                let ck = geom.c * geom.k * geom.k;
                let pointwise = geom.k == 1 && geom.stride == 1 && geom.pad == 0;
                if self.wants(*w) {
                    let dw = acc(grads, *w, wv.shape());
                    if pointwise {
                        kernels::gemm(o, hw, ck, gd, false, xv.data(), true, 1.0, dw);
                    } else {
                        let cols = geom.im2col(xv.data());
                        kernels::gemm(o, hw, ck, gd, false, &cols, true, 1.0, dw);
                    }
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, xv.shape());
                    if pointwise {
                        kernels::gemm(ck, o, hw, wv.data(), true, gd, false, 1.0, dx);
                    } else {
                        let mut dcols = vec![0.0; ck * hw];
                        kernels::gemm(ck, o, hw, wv.data(), true, gd, false, 0.0, &mut dcols);
                        geom.col2im(&dcols, dx);
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = acc(grads, *b, &[o]);
                        for (d, chunk) in db.iter_mut().zip(gd.chunks(hw)) {
                            *d += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Depthwise { x, w, k } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                kernels::depthwise_backward(c, h, wd, *k, k / 2, xv.data(), wv.data(), gd, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(grads, *x, xv.shape()).iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, wv.shape()).iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
            }
            Op::UpsampleNearest2(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let dx = acc(grads, *x, xv.shape());
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::Bilinear(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let (oh, ow) = (node.value.dim(1), node.value.dim(2));
                kernels::bilinear_backward(c, h, w, oh, ow, gd, acc(grads, *x, xv.shape()));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let lv = self.value(*logits);
                let (c, hw) = (lv.dim(0), lv.dim(1) * lv.dim(2));
                let s = gd[0] / hw as f64;
                let dl = acc(grads, *logits, lv.shape());
                for k in 0..c {
                    for p in 0..hw {
                        let onehot = if target[p] as usize == k { 1.0 } else { 0.0 };
                        dl[k * hw + p] += s * (probs[k * hw + p] - onehot);
                    }
                }
            }
            Op::Sum(xs) => {
                for v in xs {
                    if self.wants(*v) {
                        acc(grads, *v, &[1])[0] += gd[0];
                    }
                }
            }
            Op::Ttt { x, snapshots, init } => {
                let xv = self.value(*x);
                let d = xv.dim(1);
                let mut dx = self.wants(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dp = init.as_ref().map(|_| {
                    let s = &snapshots[0];
                    TttParams::zeros(s.variant(), s.dim(), s.hidden().unwrap_or(0))
                });
                for (t, snap) in snapshots.iter().enumerate() {
                    let dxr = dx.as_mut().map(|dx| &mut dx.data_mut()[t * d..(t + 1) * d]);
                    snap.forward_vjp(xv.row(t), g.row(t), dxr, dp.as_mut());
                }
                if let Some(dx) = dx {
                    acc(grads, *x, xv.shape()).iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
                }
                if let (Some(init), Some(dp)) = (init, dp) {
                    for (v, t) in init.iter().zip(dp.tensors()) {
                        if self.wants(*v) {
                            acc(grads, *v, t.shape()).iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}
