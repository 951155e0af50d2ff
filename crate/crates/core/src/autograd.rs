//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to every leaf created with
//! [`Graph::param`]. Graphs are cheap; training builds a fresh one per step.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{col2im_strided, im2col_strided, matmul, ConvGeometry, Element, MatRef, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Mean(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Concat(Vec<Var>),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GaussianValid {
        x: Var,
        kernel: Arc<Vec<T>>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::Concat(vs) => vs.clone(),
            Op::MaxPool2 { x, .. } | Op::GaussianValid { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record plus the values it produced.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Input that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    /// Leaf whose gradient [`Graph::backward`] reports.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Like [`Graph::param`] but shares the buffer instead of copying it.
    pub fn param_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Clamp to `[lo, hi]`; the gradient passes wherever the input lies in
    /// the closed interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.numel()).expect("element count");
        self.push(Tensor::scalar(v.sum() / n), Op::Mean(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(Tensor::scalar(v.sum()), Op::Sum(a))
    }

    /// 2-D convolution. `w` is `Cout x Cin x k x k`, `b` has `Cout` elements.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, k, k2] = wv.shape();
        assert_eq!(cin, wcin, "conv2d input channels");
        assert_eq!(k, k2, "square kernels only");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than padded input");
        let geo = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let mut out = Tensor::zeros([n, cout, geo.out_height(), geo.out_width()]);
        conv2d_forward(&xv, &wv, &geo, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b));
        }
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution. `w` is `Cin x Cout x k x k`; the output size is
    /// `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [wcin, cout, k, k2] = wv.shape();
        assert_eq!(cin, wcin, "conv_transpose2d input channels");
        assert_eq!(k, k2, "square kernels only");
        assert!(output_pad < stride.max(1), "output padding must be smaller than stride");
        let oh = (h - 1) * stride + k + output_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + output_pad - 2 * pad;
        let geo = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!((geo.out_height(), geo.out_width()), (h, wd));
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        conv_transpose2d_forward(&xv, &wv, &geo, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b));
        }
        self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    /// Concatenate along the channel axis.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let [n, _, h, w] = values[0].shape();
        let total_c: usize = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat shape mismatch");
                s[1]
            })
            .sum();
        let mut out = Tensor::zeros([n, total_c, h, w]);
        let plane = h * w;
        for i in 0..n {
            let dst = out.item_slice_mut(i);
            let mut offset = 0;
            for v in &values {
                let src = v.item_slice(i);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
            debug_assert_eq!(offset, total_c * plane);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let src = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    argmax[o] = best;
                    out.data_mut()[o] = src[best];
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Separable filtering of every plane with `kernel x kernel^T`, keeping
    /// only positions where the window fits ("valid" mode).
    pub fn gaussian_valid(&self, x: Var, kernel: Arc<Vec<T>>) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let k = kernel.len();
        assert!(k <= h && k <= w, "filter window larger than input");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut tmp = vec![T::zero(); h * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for j in 0..ow {
                    let mut acc = T::zero();
                    for (b, &g) in kernel.iter().enumerate() {
                        acc = acc + g * row[j + b];
                    }
                    tmp[y * ow + j] = acc;
                }
            }
            let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for (a, &g) in kernel.iter().enumerate() {
                        acc = acc + g * tmp[(i + a) * ow + j];
                    }
                    dst[i * ow + j] = acc;
                }
            }
        }
        self.push(out, Op::GaussianValid { x, kernel })
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(a) {
                        acc(*a, g.clone());
                    }
                    if needs(b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        acc(*a, g.clone());
                    }
                    if needs(b) {
                        acc(*b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc(*a, g.zip_map(val(b), |gi, bi| gi * bi));
                    }
                    if needs(b) {
                        acc(*b, g.zip_map(val(a), |gi, ai| gi * ai));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(b);
                    if needs(a) {
                        acc(*a, g.zip_map(bv, |gi, bi| gi / bi));
                    }
                    if needs(b) {
                        let q = g.zip_map(&node.value, |gi, oi| gi * oi);
                        acc(*b, q.zip_map(bv, |qi, bi| -qi / bi));
                    }
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::MulScalar(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|x| x * s));
                }
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(val(a), |gi, ai| {
                        if ai > T::zero() {
                            gi
                        } else if ai < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(val(a), |gi, ai| if ai > T::zero() { gi } else { T::zero() }),
                ),
                Op::Softplus(a) => acc(
                    *a,
                    g.zip_map(val(a), |gi, ai| gi / (T::one() + (-ai).exp())),
                ),
                Op::Sigmoid(a) => acc(
                    *a,
                    g.zip_map(val(a), |gi, ai| {
                        let y = sigmoid(ai);
                        gi * y * (T::one() - y)
                    }),
                ),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        *a,
                        g.zip_map(val(a), |gi, ai| {
                            if ai >= lo && ai <= hi {
                                gi
                            } else {
                                T::zero()
                            }
                        }),
                    )
                }
                Op::Mean(a) => {
                    let shape = val(a).shape();
                    let n = T::from_usize(val(a).numel()).expect("element count");
                    acc(*a, Tensor::full(shape, g.item() / n));
                }
                Op::Sum(a) => {
                    acc(*a, Tensor::full(val(a).shape(), g.item()));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        conv2d_backward(val(x), val(w), &g, *stride, *pad, needs(x), needs(w), b.filter(|b| needs(b)).map(|b| val(&b).shape()));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv_transpose2d_backward(
                        val(x),
                        val(w),
                        &g,
                        *stride,
                        *pad,
                        needs(x),
                        needs(w),
                        b.filter(|b| needs(b)).map(|b| val(&b).shape()),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db);
                    }
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape();
                    let mut offset = 0;
                    for part in parts {
                        let c = val(part).shape()[1];
                        if needs(part) {
                            let mut t = Tensor::zeros([n, c, h, w]);
                            for i in 0..n {
                                let src = &g.item_slice(i)[offset * h * w..(offset + c) * h * w];
                                t.item_slice_mut(i).copy_from_slice(src);
                            }
                            acc(*part, t);
                        }
                        offset += c;
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(val(x).shape());
                    let d = dx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] = d[src] + g.data()[o];
                    }
                    acc(*x, dx);
                }
                Op::GaussianValid { x, kernel } => {
                    acc(*x, gaussian_valid_backward(val(x).shape(), kernel, &g));
                }
            }
        }
        drop(nodes);
        Gradients { grads }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Element>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let [n, c, h, w] = out.shape();
    assert_eq!(bias.numel(), c, "bias length");
    let plane = h * w;
    for i in 0..n {
        let dst = out.item_slice_mut(i);
        for (ch, &bv) in bias.data().iter().enumerate() {
            for v in &mut dst[ch * plane..(ch + 1) * plane] {
                *v = *v + bv;
            }
        }
    }
}

fn channel_sums<T: Element>(g: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = g.shape();
    let mut db = Tensor::zeros(shape);
    assert_eq!(db.numel(), c, "bias length");
    for i in 0..n {
        let src = g.item_slice(i);
        for ch in 0..c {
            let s: T = src[ch * h * w..(ch + 1) * h * w].iter().copied().sum();
            db.data_mut()[ch] = db.data()[ch] + s;
        }
    }
    db
}

/// Upper bound on the unfolded buffer, in elements; batches are split into
/// chunks of images that fit.
const COLS_BUDGET: usize = 1 << 24;

fn chunk_len(n: usize, per_image: usize) -> usize {
    (COLS_BUDGET / per_image.max(1)).clamp(1, n.max(1))
}

/// Copy images `start..start + m` of `t` (`C x P` each) into `dst` laid out
/// as `C x (m * P)`.
fn gather_chunk<T: Element>(t: &Tensor<T>, start: usize, m: usize, dst: &mut [T]) {
    let [_, c, h, w] = t.shape();
    let p = h * w;
    let ld = m * p;
    for i in 0..m {
        let src = t.item_slice(start + i);
        for ch in 0..c {
            dst[ch * ld + i * p..ch * ld + (i + 1) * p].copy_from_slice(&src[ch * p..(ch + 1) * p]);
        }
    }
}

/// Inverse of [`gather_chunk`].
fn scatter_chunk<T: Element>(src: &[T], t: &mut Tensor<T>, start: usize, m: usize) {
    let [_, c, h, w] = t.shape();
    let p = h * w;
    let ld = m * p;
    for i in 0..m {
        let dst = t.item_slice_mut(start + i);
        for ch in 0..c {
            dst[ch * p..(ch + 1) * p].copy_from_slice(&src[ch * ld + i * p..ch * ld + (i + 1) * p]);
        }
    }
}

fn conv2d_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, geo: &ConvGeometry, out: &mut Tensor<T>) {
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let (rows, p) = (geo.col_rows(), geo.col_cols());
    let chunk = chunk_len(n, rows * p);
    let mut cols = vec![T::zero(); rows * p * chunk];
    let mut y = vec![T::zero(); cout * p * chunk];
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let ld = m * p;
        for i in 0..m {
            im2col_strided(x.item_slice(start + i), geo, &mut cols[i * p..], ld);
        }
        matmul(
            MatRef::new(w.data(), cout, rows),
            MatRef::new(&cols[..rows * ld], rows, ld),
            &mut y[..cout * ld],
            false,
        );
        scatter_chunk(&y[..cout * ld], out, start, m);
    }
}

/// `geo` describes the forward convolution whose adjoint this is: its
/// `channels x height x width` is the transposed convolution's output.
fn conv_transpose2d_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, geo: &ConvGeometry, out: &mut Tensor<T>) {
    let [n, cin, h, wd] = x.shape();
    let rows = geo.col_rows();
    let p = h * wd;
    let chunk = chunk_len(n, rows * p);
    let mut xs = vec![T::zero(); cin * p * chunk];
    let mut cols = vec![T::zero(); rows * p * chunk];
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let ld = m * p;
        gather_chunk(x, start, m, &mut xs[..cin * ld]);
        matmul(
            MatRef::transposed(w.data(), rows, cin),
            MatRef::new(&xs[..cin * ld], cin, ld),
            &mut cols[..rows * ld],
            false,
        );
        for i in 0..m {
            col2im_strided(&cols[i * p..], geo, out.item_slice_mut(start + i), ld);
        }
    }
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    bias_shape: Option<[usize; 4]>,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let geo = ConvGeometry {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let rows = geo.col_rows();
    let p = geo.col_cols();
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    if need_x || need_w {
        let chunk = chunk_len(n, rows * p);
        let mut cols = vec![T::zero(); rows * p * chunk];
        let mut dy = vec![T::zero(); cout * p * chunk];
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let ld = m * p;
            gather_chunk(g, start, m, &mut dy[..cout * ld]);
            let dy = MatRef::new(&dy[..cout * ld], cout, ld);
            if let Some(dw) = dw.as_mut() {
                for i in 0..m {
                    im2col_strided(x.item_slice(start + i), &geo, &mut cols[i * p..], ld);
                }
                matmul(dy, MatRef::transposed(&cols[..rows * ld], ld, rows), dw.data_mut(), true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul(MatRef::transposed(w.data(), rows, cout), dy, &mut cols[..rows * ld], false);
                for i in 0..m {
                    col2im_strided(&cols[i * p..], &geo, dx.item_slice_mut(start + i), ld);
                }
            }
        }
    }
    (dx, dw, bias_shape.map(|s| channel_sums(g, s)))
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    bias_shape: Option<[usize; 4]>,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let geo = ConvGeometry {
        channels: cout,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad,
    };
    let rows = geo.col_rows();
    let p = h * wd;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    if need_x || need_w {
        let chunk = chunk_len(n, rows * p);
        let mut cols = vec![T::zero(); rows * p * chunk];
        let mut buf = vec![T::zero(); cin * p * chunk];
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let ld = m * p;
            for i in 0..m {
                im2col_strided(g.item_slice(start + i), &geo, &mut cols[i * p..], ld);
            }
            let cols = MatRef::new(&cols[..rows * ld], rows, ld);
            if let Some(dw) = dw.as_mut() {
                gather_chunk(x, start, m, &mut buf[..cin * ld]);
                matmul(
                    MatRef::new(&buf[..cin * ld], cin, ld),
                    MatRef::transposed(cols.data, ld, rows),
                    dw.data_mut(),
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                matmul(MatRef::new(w.data(), cin, rows), cols, &mut buf[..cin * ld], false);
                scatter_chunk(&buf[..cin * ld], dx, start, m);
            }
        }
    }
    (dx, dw, bias_shape.map(|s| channel_sums(g, s)))
}

fn gaussian_valid_backward<T: Element>(in_shape: [usize; 4], kernel: &[T], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = Tensor::zeros(in_shape);
    let mut dtmp = vec![T::zero(); h * ow];
    for plane in 0..n * c {
        dtmp.iter_mut().for_each(|v| *v = T::zero());
        let gp = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for (a, &ga) in kernel.iter().enumerate() {
                let row = &mut dtmp[(i + a) * ow..(i + a + 1) * ow];
                for (d, &gv) in row.iter_mut().zip(&gp[i * ow..(i + 1) * ow]) {
                    *d = *d + ga * gv;
                }
            }
        }
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for j in 0..ow {
                let d = dtmp[y * ow + j];
                for (b, &gb) in kernel.iter().enumerate() {
                    dst[y * w + j + b] = dst[y * w + j + b] + gb * d;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx for every element
    /// of every input.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let probe = random(g.shape(out), &mut rng);
        let pv = g.constant(probe.clone());
        let loss = g.sum(g.mul(out, pv));
        let grads = g.backward(loss);

        let eval = |ins: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&g, &vars);
            let pv = g.constant(probe.clone());
            g.value(g.sum(g.mul(out, pv))).item()
        };
        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient present");
            for idx in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} idx {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2)] {
            let x = random([2, 2, 6, 6], &mut rng);
            let w = random([3, 2, k, k], &mut rng);
            let b = random([3, 1, 1, 1], &mut rng);
            check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, p));
        }
    }

    #[test]
    fn conv_transpose2d_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, p) in &[(1, 0), (3, 1), (5, 2)] {
            let x = random([2, 3, 3, 4], &mut rng);
            let w = random([3, 2, k, k], &mut rng);
            let b = random([2, 1, 1, 1], &mut rng);
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv_transpose2d(xv, wv, None, 2, p, 1);
            assert_eq!(g.shape(y), [2, 2, 6, 8]);
            check(vec![x, w, b], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, p, 1));
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_strided_conv() {
        // <conv(x, w), y> == <x, conv_t(y, w)> with shared weights.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([1, 2, 8, 8], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let y = random([1, 3, 4, 4], &mut rng);
        let g = Graph::new();
        let cx = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, 2, 1);
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // conv2d weight is Cout x Cin; as a transposed-conv weight it reads Cin' = Cout.
        let ty = g.conv_transpose2d(g.constant(y), g.constant(w), None, 2, 1, 1);
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random([1, 2, 3, 3], &mut rng);
        let b = random([1, 2, 3, 3], &mut rng).map(|v| v.abs() + 0.5);
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.add(g.mul(v[0], v[1]), g.sub(v[0], v[1]));
            let d = g.div(s, v[1]);
            g.add_scalar(g.mul_scalar(d, 1.5), 0.25)
        });
        check(vec![a.clone()], |g, v| g.softplus(v[0]));
        check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![a.clone()], |g, v| g.mean(g.mul(v[0], v[0])));
        check(vec![a.clone(), b], |g, v| g.concat(&[v[0], v[1], v[0]]));
    }

    #[test]
    fn max_pool_and_gaussian_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random([2, 2, 4, 6], &mut rng);
        check(vec![a.clone()], |g, v| g.max_pool2(v[0]));
        let kernel = Arc::new(vec![0.25, 0.5, 0.25]);
        check(vec![a], move |g, v| g.gaussian_valid(v[0], kernel.clone()));
    }

    #[test]
    fn clamp_and_abs_block_gradient_outside() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec([1, 1, 1, 4], vec![-0.5, 0.0, 0.5, 1.5]));
        let y = g.sum(g.clamp(x, 0.0, 1.0));
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        let g = Graph::new();
        let x = g.param(Tensor::from_vec([1, 1, 1, 3], vec![-2.0, 0.0, 3.0]));
        let grads = g.backward(g.sum(g.abs(x)));
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let p = g.param(Tensor::full([1, 1, 2, 2], 3.0));
        let out = g.sum(g.mul(c, p));
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0; 4]);
    }
}
