//! Tape-based reverse-mode differentiation over NHWC feature maps.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the adjoint sweep.

pub(crate) mod kernels;

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayD, ArrayView2, Axis, IxDyn, Zip};

use crate::scalar::Scalar;

pub use kernels::{filter_valid, filter_valid_adjoint, gaussian_window};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Sine,
    Sigmoid,
    Tanh,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sine => x.sin(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sine => x.cos(),
            Activation::Sigmoid => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Linear interpolation tap along the leading axis of a tensor.
#[derive(Clone, Copy, Debug)]
pub struct LerpTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLastDim(Var, Var),
    MulLastDim(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, groups: usize, cols: Option<Array2<T>> },
    PixelShuffle { x: Var, sh: usize, sw: usize },
    Bilinear { x: Var, sh: usize, sw: usize },
    LayerNorm { x: Var, xhat: ArrayD<T>, inv_std: Vec<T> },
    Act { x: Var, kind: Activation },
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    Lerp { src: Var, taps: Vec<LerpTap> },
    Tile { x: Var },
    RowNormalize { x: Var, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<T>> },
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mse { pred: Var, target: ArrayD<T> },
    L1 { pred: Var, target: ArrayD<T> },
    Ssim { pred: Var, grad: ArrayD<T> },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads[v.0].take()
    }
}

fn arr<T: Scalar>(shape: &[usize], data: Vec<T>) -> ArrayD<T> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree")
}

fn as_matrix<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let cols = *a.shape().last().expect("non-scalar");
    let rows = a.len() / cols;
    a.view().into_shape_with_order((rows, cols)).expect("standard layout")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input whose gradient is wanted).
    pub fn param(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> ArrayD<T> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_last_dim(&mut self, x: Var, b: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[c], "add_last_dim: bias shape");
        let bv = self.value(b).view().into_shape_with_order(c).unwrap();
        let mut v = self.value(x).clone();
        let last = Axis(v.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            lane += &bv;
        }
        self.push(v, Op::AddLastDim(x, b), &[x, b])
    }

    /// `x * s` with `s` broadcast along the last axis.
    pub fn mul_last_dim(&mut self, x: Var, s: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(s), &[c], "mul_last_dim: gain shape");
        let sv = self.value(s).view().into_shape_with_order(c).unwrap();
        let mut v = self.value(x).clone();
        let last = Axis(v.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            lane *= &sv;
        }
        self.push(v, Op::MulLastDim(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).mapv(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).mapv(|e| e + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(x), &[x])
    }

    /// `x W^T + b` over the last axis; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (out, inp) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*xs.last().unwrap(), inp, "linear: input width {} vs weight {:?}", xs.last().unwrap(), self.shape(w));
        let xm = as_matrix(self.value(x));
        let wm = self.value(w).view().into_shape_with_order((out, inp)).unwrap();
        let mut y = Array2::<T>::zeros((xm.nrows(), out));
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order(out).unwrap();
            for mut row in y.rows_mut() {
                row.assign(&bv);
            }
        }
        general_mat_mul(T::one(), &xm, &wm.t(), T::one(), &mut y);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(y, Op::Linear { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Var {
        let cf = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), groups);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let cols = if self.nodes[w.0].needs_grad { cf.cols } else { None };
        self.push(cf.out, Op::Conv2d { x, w, b, groups, cols }, &inputs)
    }

    pub fn pixel_shuffle(&mut self, x: Var, sh: usize, sw: usize) -> Var {
        let c = self.shape(x)[3];
        assert_eq!(c % (sh * sw), 0, "pixel_shuffle: {c} channels not divisible by {sh}x{sw}");
        let v = kernels::pixel_shuffle(self.value(x), sh, sw);
        self.push(v, Op::PixelShuffle { x, sh, sw }, &[x])
    }

    pub fn bilinear(&mut self, x: Var, sh: usize, sw: usize) -> Var {
        let v = kernels::bilinear_upsample(self.value(x), sh, sw);
        self.push(v, Op::Bilinear { x, sh, sw }, &[x])
    }

    /// Parameter-free normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let xm = as_matrix(xv);
        let mut xhat = Array2::<T>::zeros(xm.dim());
        let mut inv_std = Vec::with_capacity(xm.nrows());
        let cf = T::of(c as f64);
        for (row, mut out) in xm.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            inv_std.push(inv);
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
        }
        let xhat = xhat.into_shape_with_order(IxDyn(xv.shape())).unwrap();
        self.push(xhat.clone(), Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let v = self.value(x).mapv(|e| kind.apply(e));
        self.push(v, Op::Act { x, kind }, &[x])
    }

    /// `x * scale + shift` where `x` is `(n, ..., c)` and `scale`/`shift` are
    /// `(n, c)`, broadcast over the middle axes.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], *shape.last().unwrap());
        for s in [scale, shift].into_iter().flatten() {
            assert_eq!(self.shape(s), &[n, c], "channel_affine: modulation shape");
        }
        let mut v = self.value(x).clone();
        let per = v.len() / (n * c);
        {
            let vs = v.as_slice_mut().unwrap();
            for b in 0..n {
                for p in 0..per {
                    let base = (b * per + p) * c;
                    for ci in 0..c {
                        let mut e = vs[base + ci];
                        if let Some(s) = scale {
                            e = e * self.nodes[s.0].value.as_slice().unwrap()[b * c + ci];
                        }
                        if let Some(s) = shift {
                            e = e + self.nodes[s.0].value.as_slice().unwrap()[b * c + ci];
                        }
                        vs[base + ci] = e;
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), scale, shift].into_iter().flatten().collect();
        self.push(v, Op::ChannelAffine { x, scale, shift }, &inputs)
    }

    /// Blends slices of `src` along its leading axis: output row `i` is
    /// `(1 - frac) * src[lo] + frac * src[hi]` for `taps[i]`.
    pub fn lerp_rows(&mut self, src: Var, taps: Vec<LerpTap>) -> Var {
        let sv = self.value(src);
        let mut shape = sv.shape().to_vec();
        let per = sv.len() / shape[0];
        let ss = sv.as_slice().unwrap();
        let mut out = Vec::with_capacity(per * taps.len());
        for t in &taps {
            let (a, b) = (T::of(1.0 - t.frac), T::of(t.frac));
            let lo = &ss[t.lo * per..(t.lo + 1) * per];
            let hi = &ss[t.hi * per..(t.hi + 1) * per];
            out.extend(lo.iter().zip(hi).map(|(&l, &h)| a * l + b * h));
        }
        shape[0] = taps.len();
        let v = arr(&shape, out);
        self.push(v, Op::Lerp { src, taps }, &[src])
    }

    /// Repeats the flattened `x` cyclically to `len` elements (1-D output).
    pub fn tile(&mut self, x: Var, len: usize) -> Var {
        let xs = self.value(x).as_slice().unwrap();
        let n = xs.len();
        assert!(n > 0, "tile: empty input");
        let v: Vec<T> = (0..len).map(|i| xs[i % n]).collect();
        let v = arr(&[len], v);
        self.push(v, Op::Tile { x }, &[x])
    }

    /// Divides each row of the 2-D `x` by `max(||row||_2, eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xm = as_matrix(self.value(x));
        let mut norms = Vec::with_capacity(xm.nrows());
        let mut v = xm.to_owned();
        for mut row in v.rows_mut() {
            let nrm = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(T::of(eps));
            norms.push(nrm);
            row.mapv_inplace(|e| e / nrm);
        }
        let v = v.into_shape_with_order(IxDyn(self.shape(x))).unwrap();
        self.push(v, Op::RowNormalize { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention on `(batch, seq, dim)` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let shape = self.shape(q).to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d % heads, 0, "attention: dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, s, d]));
        let mut probs = Vec::with_capacity(b * heads);
        for bi in 0..b {
            for h in 0..heads {
                let cols = s![bi, .., h * dh..(h + 1) * dh];
                let qh = qv.slice(cols);
                let kh = kv.slice(cols);
                let vh = vv.slice(cols);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|e| e * scale);
                for mut row in sc.rows_mut() {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|e| (e - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|e| e / z);
                }
                let oh = sc.dot(&vh);
                out.slice_mut(cols).assign(&oh);
                probs.push(sc);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Concatenates along the second-to-last axis (rows of a token matrix).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(
            Axis(self.value(a).ndim() - 2),
            &[self.value(a).view(), self.value(b).view()],
        )
        .expect("concat_rows: trailing dims differ");
        self.push(v, Op::ConcatRows(a, b), &[a, b])
    }

    /// Rows `start..start + len` along the second-to-last axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let ax = self.value(x).ndim() - 2;
        let v = self
            .value(x)
            .slice_axis(Axis(ax), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceRows { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = arr(&[], vec![self.value(x).sum()]);
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mse(&mut self, pred: Var, target: &ArrayD<T>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mse: shape mismatch");
        let n = T::of(target.len() as f64);
        let v = Zip::from(self.value(pred))
            .and(target)
            .fold(T::zero(), |acc, &p, &t| acc + (p - t) * (p - t))
            / n;
        self.push(arr(&[], vec![v]), Op::Mse { pred, target: target.clone() }, &[pred])
    }

    pub fn l1(&mut self, pred: Var, target: &ArrayD<T>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "l1: shape mismatch");
        let n = T::of(target.len() as f64);
        let v = Zip::from(self.value(pred))
            .and(target)
            .fold(T::zero(), |acc, &p, &t| acc + (p - t).abs())
            / n;
        self.push(arr(&[], vec![v]), Op::L1 { pred, target: target.clone() }, &[pred])
    }

    /// `1 - mean SSIM` between NHWC `pred` and `target`, computed per channel
    /// with an 11-tap Gaussian window (sigma 1.5) and valid filtering.
    pub fn ssim_loss(&mut self, pred: Var, target: &ArrayD<T>) -> Var {
        let (value, grad) = ssim_value_and_grad(self.value(pred), target);
        self.push(arr(&[], vec![T::one() - value]), Op::Ssim { pred, grad }, &[pred])
    }

    /// Runs the adjoint sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(ArrayD::from_elem(self.value(out).raw_dim(), T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddLastDim(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let db = as_matrix(g).sum_axis(Axis(0)).into_dyn();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulLastDim(x, s) => {
                let c = *g.shape().last().unwrap();
                let sv = self.value(*s).view().into_shape_with_order(c).unwrap();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    let last = Axis(dx.ndim() - 1);
                    for mut lane in dx.lanes_mut(last) {
                        lane *= &sv;
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let prod = g * self.value(*x);
                    let ds = as_matrix(&prod).sum_axis(Axis(0)).into_dyn();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.mapv(|e| e * *c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Reshape(x) => {
                let dx = g.clone().into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let gm = as_matrix(g);
                let (out, inp) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.wants(*x) {
                    let wm = self.value(*w).view().into_shape_with_order((out, inp)).unwrap();
                    let dx = gm.dot(&wm).into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let xm = as_matrix(self.value(*x));
                    let dw = gm.t().dot(&xm).into_shape_with_order(IxDyn(self.shape(*w))).unwrap();
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, gm.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::Conv2d { x, w, b, groups, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *groups,
                    cols.as_ref(),
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::PixelShuffle { x, sh, sw } => {
                self.accumulate(grads, *x, kernels::pixel_unshuffle(g, *sh, *sw));
            }
            Op::Bilinear { x, sh, sw } => {
                let dx = kernels::bilinear_upsample_backward(g, self.shape(*x), *sh, *sw);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let gm = as_matrix(g);
                let xm = as_matrix(xhat);
                let c = T::of(gm.ncols() as f64);
                let mut dx = Array2::<T>::zeros(gm.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let gr = gm.row(r);
                    let xr = xm.row(r);
                    let mg = gr.sum() / c;
                    let mgx = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / c;
                    Zip::from(&mut out)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|o, &gv, &xv| *o = inv_std[r] * (gv - mg - xv * mgx));
                }
                let dx = dx.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Act { x, kind } => {
                let mut dx = self.value(*x).mapv(|e| kind.derivative(e));
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = g.shape();
                let (n, c) = (shape[0], *shape.last().unwrap());
                let per = g.len() / (n * c);
                let gs = g.as_slice().unwrap();
                let xs = self.value(*x).as_slice().unwrap();
                let mut dx = if scale.is_some() { vec![T::zero(); gs.len()] } else { gs.to_vec() };
                let mut dscale = vec![T::zero(); n * c];
                let mut dshift = vec![T::zero(); n * c];
                for b in 0..n {
                    for p in 0..per {
                        let base = (b * per + p) * c;
                        for ci in 0..c {
                            let gv = gs[base + ci];
                            if let Some(s) = scale {
                                let sv = self.value(*s).as_slice().unwrap()[b * c + ci];
                                dx[base + ci] = gv * sv;
                                dscale[b * c + ci] = dscale[b * c + ci] + gv * xs[base + ci];
                            }
                            dshift[b * c + ci] = dshift[b * c + ci] + gv;
                        }
                    }
                }
                self.accumulate(grads, *x, arr(shape, dx));
                if let Some(s) = scale {
                    self.accumulate(grads, *s, arr(&[n, c], dscale));
                }
                if let Some(s) = shift {
                    self.accumulate(grads, *s, arr(&[n, c], dshift));
                }
            }
            Op::Lerp { src, taps } => {
                let shape = self.shape(*src);
                let per = self.value(*src).len() / shape[0];
                let gs = g.as_slice().unwrap();
                let mut dsrc = vec![T::zero(); self.value(*src).len()];
                for (i, t) in taps.iter().enumerate() {
                    let (a, b) = (T::of(1.0 - t.frac), T::of(t.frac));
                    for e in 0..per {
                        let gv = gs[i * per + e];
                        dsrc[t.lo * per + e] = dsrc[t.lo * per + e] + a * gv;
                        dsrc[t.hi * per + e] = dsrc[t.hi * per + e] + b * gv;
                    }
                }
                self.accumulate(grads, *src, arr(shape, dsrc));
            }
            Op::Tile { x } => {
                let n = self.value(*x).len();
                let mut dx = vec![T::zero(); n];
                for (i, &gv) in g.iter().enumerate() {
                    dx[i % n] = dx[i % n] + gv;
                }
                self.accumulate(grads, *x, arr(self.shape(*x), dx));
            }
            Op::RowNormalize { x, norms } => {
                let gm = as_matrix(g);
                let ym = as_matrix(&self.nodes[i].value);
                let xm = as_matrix(self.value(*x));
                let mut dx = Array2::<T>::zeros(gm.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let nrm = norms[r];
                    let gr = gm.row(r);
                    let raw_norm = xm.row(r).iter().map(|&e| e * e).sum::<T>().sqrt();
                    if raw_norm >= nrm {
                        // y = x / ||x||: dx = (g - y <g, y>) / ||x||
                        let yr = ym.row(r);
                        let dot = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gv, &yv| *o = (gv - yv * dot) / nrm);
                    } else {
                        Zip::from(&mut out).and(&gr).for_each(|o, &gv| *o = gv / nrm);
                    }
                }
                let dx = dx.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.shape(*q).to_vec();
                let (b, _s, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = ArrayD::<T>::zeros(IxDyn(&shape));
                let mut dk = ArrayD::<T>::zeros(IxDyn(&shape));
                let mut dv = ArrayD::<T>::zeros(IxDyn(&shape));
                for bi in 0..b {
                    for h in 0..*heads {
                        let cols = s![bi, .., h * dh..(h + 1) * dh];
                        let p = &probs[bi * heads + h];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = Array2::<T>::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let pr = p.row(r);
                            let dpr = dp.row(r);
                            let dot = pr.iter().zip(dpr.iter()).map(|(&a, &c)| a * c).sum::<T>();
                            for c in 0..p.ncols() {
                                ds[[r, c]] = pr[c] * (dpr[c] - dot) * scale;
                            }
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::ConcatRows(a, b) => {
                let ax = Axis(g.ndim() - 2);
                let na = self.shape(*a)[g.ndim() - 2];
                let (ga, gb) = g.view().split_at(ax, na);
                self.accumulate(grads, *a, ga.to_owned());
                self.accumulate(grads, *b, gb.to_owned());
            }
            Op::SliceRows { x, start } => {
                let ax = Axis(g.ndim() - 2);
                let mut dx = ArrayD::<T>::zeros(IxDyn(self.shape(*x)));
                let len = g.shape()[g.ndim() - 2];
                dx.slice_axis_mut(ax, ndarray::Slice::from(*start..*start + len)).assign(g);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.iter().next().copied().unwrap();
                self.accumulate(grads, *x, ArrayD::from_elem(IxDyn(self.shape(*x)), gv));
            }
            Op::Mse { pred, target } => {
                let gv = g.iter().next().copied().unwrap();
                let k = gv * T::of(2.0 / target.len() as f64);
                let mut dx = self.value(*pred) - target;
                dx.mapv_inplace(|e| e * k);
                self.accumulate(grads, *pred, dx);
            }
            Op::L1 { pred, target } => {
                let gv = g.iter().next().copied().unwrap();
                let k = gv / T::of(target.len() as f64);
                let mut dx = self.value(*pred) - target;
                dx.mapv_inplace(|e| {
                    if e > T::zero() {
                        k
                    } else if e < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *pred, dx);
            }
            Op::Ssim { pred, grad } => {
                let gv = g.iter().next().copied().unwrap();
                self.accumulate(grads, *pred, grad.mapv(|e| -e * gv));
            }
        }
    }
}

pub(crate) const SSIM_WINDOW: usize = 11;
pub(crate) const SSIM_SIGMA: f64 = 1.5;
pub(crate) const SSIM_C1: f64 = 0.01 * 0.01;
pub(crate) const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over an NHWC batch and its gradient with respect to `x`.
fn ssim_value_and_grad<T: Scalar>(x: &ArrayD<T>, y: &ArrayD<T>) -> (T, ArrayD<T>) {
    let (n, h, w, c) = kernels::dims4(x.shape());
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}");
    let win: Vec<T> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::of).collect();
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let planes = (n * c) as f64;
    let count = T::of(planes * (ho * wo) as f64);
    let mut total = T::zero();
    let mut grad = ArrayD::<T>::zeros(x.raw_dim());
    let two = T::of(2.0);
    for b in 0..n {
        for ch in 0..c {
            let px: Vec<T> = x.slice(s![b, .., .., ch]).iter().copied().collect();
            let py: Vec<T> = y.slice(s![b, .., .., ch]).iter().copied().collect();
            let xx: Vec<T> = px.iter().map(|&v| v * v).collect();
            let yy: Vec<T> = py.iter().map(|&v| v * v).collect();
            let xy: Vec<T> = px.iter().zip(&py).map(|(&a, &b)| a * b).collect();
            let mx = filter_valid(&px, h, w, &win);
            let my = filter_valid(&py, h, w, &win);
            let exx = filter_valid(&xx, h, w, &win);
            let eyy = filter_valid(&yy, h, w, &win);
            let exy = filter_valid(&xy, h, w, &win);
            let m = ho * wo;
            let (mut da, mut db, mut dc) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
            for p in 0..m {
                let (ux, uy) = (mx[p], my[p]);
                let sxx = exx[p] - ux * ux;
                let syy = eyy[p] - uy * uy;
                let sxy = exy[p] - ux * uy;
                let a1 = two * ux * uy + c1;
                let a2 = two * sxy + c2;
                let b1 = ux * ux + uy * uy + c1;
                let b2 = sxx + syy + c2;
                let sv = a1 * a2 / (b1 * b2);
                total = total + sv;
                da[p] = (two * uy * a2 - two * uy * a1) / (b1 * b2) - sv * (two * ux / b1 - two * ux / b2);
                db[p] = two * a1 / (b1 * b2);
                dc[p] = -sv / b2;
            }
            let ga = filter_valid_adjoint(&da, h, w, &win);
            let gb = filter_valid_adjoint(&db, h, w, &win);
            let gc = filter_valid_adjoint(&dc, h, w, &win);
            let mut gslice = grad.slice_mut(s![b, .., .., ch]);
            for (idx, gv) in gslice.iter_mut().enumerate() {
                *gv = (ga[idx] + gb[idx] * py[idx] + two * px[idx] * gc[idx]) / count;
            }
        }
    }
    (total / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert!((Activation::Gelu.apply(3.0f64) - 2.9964).abs() < 1e-3);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.param(arr(&[2], vec![1.5, -2.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let s = g.sum(z);
        let grads = g.backward(s);
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.as_slice().unwrap(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(arr(&[1], vec![2.0]));
        let c = g.constant(arr(&[1], vec![3.0]));
        let y = g.mul(x, c);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[[0]], 3.0);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 16, 16, 1]), |d| ((d[1] * 3 + d[2]) % 7) as f64 / 7.0);
        let (v, _) = ssim_value_and_grad(&x, &x);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
