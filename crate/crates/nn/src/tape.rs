//! Reverse-mode autodiff over an append-only arena of nodes.

use std::collections::HashMap;

use crate::factorized::FactorizedView;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sum(Var),
    Mse(Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    LeakyRelu(Var, T),
    Softplus(Var),
    Exp(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    S2d(Var),
    D2s(Var),
    Up2(Var),
    Down2(Var),
    Warp(Var, Var),
    RoundSte(Var),
    Clamp(Var, T, T),
    Modulate { x: Var, scale: Var, shift: Var },
    Linear { x: Var, w: Var, b: Var },
    Correlation(Var, Var, usize),
    GaussianBits { v: Var, scale: Var },
    FactorizedBits { v: Var, params: Vec<Var> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the trainable parameters touched by one backward pass.
pub struct ParamGrads<T> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; parameters are treated as constants.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient; read it back with [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node holding parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.grad_enabled && store.is_trainable(id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let k = self.shape(w)[2];
        let g = ConvGeom { k, stride, pad };
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g);
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(out, Op::Conv { x, w, b, g }, &ins)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let k = self.shape(w)[2];
        let g = ConvGeom { k, stride, pad };
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g, output_pad);
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(out, Op::ConvT { x, w, b, g }, &ins)
    }

    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Var {
        let out = kernels::gdn(self.value(x), self.value(beta), self.value(gamma), inverse);
        self.push(out, Op::Gdn { x, beta, gamma, inverse }, &[x, beta, gamma])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::scalar::softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Concatenation along the leading (channel) dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::cat0(&vals)
        };
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Leading-dimension range `[c0, c1)`.
    pub fn slice(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let out = self.value(a).slice0(c0, c1);
        self.push(out, Op::Slice(a, c0, c1), &[a])
    }

    pub fn space_to_depth(&mut self, a: Var) -> Var {
        let out = kernels::space_to_depth(self.value(a));
        self.push(out, Op::S2d(a), &[a])
    }

    pub fn depth_to_space(&mut self, a: Var) -> Var {
        let out = kernels::depth_to_space(self.value(a));
        self.push(out, Op::D2s(a), &[a])
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let out = kernels::upsample2(self.value(a));
        self.push(out, Op::Up2(a), &[a])
    }

    pub fn downsample2(&mut self, a: Var) -> Var {
        let out = kernels::downsample2(self.value(a));
        self.push(out, Op::Down2(a), &[a])
    }

    pub fn warp(&mut self, x: Var, flow: Var) -> Var {
        let out = kernels::warp(self.value(x), self.value(flow));
        self.push(out, Op::Warp(x, flow), &[x, flow])
    }

    /// Nearest-integer rounding with an identity gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.round());
        self.push(out, Op::RoundSte(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// `out[c] = scale[c] * x[c] + shift[c]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        assert_eq!(self.shape(scale), &[c], "modulation scale length");
        assert_eq!(self.shape(shift), &[c], "modulation shift length");
        let inner = xv.numel() / c;
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let out = Tensor::from_fn(xv.shape(), |i| s[i / inner] * xv.data()[i] + b[i / inner]);
        self.push(out, Op::Modulate { x, scale, shift }, &[x, scale, shift])
    }

    /// Dense layer on a vector: `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.numel(), din, "linear input length");
        let mut out = bv.data().to_vec();
        T::gemm(dout, din, 1, wv.data(), din as isize, 1, xv.data(), 1, 1, T::one(), &mut out, 1, 1);
        self.push(Tensor::from_vec(&[dout], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn correlation(&mut self, a: Var, b: Var, radius: usize) -> Var {
        let out = kernels::correlation(self.value(a), self.value(b), radius);
        self.push(out, Op::Correlation(a, b, radius), &[a, b])
    }

    /// Bits of `v` under zero-mean Gaussians with per-element `scale`.
    pub fn gaussian_bits(&mut self, v: Var, scale: Var) -> Var {
        assert_eq!(self.shape(v), self.shape(scale));
        let bits = kernels::gaussian_bits(self.value(v), None, self.value(scale));
        self.push(Tensor::scalar(bits), Op::GaussianBits { v, scale }, &[v, scale])
    }

    /// Bits of `v` under the factorized density with the given parameters.
    pub fn factorized_bits(&mut self, v: Var, params: &[Var]) -> Var {
        let bits = {
            let ps: Vec<&Tensor<T>> = params.iter().map(|&p| self.value(p)).collect();
            FactorizedView::new(&ps).bits(self.value(v))
        };
        let mut ins = vec![v];
        ins.extend_from_slice(params);
        self.push(
            Tensor::scalar(bits),
            Op::FactorizedBits {
                v,
                params: params.to_vec(),
            },
            &ins,
        )
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accum(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accum(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| x * *s)),
            Op::AddConst(a) => self.accum(grads, *a, g.clone()),
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mse(a, b) => {
                let n = T::lit(val(*a).numel() as f64);
                let k = g.item() * T::lit(2.0) / n;
                let diff = val(*a).zip_map(val(*b), |x, y| (x - y) * k);
                if needs(*b) {
                    self.accum(grads, *b, diff.map(|x| -x));
                }
                self.accum(grads, *a, diff);
            }
            Op::Conv { x, w, b, g: geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, *geom);
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
                if let Some(b) = b {
                    self.accum(grads, *b, db);
                }
            }
            Op::ConvT { x, w, b, g: geom } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(val(*x), val(*w), g, *geom);
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
                if let Some(b) = b {
                    self.accum(grads, *b, db);
                }
            }
            Op::Gdn { x, beta, gamma, inverse } => {
                let (dx, db, dg) = kernels::gdn_backward(val(*x), val(*beta), val(*gamma), *inverse, g);
                self.accum(grads, *x, dx);
                self.accum(grads, *beta, db);
                self.accum(grads, *gamma, dg);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.accum(grads, *a, g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { gv * s }));
            }
            Op::Softplus(a) => {
                self.accum(grads, *a, g.zip_map(val(*a), |gv, x| gv * crate::scalar::sigmoid(x)));
            }
            Op::Exp(a) => self.accum(grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))),
            Op::Concat(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let c = val(p).shape()[0];
                    if needs(p) {
                        self.accum(grads, p, g.slice0(c0, c0 + c));
                    }
                    c0 += c;
                }
            }
            Op::Slice(a, c0, c1) => {
                if needs(*a) {
                    let src = val(*a);
                    let inner = src.numel() / src.shape()[0];
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[c0 * inner..c1 * inner].copy_from_slice(g.data());
                    self.accum(grads, *a, full);
                }
            }
            Op::S2d(a) => self.accum(grads, *a, kernels::depth_to_space(g)),
            Op::D2s(a) => self.accum(grads, *a, kernels::space_to_depth(g)),
            Op::Up2(a) => self.accum(grads, *a, kernels::upsample2_backward(g)),
            Op::Down2(a) => self.accum(grads, *a, kernels::downsample2_backward(g)),
            Op::Warp(x, f) => {
                let (dx, df) = kernels::warp_backward(val(*x), val(*f), g);
                self.accum(grads, *x, dx);
                self.accum(grads, *f, df);
            }
            Op::RoundSte(a) => self.accum(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accum(
                    grads,
                    *a,
                    g.zip_map(val(*a), |gv, x| if x >= lo && x <= hi { gv } else { T::zero() }),
                );
            }
            Op::Modulate { x, scale, shift } => {
                let xv = val(*x);
                let c = xv.shape()[0];
                let inner = xv.numel() / c;
                let s = val(*scale).data();
                if needs(*x) {
                    self.accum(grads, *x, Tensor::from_fn(xv.shape(), |i| g.data()[i] * s[i / inner]));
                }
                let mut ds = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let (gs, xs) = (
                        &g.data()[ci * inner..(ci + 1) * inner],
                        &xv.data()[ci * inner..(ci + 1) * inner],
                    );
                    ds.data_mut()[ci] = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    db.data_mut()[ci] = gs.iter().copied().sum();
                }
                self.accum(grads, *scale, ds);
                self.accum(grads, *shift, db);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                if needs(*x) {
                    let mut dx = vec![T::zero(); din];
                    T::gemm(din, dout, 1, wv.data(), 1, din as isize, g.data(), 1, 1, T::zero(), &mut dx, 1, 1);
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if needs(*w) {
                    let dw = Tensor::from_fn(&[dout, din], |i| g.data()[i / din] * xv.data()[i % din]);
                    self.accum(grads, *w, dw);
                }
                self.accum(grads, *b, g.clone());
            }
            Op::Correlation(a, b, r) => {
                let (da, db) = kernels::correlation_backward(val(*a), val(*b), *r, g);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::GaussianBits { v, scale } => {
                let gv = g.item();
                let (vv, sv) = (val(*v), val(*scale));
                let mut dv = Tensor::zeros(vv.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for i in 0..vv.numel() {
                    let (_, dr, dsc) = kernels::gaussian_bin(vv.data()[i], sv.data()[i]);
                    dv.data_mut()[i] = dr * gv;
                    ds.data_mut()[i] = dsc * gv;
                }
                self.accum(grads, *v, dv);
                self.accum(grads, *scale, ds);
            }
            Op::FactorizedBits { v, params } => {
                let ps: Vec<&Tensor<T>> = params.iter().map(|&p| val(p)).collect();
                let (dv, dps) = FactorizedView::new(&ps).bits_backward(val(*v), g.item());
                self.accum(grads, *v, dv);
                for (&p, dp) in params.iter().zip(dps) {
                    self.accum(grads, p, dp);
                }
            }
        }
    }

    /// Gradients for every trainable parameter that reached the loss.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        ParamGrads { grads: out }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
