//! Parameterized building blocks. Each layer only stores parameter handles;
//! the tensors live in a [`ParamStore`].

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (cin * k * k) as f64).sqrt() * 3f64.sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[cout, cin, k, k], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
            out_channels: cout,
        }
    }

    /// Sets weights and bias to zero.
    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let ws = store.get(self.w).shape().to_vec();
        store.set(self.w, Tensor::zeros(&ws));
        store.set(self.b, Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub out_channels: usize,
}

impl ConvTranspose2d {
    /// Transposed convolution that upsamples exactly by `stride`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (cin * k * k) as f64 * (stride * stride) as f64).sqrt() * 3f64.sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[cin, cout, k, k], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        let pad = k / 2;
        ConvTranspose2d {
            w,
            b,
            stride,
            pad,
            output_pad: stride + 2 * pad - k,
            out_channels: cout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_pad)
    }
}

#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl Gdn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add(format!("{name}.beta"), Tensor::full(&[channels], T::one()));
        let g0 = T::lit(0.1f64.sqrt());
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::from_fn(&[channels, channels], |i| {
                if i / channels == i % channels {
                    g0
                } else {
                    T::zero()
                }
            }),
        );
        Gdn { beta, gamma, inverse }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let beta = tape.param(store, self.beta);
        let gamma = tape.param(store, self.gamma);
        tape.gdn(x, beta, gamma, self.inverse)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / din as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[dout, din], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b, out_features: dout }
    }

    /// A layer initialized to output exactly zero.
    pub fn new_zero<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[dout, din]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b, out_features: dout }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}
