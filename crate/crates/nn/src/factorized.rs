//! Per-channel learned monotone CDF (the "factorized prior" density model).
//!
//! Each channel owns a chain of small dense layers `1 -> 3 -> 3 -> 3 -> 1`.
//! Matrices pass through softplus and the gating factors through tanh, which
//! keeps the composed map non-decreasing in its input; the CDF is the sigmoid
//! of the chain output.

use crate::kernels::LIKELIHOOD_FLOOR;
use crate::scalar::{sigmoid, softplus};
use crate::{Scalar, Tensor};

/// Layer widths of the density chain.
pub const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
pub const N_LAYERS: usize = 4;
/// Number of parameter tensors: matrix, bias and factor per layer except the
/// last, which has no factor.
pub const N_PARAMS: usize = 3 * N_LAYERS - 1;

/// Shapes of the parameter tensors for `channels` channels, in canonical order
/// `[H0, b0, a0, H1, b1, a1, H2, b2, a2, H3, b3]`.
pub fn param_shapes(channels: usize) -> Vec<Vec<usize>> {
    let mut shapes = Vec::with_capacity(N_PARAMS);
    for k in 0..N_LAYERS {
        let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
        shapes.push(vec![channels, dout, din]);
        shapes.push(vec![channels, dout]);
        if k + 1 < N_LAYERS {
            shapes.push(vec![channels, dout]);
        }
    }
    shapes
}

/// Initial parameter values following the usual `init_scale = 10` recipe.
pub fn init_params<T: Scalar>(channels: usize, rng: &mut impl rand::Rng) -> Vec<Tensor<T>> {
    let init_scale = 10.0f64;
    let scale = init_scale.powf(1.0 / (N_LAYERS as f64));
    let mut out = Vec::with_capacity(N_PARAMS);
    for k in 0..N_LAYERS {
        let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
        let h = (1.0 / scale / dout as f64).exp_m1().ln();
        out.push(Tensor::full(&[channels, dout, din], T::lit(h)));
        out.push(Tensor::from_fn(&[channels, dout], |_| T::lit(rng.gen_range(-0.5..0.5))));
        if k + 1 < N_LAYERS {
            out.push(Tensor::zeros(&[channels, dout]));
        }
    }
    out
}

fn idx(k: usize) -> (usize, usize, Option<usize>) {
    let base = 3 * k;
    if k + 1 < N_LAYERS {
        (base, base + 1, Some(base + 2))
    } else {
        (base, base + 1, None)
    }
}

struct Cache<T> {
    // per layer: input h, pre-activation u
    h: [[T; 3]; N_LAYERS],
    u: [[T; 3]; N_LAYERS],
}

/// Borrowed view of the parameters for all channels.
pub struct FactorizedView<'a, T> {
    params: &'a [&'a Tensor<T>],
}

impl<'a, T: Scalar> FactorizedView<'a, T> {
    pub fn new(params: &'a [&'a Tensor<T>]) -> Self {
        assert_eq!(params.len(), N_PARAMS, "factorized prior needs {N_PARAMS} tensors");
        FactorizedView { params }
    }

    pub fn channels(&self) -> usize {
        self.params[0].shape()[0]
    }

    fn logit_cached(&self, c: usize, x: T) -> (T, Cache<T>) {
        let mut cache = Cache {
            h: [[T::zero(); 3]; N_LAYERS],
            u: [[T::zero(); 3]; N_LAYERS],
        };
        let mut h = [T::zero(); 3];
        h[0] = x;
        for k in 0..N_LAYERS {
            let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
            let (hi, bi, ai) = idx(k);
            let mat = &self.params[hi].data()[c * dout * din..(c + 1) * dout * din];
            let bias = &self.params[bi].data()[c * dout..(c + 1) * dout];
            cache.h[k] = h;
            let mut next = [T::zero(); 3];
            for i in 0..dout {
                let mut s = bias[i];
                for j in 0..din {
                    s += softplus(mat[i * din + j]) * h[j];
                }
                cache.u[k][i] = s;
                next[i] = match ai {
                    Some(ai) => {
                        let f = self.params[ai].data()[c * dout + i].tanh();
                        s + f * s.tanh()
                    }
                    None => s,
                };
            }
            h = next;
        }
        (h[0], cache)
    }

    /// Chain output (CDF logit) for channel `c` at `x`.
    pub fn logit(&self, c: usize, x: T) -> T {
        self.logit_cached(c, x).0
    }

    pub fn cdf(&self, c: usize, x: T) -> T {
        sigmoid(self.logit(c, x))
    }

    fn logit_backward(&self, c: usize, cache: &Cache<T>, dlogit: T, grads: &mut [Tensor<T>]) -> T {
        let mut dh = [T::zero(); 3];
        dh[0] = dlogit;
        for k in (0..N_LAYERS).rev() {
            let (din, dout) = (FILTERS[k], FILTERS[k + 1]);
            let (hi, bi, ai) = idx(k);
            let mut du = [T::zero(); 3];
            for i in 0..dout {
                let u = cache.u[k][i];
                du[i] = match ai {
                    Some(ai) => {
                        let f = self.params[ai].data()[c * dout + i].tanh();
                        let tu = u.tanh();
                        let ga = dh[i] * tu * (T::one() - f * f);
                        grads[ai].data_mut()[c * dout + i] += ga;
                        dh[i] * (T::one() + f * (T::one() - tu * tu))
                    }
                    None => dh[i],
                };
            }
            let mut dprev = [T::zero(); 3];
            for i in 0..dout {
                grads[bi].data_mut()[c * dout + i] += du[i];
                for j in 0..din {
                    let off = c * dout * din + i * din + j;
                    let raw = self.params[hi].data()[off];
                    grads[hi].data_mut()[off] += du[i] * cache.h[k][j] * sigmoid(raw);
                    dprev[j] += softplus(raw) * du[i];
                }
            }
            dh = dprev;
        }
        dh[0]
    }

    fn bin(&self, c: usize, v: T) -> (T, T, T, Cache<T>, Cache<T>, T) {
        let half = T::lit(0.5);
        let (lo, cl) = self.logit_cached(c, v - half);
        let (up, cu) = self.logit_cached(c, v + half);
        let s = if lo + up > T::zero() { -T::one() } else { T::one() };
        let p = s * (sigmoid(s * up) - sigmoid(s * lo));
        (p, lo, up, cl, cu, s)
    }

    /// Unit-bin probability mass at `v` for channel `c`.
    pub fn likelihood(&self, c: usize, v: T) -> T {
        self.bin(c, v).0
    }

    /// Total bits of a `[C, H, W]` tensor.
    pub fn bits(&self, v: &Tensor<T>) -> T {
        let (ch, h, w) = v.dims3();
        assert_eq!(ch, self.channels(), "channel count mismatch with prior");
        let n = h * w;
        let floor = T::lit(LIKELIHOOD_FLOOR);
        let ln2 = T::lit(std::f64::consts::LN_2);
        let mut bits = T::zero();
        for c in 0..ch {
            for &x in &v.data()[c * n..(c + 1) * n] {
                let p = self.likelihood(c, x).max(floor);
                bits -= p.ln() / ln2;
            }
        }
        bits
    }

    /// Gradients of `gscale * bits(v)` with respect to `v` and every parameter.
    pub fn bits_backward(&self, v: &Tensor<T>, gscale: T) -> (Tensor<T>, Vec<Tensor<T>>) {
        let (ch, h, w) = v.dims3();
        let n = h * w;
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut dv = Tensor::zeros(v.shape());
        let floor = T::lit(LIKELIHOOD_FLOOR);
        let ln2 = T::lit(std::f64::consts::LN_2);
        for c in 0..ch {
            for i in 0..n {
                let x = v.data()[c * n + i];
                let (p, lo, up, cl, cu, s) = self.bin(c, x);
                if p <= floor {
                    continue;
                }
                let dp = -gscale / (p * ln2);
                let su = sigmoid(s * up);
                let sl = sigmoid(s * lo);
                let dup = dp * su * (T::one() - su);
                let dlo = -dp * sl * (T::one() - sl);
                let gx_u = self.logit_backward(c, &cu, dup, &mut grads);
                let gx_l = self.logit_backward(c, &cl, dlo, &mut grads);
                dv.data_mut()[c * n + i] = gx_u + gx_l;
            }
        }
        (dv, grads)
    }
}
