use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// as are non-trainable ones.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= upd;
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<T: Scalar>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Sums per-sample gradient sets in a fixed order.
pub fn sum_grads<T: Scalar>(sets: Vec<Vec<(ParamId, Tensor<T>)>>) -> Vec<(ParamId, Tensor<T>)> {
    let mut acc: Vec<(ParamId, Tensor<T>)> = Vec::new();
    for set in sets {
        for (id, g) in set {
            match acc.binary_search_by_key(&id, |(i, _)| *i) {
                Ok(pos) => acc[pos].1.add_assign(&g),
                Err(pos) => acc.insert(pos, (id, g)),
            }
        }
    }
    acc
}
