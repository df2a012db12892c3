//! Learned per-channel factorized prior for the hyper latent.

use std::sync::Arc;

use anfvc_nn::factorized::FactorizedView;
use anfvc_nn::{Scalar, Tensor};

use super::tables::CdfTable;
use super::{CodingPlan, EntropyError, EntropyPrior};

/// Probability left outside each channel's table support, split evenly.
pub const TAIL_MASS: f64 = 1e-9;
/// Cap on a channel table's half-width around its median.
pub const MAX_HALF_WIDTH: i64 = 2048;

/// Factorized prior over a `[C, H, W]` tensor in channel-major order.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    params: Vec<Tensor<f64>>,
    tables: Vec<Arc<CdfTable>>,
    plane: usize,
}

fn solve_logit(view: &FactorizedView<'_, f64>, c: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while view.logit(c, lo) > target && lo > -1e7 {
        lo *= 2.0;
    }
    while view.logit(c, hi) < target && hi < 1e7 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if view.logit(c, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl FactorizedPrior {
    /// Builds the CDF tables (in f64) for every channel; `plane` is the
    /// number of elements per channel.
    pub fn new<T: Scalar>(params: &[Tensor<T>], plane: usize) -> Result<Self, EntropyError> {
        let params: Vec<Tensor<f64>> = params.iter().map(|p| p.cast::<f64>()).collect();
        if params.len() != anfvc_nn::factorized::N_PARAMS {
            return Err(EntropyError::Table(format!("expected {} prior tensors", anfvc_nn::factorized::N_PARAMS)));
        }
        let refs: Vec<&Tensor<f64>> = params.iter().collect();
        let view = FactorizedView::new(&refs);
        let tail = (TAIL_MASS / 2.0 / (1.0 - TAIL_MASS / 2.0)).ln();
        let mut tables = Vec::with_capacity(view.channels());
        for c in 0..view.channels() {
            let median = solve_logit(&view, c, 0.0).round() as i64;
            let lo = (solve_logit(&view, c, tail).floor() as i64).max(median - MAX_HALF_WIDTH);
            let hi = (solve_logit(&view, c, -tail).ceil() as i64).min(median + MAX_HALF_WIDTH);
            let mut probs: Vec<f64> = (lo..=hi).map(|k| view.likelihood(c, k as f64).max(0.0)).collect();
            let inside: f64 = probs.iter().sum();
            probs.push((1.0 - inside).max(0.0));
            tables.push(Arc::new(CdfTable::from_probs(&probs, lo as i32)?));
        }
        drop(refs);
        Ok(FactorizedPrior { params, tables, plane })
    }

    pub fn channels(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, c: usize) -> &CdfTable {
        &self.tables[c]
    }
}

impl EntropyPrior for FactorizedPrior {
    fn len(&self) -> usize {
        self.channels() * self.plane
    }

    fn bits(&self, symbols: &[i32]) -> f64 {
        let refs: Vec<&Tensor<f64>> = self.params.iter().collect();
        let view = FactorizedView::new(&refs);
        let v = Tensor::from_fn(&[self.channels(), 1, self.plane], |i| symbols[i] as f64);
        view.bits(&v)
    }

    fn plan(&self) -> CodingPlan {
        let n = self.len();
        CodingPlan {
            tables: self.tables.clone(),
            index: (0..n).map(|i| (i / self.plane.max(1)) as u32).collect(),
            shift: vec![0; n],
        }
    }
}
