//! Conditional Gaussian prior with per-element mean and scale.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use anfvc_nn::kernels::{gaussian_bin, SCALE_MIN};
use anfvc_nn::scalar::normal_cdf;

use super::tables::CdfTable;
use super::{CodingPlan, EntropyError, EntropyPrior};

/// Number of log-spaced scale levels between [`SCALE_MIN`] and [`SCALE_MAX`].
pub const SCALE_LEVELS: usize = 64;
/// Largest tabulated scale; larger scales use the top table.
pub const SCALE_MAX: f64 = 64.0;
/// Sub-integer mean positions per table family.
pub const MEAN_LEVELS: usize = 16;
/// Table half-width in standard deviations.
pub const TAIL_SIGMAS: f64 = 6.11;

/// Scale represented by table level `l`.
pub fn level_scale(l: usize) -> f64 {
    let (a, b) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    (a + (b - a) * l as f64 / (SCALE_LEVELS - 1) as f64).exp()
}

/// Nearest table level (in log-scale) for `sigma`.
pub fn scale_level(sigma: f64) -> usize {
    let (a, b) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    let s = sigma.max(SCALE_MIN).min(SCALE_MAX);
    let t = (s.ln() - a) / (b - a) * (SCALE_LEVELS - 1) as f64;
    (t.round() as usize).min(SCALE_LEVELS - 1)
}

fn build_table(level: usize, frac: usize) -> CdfTable {
    let sigma = level_scale(level);
    let centre = frac as f64 / MEAN_LEVELS as f64;
    let r = (TAIL_SIGMAS * sigma + 1.0).ceil() as i32;
    let mut probs = Vec::with_capacity(2 * r as usize + 3);
    let mut total = 0.0;
    for k in -r..=r + 1 {
        let hi = normal_cdf((k as f64 + 0.5 - centre) / sigma);
        let lo = normal_cdf((k as f64 - 0.5 - centre) / sigma);
        let p = (hi - lo).max(0.0);
        total += p;
        probs.push(p);
    }
    probs.push((1.0 - total).max(0.0));
    CdfTable::from_probs(&probs, -r).expect("gaussian table sizes stay within precision")
}

/// Shared lazily built table for (scale level, mean fraction).
pub fn gaussian_table(level: usize, frac: usize) -> Arc<CdfTable> {
    static CACHE: OnceLock<Vec<OnceLock<Arc<CdfTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| (0..SCALE_LEVELS * MEAN_LEVELS).map(|_| OnceLock::new()).collect());
    cache[level * MEAN_LEVELS + frac]
        .get_or_init(|| Arc::new(build_table(level, frac)))
        .clone()
}

/// Splits a mean into an integer shift and a table fraction index.
fn split_mean(mean: f64) -> (i32, usize) {
    let fl = mean.floor();
    let mut frac = ((mean - fl) * MEAN_LEVELS as f64).round() as usize;
    let mut shift = fl as i64;
    if frac == MEAN_LEVELS {
        frac = 0;
        shift += 1;
    }
    (shift.clamp(i32::MIN as i64 / 2, i32::MAX as i64 / 2) as i32, frac)
}

/// Unit-bin Gaussian `N(mean_i, max(scale_i, 0.11)^2)` for each element.
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl GaussianConditional {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self, EntropyError> {
        if mean.len() != scale.len() {
            return Err(EntropyError::Length {
                prior: mean.len(),
                got: scale.len(),
            });
        }
        if mean.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(EntropyError::Table("non-finite gaussian parameter".into()));
        }
        Ok(GaussianConditional { mean, scale })
    }

    pub fn zero_mean(scale: Vec<f64>) -> Result<Self, EntropyError> {
        Self::new(vec![0.0; scale.len()], scale)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

impl EntropyPrior for GaussianConditional {
    fn len(&self) -> usize {
        self.mean.len()
    }

    fn bits(&self, symbols: &[i32]) -> f64 {
        symbols
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&s, (&m, &sc))| gaussian_bin(s as f64 - m, sc).0)
            .sum()
    }

    fn plan(&self) -> CodingPlan {
        let n = self.len();
        let mut ids: HashMap<usize, u32> = HashMap::new();
        let mut plan = CodingPlan {
            tables: Vec::new(),
            index: Vec::with_capacity(n),
            shift: Vec::with_capacity(n),
        };
        for (&m, &sc) in self.mean.iter().zip(&self.scale) {
            let (shift, frac) = split_mean(m);
            let key = scale_level(sc) * MEAN_LEVELS + frac;
            let next = plan.tables.len() as u32;
            let id = *ids.entry(key).or_insert_with(|| {
                plan.tables.push(gaussian_table(key / MEAN_LEVELS, key % MEAN_LEVELS));
                next
            });
            plan.index.push(id);
            plan.shift.push(shift);
        }
        plan
    }
}
