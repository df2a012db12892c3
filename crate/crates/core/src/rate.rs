//! Lambda-conditioned channel-wise modulation and lambda selection.

use std::collections::HashMap;

use anfvc_nn::layers::Linear;
use anfvc_nn::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::Mods;
use crate::{Error, Result};

/// The four inter-frame lambdas.
pub const LAMBDA_P: [f64; 4] = [1024.0, 4096.0, 16384.0, 65536.0];
pub const LAMBDA_I_MIN: f64 = 5e-3;
pub const LAMBDA_I_MAX: f64 = 5e-1;

/// Intra-lambda range paired with each inter lambda.
pub const LAMBDA_GROUPS: [(f64, f64, f64); 4] = [
    (1024.0, 5e-3, 5e-2),
    (4096.0, 1e-2, 1e-1),
    (16384.0, 2e-2, 2e-1),
    (65536.0, 2e-1, 5e-1),
];

/// Width of the rate-adaption trunk.
pub const RATE_WIDTH: usize = 64;

/// Index of `lambda_p` in [`LAMBDA_P`].
pub fn lambda_p_index(lambda_p: f64) -> Result<usize> {
    LAMBDA_P
        .iter()
        .position(|&l| l == lambda_p)
        .ok_or_else(|| Error::Lambda(format!("lambda_p {lambda_p} is not one of {LAMBDA_P:?}")))
}

/// `(lo, hi)` intra-lambda bounds for inter-lambda index `p`.
pub fn group_bounds(p: usize) -> (f64, f64) {
    let (_, lo, hi) = LAMBDA_GROUPS[p];
    (lo, hi)
}

/// Log-domain midpoint of a group.
pub fn group_mid(p: usize) -> f64 {
    let (lo, hi) = group_bounds(p);
    (lo * hi).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaCondition {
    /// A real intra lambda in `[LAMBDA_I_MIN, LAMBDA_I_MAX]`.
    Intra(f64),
    /// An index into [`LAMBDA_P`].
    Inter(usize),
}

impl LambdaCondition {
    pub fn intra(lambda: f64) -> Result<Self> {
        if !(LAMBDA_I_MIN..=LAMBDA_I_MAX).contains(&lambda) {
            return Err(Error::Lambda(format!(
                "lambda_i {lambda} outside [{LAMBDA_I_MIN}, {LAMBDA_I_MAX}]"
            )));
        }
        Ok(LambdaCondition::Intra(lambda))
    }

    pub fn inter(index: usize) -> Result<Self> {
        if index >= LAMBDA_P.len() {
            return Err(Error::Lambda(format!("lambda_p index {index} out of range")));
        }
        Ok(LambdaCondition::Inter(index))
    }

    pub fn dim(&self) -> usize {
        match self {
            LambdaCondition::Intra(_) => 1,
            LambdaCondition::Inter(_) => LAMBDA_P.len(),
        }
    }

    /// Network input: normalized log-lambda in `[-1, 1]`, or a one-hot vector.
    pub fn features(&self) -> Vec<f64> {
        match *self {
            LambdaCondition::Intra(l) => {
                let (a, b) = (LAMBDA_I_MIN.ln(), LAMBDA_I_MAX.ln());
                vec![2.0 * (l.ln() - a) / (b - a) - 1.0]
            }
            LambdaCondition::Inter(i) => (0..LAMBDA_P.len()).map(|k| if k == i { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// The lambda value itself.
    pub fn lambda(&self) -> f64 {
        match *self {
            LambdaCondition::Intra(l) => l,
            LambdaCondition::Inter(i) => LAMBDA_P[i],
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    name: String,
    scale: Linear,
    shift: Linear,
}

/// Shared trunk with one zero-initialized (scale, shift) head per registered
/// layer. `scale = exp(head)`, so the initial modulation is exactly identity.
#[derive(Clone, Debug)]
pub struct RateNet {
    din: usize,
    trunk: Linear,
    heads: Vec<Head>,
    index: HashMap<String, usize>,
}

impl RateNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        layers: &[(String, usize)],
        rng: &mut impl Rng,
    ) -> Self {
        let trunk = Linear::new(store, &format!("{name}.trunk"), din, RATE_WIDTH, rng);
        let mut heads = Vec::with_capacity(layers.len());
        let mut index = HashMap::new();
        for (i, (layer, c)) in layers.iter().enumerate() {
            let tag = layer.replace('.', "_");
            heads.push(Head {
                name: layer.clone(),
                scale: Linear::new_zero(store, &format!("{name}.{tag}.scale"), RATE_WIDTH, *c),
                shift: Linear::new_zero(store, &format!("{name}.{tag}.shift"), RATE_WIDTH, *c),
            });
            index.insert(layer.clone(), i);
        }
        RateNet { din, trunk, heads, index }
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.heads.iter().map(|h| h.name.as_str())
    }

    fn trunk<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cond: &LambdaCondition) -> Result<Var> {
        if cond.dim() != self.din {
            return Err(Error::Lambda(format!(
                "condition has {} features, rate net expects {}",
                cond.dim(),
                self.din
            )));
        }
        let x = tape.constant(Tensor::from_fn(&[self.din], |i| T::lit(cond.features()[i])));
        let h = self.trunk.forward(tape, store, x);
        Ok(tape.leaky_relu(h, T::lit(crate::nets::LEAKY)))
    }

    fn head<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, i: usize) -> (Var, Var) {
        let hd = &self.heads[i];
        let s = hd.scale.forward(tape, store, h);
        let s = tape.exp(s);
        let b = hd.shift.forward(tape, store, h);
        (s, b)
    }

    /// Modulations for every registered layer.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cond: &LambdaCondition) -> Result<Mods> {
        let h = self.trunk(tape, store, cond)?;
        let mut mods = Mods::default();
        for i in 0..self.heads.len() {
            let (s, b) = self.head(tape, store, h, i);
            mods.insert(self.heads[i].name.clone(), s, b);
        }
        Ok(mods)
    }

    /// `out[c] = scale[c] * features[c] + shift[c]` for one registered layer.
    pub fn modulate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        cond: &LambdaCondition,
        layer: &str,
    ) -> Result<Var> {
        let &i = self.index.get(layer).ok_or_else(|| Error::UnregisteredLayer(layer.to_string()))?;
        let h = self.trunk(tape, store, cond)?;
        let (s, b) = self.head(tape, store, h, i);
        if tape.shape(s)[0] != tape.shape(features)[0] {
            return Err(Error::Shape(format!(
                "layer {layer} is registered with {} channels, features have {}",
                tape.shape(s)[0],
                tape.shape(features)[0]
            )));
        }
        Ok(tape.modulate(features, s, b))
    }
}

/// Measured sequence bpp at the two ends of each lambda group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `(lambda_p index, bpp at group low lambda_i, bpp at group high lambda_i)`.
    pub brackets: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaPair {
    pub lambda_p: usize,
    pub lambda_i: f64,
    pub bounds: (f64, f64),
    /// Set when the target fell outside every calibrated bracket.
    pub warning: Option<String>,
}

/// Picks the inter lambda whose calibrated bracket contains `target_bpp`,
/// with the intra lambda at the middle of its group.
pub fn select_lambda_pair(target_bpp: f64, cal: &Calibration) -> Result<LambdaPair> {
    if cal.brackets.is_empty() {
        return Err(Error::Lambda("empty calibration table".into()));
    }
    let pair = |p: usize, warning: Option<String>| LambdaPair {
        lambda_p: p,
        lambda_i: group_mid(p),
        bounds: group_bounds(p),
        warning,
    };
    for &(p, lo, hi) in &cal.brackets {
        if target_bpp >= lo.min(hi) && target_bpp <= lo.max(hi) {
            return Ok(pair(p, None));
        }
    }
    let lowest = cal
        .brackets
        .iter()
        .min_by(|a, b| a.1.min(a.2).total_cmp(&b.1.min(b.2)))
        .unwrap();
    let highest = cal
        .brackets
        .iter()
        .max_by(|a, b| a.1.max(a.2).total_cmp(&b.1.max(b.2)))
        .unwrap();
    if target_bpp < lowest.1.min(lowest.2) {
        let msg = format!("target {target_bpp} bpp below calibrated range; using lambda_p {}", LAMBDA_P[lowest.0]);
        log::warn!("{msg}");
        return Ok(pair(lowest.0, Some(msg)));
    }
    if target_bpp > highest.1.max(highest.2) {
        let msg = format!("target {target_bpp} bpp above calibrated range; using lambda_p {}", LAMBDA_P[highest.0]);
        log::warn!("{msg}");
        return Ok(pair(highest.0, Some(msg)));
    }
    // in a gap between brackets: take the bracket with the nearest edge
    let dist = |b: &(usize, f64, f64)| (b.1 - target_bpp).abs().min((b.2 - target_bpp).abs());
    let near = cal.brackets.iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).unwrap();
    let msg = format!("target {target_bpp} bpp falls between calibrated brackets");
    log::warn!("{msg}");
    Ok(pair(near.0, Some(msg)))
}

pub const MAX_SEARCH_STEPS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub lambda_i: f64,
    /// Measured bpp at `lambda_i` (absent when no measurement was needed).
    pub bpp: Option<f64>,
    /// Bisection steps taken after measuring the bracket ends.
    pub steps: usize,
    pub diagnostic: Option<String>,
}

/// Bisection in log-lambda within `bounds` until the measured bpp is within
/// `tol` (relative) of `target` or [`MAX_SEARCH_STEPS`] steps have run.
pub fn search_rate(
    mut measure: impl FnMut(f64) -> Result<f64>,
    bounds: (f64, f64),
    target: f64,
    tol: f64,
) -> Result<SearchResult> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Lambda(format!("invalid search bounds {bounds:?}")));
    }
    let mid = (lo * hi).sqrt();
    if tol.is_infinite() {
        return Ok(SearchResult {
            lambda_i: mid,
            bpp: None,
            steps: 0,
            diagnostic: None,
        });
    }
    let close = |b: f64| ((b - target) / target).abs() <= tol;
    let b_lo = measure(lo)?;
    if close(b_lo) {
        return Ok(SearchResult {
            lambda_i: lo,
            bpp: Some(b_lo),
            steps: 0,
            diagnostic: None,
        });
    }
    let b_hi = measure(hi)?;
    if close(b_hi) {
        return Ok(SearchResult {
            lambda_i: hi,
            bpp: Some(b_hi),
            steps: 0,
            diagnostic: None,
        });
    }
    let mut best = if (b_lo - target).abs() <= (b_hi - target).abs() { (lo, b_lo) } else { (hi, b_hi) };
    if b_lo > b_hi {
        return Ok(SearchResult {
            lambda_i: best.0,
            bpp: Some(best.1),
            steps: 0,
            diagnostic: Some(format!("bpp not increasing over the group: {b_lo} at {lo}, {b_hi} at {hi}")),
        });
    }
    if target < b_lo || target > b_hi {
        return Ok(SearchResult {
            lambda_i: best.0,
            bpp: Some(best.1),
            steps: 0,
            diagnostic: Some(format!("target {target} outside the group's range [{b_lo}, {b_hi}]")),
        });
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let (mut fa, mut fb) = (b_lo, b_hi);
    let mut diagnostic = None;
    for step in 1..=MAX_SEARCH_STEPS {
        let m = 0.5 * (a + b);
        let lm = m.exp();
        let bm = measure(lm)?;
        if (bm - target).abs() < (best.1 - target).abs() {
            best = (lm, bm);
        }
        if close(bm) {
            return Ok(SearchResult {
                lambda_i: lm,
                bpp: Some(bm),
                steps: step,
                diagnostic: None,
            });
        }
        if bm < fa || bm > fb {
            diagnostic = Some(format!("non-monotone bpp at lambda {lm}: {bm} outside [{fa}, {fb}]"));
            return Ok(SearchResult {
                lambda_i: best.0,
                bpp: Some(best.1),
                steps: step,
                diagnostic,
            });
        }
        if bm < target {
            a = m;
            fa = bm;
        } else {
            b = m;
            fb = bm;
        }
    }
    if diagnostic.is_none() {
        diagnostic = Some(format!("tolerance not reached in {MAX_SEARCH_STEPS} steps"));
    }
    Ok(SearchResult {
        lambda_i: best.0,
        bpp: Some(best.1),
        steps: MAX_SEARCH_STEPS,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use anfvc_nn::Tape64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_table() {
        assert_eq!(group_bounds(lambda_p_index(1024.0).unwrap()), (5e-3, 5e-2));
        assert_eq!(group_bounds(lambda_p_index(4096.0).unwrap()), (1e-2, 1e-1));
        assert_eq!(group_bounds(lambda_p_index(16384.0).unwrap()), (2e-2, 2e-1));
        assert_eq!(group_bounds(lambda_p_index(65536.0).unwrap()), (2e-1, 5e-1));
        assert!(lambda_p_index(2048.0).is_err());
    }

    #[test]
    fn condition_features() {
        assert_eq!(LambdaCondition::intra(LAMBDA_I_MIN).unwrap().features(), vec![-1.0]);
        assert!((LambdaCondition::intra(LAMBDA_I_MAX).unwrap().features()[0] - 1.0).abs() < 1e-12);
        assert!(LambdaCondition::intra(0.6).is_err());
        assert_eq!(LambdaCondition::inter(2).unwrap().features(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(LambdaCondition::inter(4).is_err());
    }

    fn net(store: &mut ParamStore<f64>) -> RateNet {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        RateNet::new(store, "r", 4, &[("a.conv0".into(), 3), ("b.conv1".into(), 2)], &mut rng)
    }

    #[test]
    fn identity_at_init_and_explicit_scale() {
        let mut store = ParamStore::<f64>::new();
        let r = net(&mut store);
        let mut t = Tape64::new();
        let x = t.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64 - 5.5));
        let y = r.modulate(&mut t, &store, x, &LambdaCondition::Inter(1), "a.conv0").unwrap();
        assert_eq!(t.value(y), t.value(x));
        // scale = exp(ln 2) = 2, shift 0: constant 3 -> 6
        let id = store.id("r.a_conv0.scale.b").unwrap();
        store.set(id, Tensor::full(&[3], 2f64.ln()));
        let mut t = Tape64::new();
        let x = t.constant(Tensor::full(&[3, 2, 2], 3.0));
        let y = r.modulate(&mut t, &store, x, &LambdaCondition::Inter(0), "a.conv0").unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn unregistered_layer_rejected() {
        let mut store = ParamStore::<f64>::new();
        let r = net(&mut store);
        let mut t = Tape64::new();
        let x = t.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(matches!(
            r.modulate(&mut t, &store, x, &LambdaCondition::Inter(0), "nope"),
            Err(Error::UnregisteredLayer(_))
        ));
        assert!(r.forward(&mut t, &store, &LambdaCondition::Intra(0.1)).is_err());
    }

    fn cal() -> Calibration {
        Calibration {
            brackets: vec![(0, 0.05, 0.1), (1, 0.09, 0.2), (2, 0.18, 0.4), (3, 0.35, 0.8)],
        }
    }

    #[test]
    fn pair_selection_and_clamping() {
        let p = select_lambda_pair(0.15, &cal()).unwrap();
        assert_eq!((p.lambda_p, p.bounds, p.warning.is_none()), (1, (1e-2, 1e-1), true));
        assert!((p.lambda_i - (1e-3f64).sqrt()).abs() < 1e-12);
        let low = select_lambda_pair(0.01, &cal()).unwrap();
        assert_eq!(low.lambda_p, 0);
        assert!(low.warning.is_some());
        let high = select_lambda_pair(5.0, &cal()).unwrap();
        assert_eq!((high.lambda_p, high.bounds), (3, (2e-1, 5e-1)));
        assert!(high.warning.is_some());
    }

    #[test]
    fn search_on_power_law_oracle() {
        let (a, b) = (3.0, 0.6);
        let f = |l: f64| Ok(a * l.powf(b));
        for &target in &[0.2, 0.35, 0.5] {
            let r = search_rate(f, (1e-2, 1e-1), target, 0.01).unwrap();
            let exact = (target / a).powf(1.0 / b);
            assert!(r.steps <= MAX_SEARCH_STEPS);
            assert!(((r.lambda_i - exact) / exact).abs() < 0.02, "{r:?} vs {exact}");
            assert!(((r.bpp.unwrap() - target) / target).abs() <= 0.01);
        }
        let end = search_rate(f, (1e-2, 1e-1), a * 0.1f64.powf(b), 0.01).unwrap();
        assert_eq!((end.lambda_i, end.steps), (0.1, 0));
        let inf = search_rate(|_| panic!("no measurement expected"), (1e-2, 1e-1), 0.3, f64::INFINITY).unwrap();
        assert!((inf.lambda_i - (1e-3f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn search_reports_non_monotone_measurements() {
        let r = search_rate(|l: f64| Ok(1.0 / l), (1e-2, 1e-1), 50.0, 0.01).unwrap();
        assert!(r.diagnostic.is_some());
    }
}
