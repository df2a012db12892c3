//! Augmented normalizing flow autoencoder with a hyperprior step.
//!
//! Encoding with `z = 0` (the augmented input) runs, for each step `s`,
//! `z += m_enc_s(x)` and, except after the last step, `x -= mu_dec_s(z)`.
//! The hyperprior then quantizes `z` around a predicted mean, and the last
//! decoding transform gives the image residue `x2 = x - mu_dec_last(z_q)`.
//! Decoding starts from `x2 := 0` (intra) or `x2 := x_tilde` (inter) and
//! inverts the steps in reverse order. In the conditional variant every
//! encoding transform also sees the prediction `x_tilde`: concatenated to its
//! input and, after each GDN stage, through a learned strided feature map.

use anfvc_nn::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::{Act, Analysis, CondPyramid, HyperPrior, Mods, Quant, Synthesis};
use crate::{Error, Result};

/// Spatial factor between the packed input and the main latent.
pub const LATENT_STRIDE: usize = 8;
/// Spatial factor between the main and the hyper latent.
pub const HYPER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnfConfig {
    pub n_steps: usize,
    /// Channels of the autoencoding transforms.
    pub n: usize,
    /// Channels of the hyperprior transforms.
    pub m: usize,
    /// Channels of the main latent.
    pub k: usize,
    /// Channels of the hyper latent.
    pub l: usize,
    pub conditional: bool,
    pub input_channels: usize,
    /// Width of each conditioning feature map.
    pub cond_channels: usize,
}

impl AnfConfig {
    pub fn intra_preset() -> Self {
        AnfConfig {
            n_steps: 2,
            n: 128,
            m: 192,
            k: 320,
            l: 192,
            conditional: false,
            input_channels: 6,
            cond_channels: 0,
        }
    }

    pub fn inter_preset() -> Self {
        AnfConfig {
            n_steps: 2,
            n: 128,
            m: 192,
            k: 128,
            l: 128,
            conditional: true,
            input_channels: 6,
            cond_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_steps, self.n, self.m, self.k, self.l, self.input_channels];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("all ANF channel counts must be positive: {self:?}")));
        }
        if self.conditional && self.cond_channels == 0 {
            return Err(Error::Config("conditional ANF needs cond_channels > 0".into()));
        }
        Ok(())
    }

    /// Smallest packed-grid size multiple the strides admit.
    pub fn grid_multiple() -> usize {
        LATENT_STRIDE * HYPER_STRIDE
    }
}

/// One forward pass through the encoder, including the encoder-side decode.
pub struct AnfEncoded<T> {
    /// Image-branch residue (never transmitted).
    pub x2: Var,
    /// Dequantized main latent.
    pub z_q: Var,
    /// Estimated bits of the main and hyper latents.
    pub bits_z: Var,
    pub bits_h: Var,
    pub bits: Var,
    /// Reconstruction from `z_q` with `x2` replaced by its prior mean, clamped.
    pub x_hat: Var,
    /// The same before clamping.
    pub x_rec: Var,
    /// Integer symbols, present in eval mode.
    pub z_sym: Option<Tensor<T>>,
    pub h_sym: Option<Tensor<T>>,
    pub scale: Var,
}

#[derive(Clone, Debug)]
pub struct AnfCoder {
    cfg: AnfConfig,
    m_enc: Vec<Analysis>,
    mu_dec: Vec<Synthesis>,
    pub hyper: HyperPrior,
    cond: Option<CondPyramid>,
}

impl AnfCoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: AnfConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (cin, extra) = if cfg.conditional {
            (2 * cfg.input_channels, vec![cfg.cond_channels; 2])
        } else {
            (cfg.input_channels, Vec::new())
        };
        let mut m_enc = Vec::with_capacity(cfg.n_steps);
        let mut mu_dec = Vec::with_capacity(cfg.n_steps);
        for s in 0..cfg.n_steps {
            m_enc.push(Analysis::new(store, &format!("{name}.enc{s}"), cin, cfg.n, cfg.k, 3, &extra, Act::Gdn, rng));
            mu_dec.push(Synthesis::new(store, &format!("{name}.dec{s}"), cfg.k, cfg.n, cfg.input_channels, 3, Act::Gdn, rng));
        }
        let hyper = HyperPrior::new(store, &format!("{name}.hyper"), cfg.k, cfg.m, cfg.l, rng);
        let cond = cfg.conditional.then(|| {
            CondPyramid::new(store, &format!("{name}.cond"), cfg.input_channels, &[cfg.cond_channels; 2], rng)
        });
        Ok(AnfCoder {
            cfg,
            m_enc,
            mu_dec,
            hyper,
            cond,
        })
    }

    pub fn config(&self) -> &AnfConfig {
        &self.cfg
    }

    /// Every convolution, for rate-adaption registration.
    pub fn layer_specs(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (e, d) in self.m_enc.iter().zip(&self.mu_dec) {
            v.extend(e.specs());
            v.extend(d.specs());
        }
        v.extend(self.hyper.specs());
        if let Some(c) = &self.cond {
            v.extend(c.specs());
        }
        v
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let m = AnfConfig::grid_multiple();
        if s.len() != 3 || s[0] != self.cfg.input_channels || s[1] % m != 0 || s[2] % m != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!(
                "ANF input must be [{}, h, w] with h, w multiples of {m}, got {s:?}",
                self.cfg.input_channels
            )));
        }
        Ok(())
    }

    /// Conditioning features, or an error if presence disagrees with the config.
    pub fn condition<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x_tilde: Option<Var>,
        mods: Option<&Mods>,
    ) -> Result<Option<(Var, Vec<Var>)>> {
        match (&self.cond, x_tilde) {
            (Some(p), Some(xt)) => {
                let feats = p.forward(tape, store, xt, mods);
                Ok(Some((xt, feats)))
            }
            (Some(_), None) => Err(Error::MissingCondition),
            (None, Some(_)) => Err(Error::Shape("unconditional coder given a conditioning frame".into())),
            (None, None) => Ok(None),
        }
    }

    fn m_enc_at<T: Scalar>(
        &self,
        s: usize,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: &Option<(Var, Vec<Var>)>,
        mods: Option<&Mods>,
    ) -> Var {
        match cond {
            Some((xt, feats)) => {
                let inp = tape.concat(&[x, *xt]);
                self.m_enc[s].forward(tape, store, inp, feats, mods)
            }
            None => self.m_enc[s].forward(tape, store, x, &[], mods),
        }
    }

    /// Runs the inverse transforms from `z_q` and a starting `x2`; `mu_last`
    /// may carry an already computed `mu_dec_last(z_q)`.
    #[allow(clippy::too_many_arguments)]
    pub fn inverse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_q: Var,
        x2: Var,
        mu_last: Option<Var>,
        cond: &Option<(Var, Vec<Var>)>,
        mods: Option<&Mods>,
    ) -> Var {
        let n = self.cfg.n_steps;
        let mu = mu_last.unwrap_or_else(|| self.mu_dec[n - 1].forward(tape, store, z_q, mods));
        let mut x = tape.add(x2, mu);
        let mut z = z_q;
        for s in (1..n).rev() {
            let e = self.m_enc_at(s, tape, store, x, cond, mods);
            z = tape.sub(z, e);
            let d = self.mu_dec[s - 1].forward(tape, store, z, mods);
            x = tape.add(x, d);
        }
        x
    }

    /// The decoder's starting residue: zeros, or the prediction.
    fn prior_mean<T: Scalar>(&self, tape: &mut Tape<T>, x_shape: &[usize], cond: &Option<(Var, Vec<Var>)>) -> Var {
        match cond {
            Some((xt, _)) => *xt,
            None => tape.constant(Tensor::zeros(x_shape)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        x_tilde: Option<Var>,
        q: &mut Quant<'_>,
        mods: Option<&Mods>,
    ) -> Result<AnfEncoded<T>> {
        self.check_input(tape, x)?;
        if let Some(xt) = x_tilde {
            if tape.shape(xt) != tape.shape(x) {
                return Err(Error::Shape(format!(
                    "prediction {:?} does not match input {:?}",
                    tape.shape(xt),
                    tape.shape(x)
                )));
            }
        }
        let cond = self.condition(tape, store, x_tilde, mods)?;
        let x_shape = tape.shape(x).to_vec();
        let n = self.cfg.n_steps;
        let mut xs = x;
        let mut z: Option<Var> = None;
        for s in 0..n {
            let e = self.m_enc_at(s, tape, store, xs, &cond, mods);
            z = Some(match z {
                Some(z) => tape.add(z, e),
                None => e,
            });
            if s + 1 < n {
                let d = self.mu_dec[s].forward(tape, store, z.unwrap(), mods);
                xs = tape.sub(xs, d);
            }
        }
        let h = self.hyper.forward(tape, store, z.unwrap(), q, mods);
        let mu_last = self.mu_dec[n - 1].forward(tape, store, h.z_q, mods);
        let x2 = tape.sub(xs, mu_last);
        let start = self.prior_mean(tape, &x_shape, &cond);
        let rec = self.inverse(tape, store, h.z_q, start, Some(mu_last), &cond, mods);
        let x_hat = tape.clamp(rec, T::zero(), T::one());
        let bits = tape.add(h.bits_z, h.bits_h);
        Ok(AnfEncoded {
            x2,
            z_q: h.z_q,
            bits_z: h.bits_z,
            bits_h: h.bits_h,
            bits,
            x_hat,
            x_rec: rec,
            z_sym: h.z_sym,
            h_sym: h.h_sym,
            scale: h.scale,
        })
    }

    /// Decoder: rebuilds the frame from transmitted symbols.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_sym: Tensor<T>,
        z_sym: Tensor<T>,
        x_tilde: Option<Var>,
        mods: Option<&Mods>,
    ) -> Result<Var> {
        let rec = self.decode_raw(tape, store, h_sym, z_sym, x_tilde, mods)?;
        Ok(tape.clamp(rec, T::zero(), T::one()))
    }

    /// [`AnfCoder::decode`] without the final clamp.
    pub fn decode_raw<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_sym: Tensor<T>,
        z_sym: Tensor<T>,
        x_tilde: Option<Var>,
        mods: Option<&Mods>,
    ) -> Result<Var> {
        let (k, _, _) = z_sym.dims3();
        if k != self.cfg.k || h_sym.dims3().0 != self.cfg.l {
            return Err(Error::Shape(format!(
                "latent channels {k}/{} do not match coder {}/{}",
                h_sym.dims3().0,
                self.cfg.k,
                self.cfg.l
            )));
        }
        let (_, lh, lw) = z_sym.dims3();
        let x_shape = [self.cfg.input_channels, lh * LATENT_STRIDE, lw * LATENT_STRIDE];
        let cond = self.condition(tape, store, x_tilde, mods)?;
        let z_q = self.hyper.dequantize(tape, store, h_sym, z_sym, mods);
        let start = self.prior_mean(tape, &x_shape, &cond);
        Ok(self.inverse(tape, store, z_q, start, None, &cond, mods))
    }

    /// Latent shapes `([K, h/8, w/8], [L, h/32, w/32])` for packed grid `(h, w)`.
    pub fn latent_shapes(&self, h: usize, w: usize) -> ([usize; 3], [usize; 3]) {
        let (zh, zw) = (h / LATENT_STRIDE, w / LATENT_STRIDE);
        (
            [self.cfg.k, zh, zw],
            [self.cfg.l, zh / HYPER_STRIDE, zw / HYPER_STRIDE],
        )
    }
}

/// `round(v - mean)` when `noise` is `None`, else `(v - mean) + U(-1/2, 1/2)`.
pub fn quantize<T: Scalar>(v: &Tensor<T>, mean: &Tensor<T>, noise: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
    if v.shape() != mean.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", v.shape(), mean.shape())));
    }
    Ok(match noise {
        None => v.zip_map(mean, |a, b| (a - b).round()),
        Some(rng) => {
            let d: Vec<T> = v
                .data()
                .iter()
                .zip(mean.data())
                .map(|(&a, &b)| a - b + T::lit(rng.gen_range(-0.5..0.5)))
                .collect();
            Tensor::from_vec(v.shape(), d)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use anfvc_nn::{ParamStore, Tape64, Tensor64};
    use rand::SeedableRng;

    fn tiny(conditional: bool) -> AnfConfig {
        AnfConfig {
            n_steps: 2,
            n: 8,
            m: 8,
            k: 6,
            l: 4,
            conditional,
            input_channels: 6,
            cond_channels: if conditional { 4 } else { 0 },
        }
    }

    fn input(seed: u64) -> Tensor64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor64::from_fn(&[6, 32, 32], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn presets_construct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        AnfCoder::new(&mut s, "i", AnfConfig::intra_preset(), &mut rng).unwrap();
        AnfCoder::new(&mut s, "p", AnfConfig::inter_preset(), &mut rng).unwrap();
        let mut bad = AnfConfig::intra_preset();
        bad.k = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quantize_examples() {
        let v = Tensor64::from_vec(&[2], vec![0.4, -1.6]);
        let z = Tensor64::zeros(&[2]);
        assert_eq!(quantize(&v, &z, None).unwrap().data(), &[0.0, -2.0]);
        assert_eq!(quantize(&v, &v, None).unwrap().data(), &[0.0, 0.0]);
        assert!(quantize(&v, &Tensor64::zeros(&[3]), None).is_err());
    }

    #[test]
    fn quantize_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let v = Tensor64::full(&[n], 0.3);
        let m = Tensor64::full(&[n], -0.2);
        let q = quantize(&v, &m, Some(&mut rng)).unwrap();
        let mean = q.sum() / n as f64;
        let var = q.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.002, "{var}");
    }

    #[test]
    fn zero_weights_trace() {
        // all weights zero: m_enc = 0 and mu_dec = bias = 0, so z1 = 0, x1 = x,
        // the hyper mean is 0 and x2 = x
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let coder = AnfCoder::new(&mut store, "a", tiny(false), &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if name.ends_with(".w") || name.ends_with(".b") {
                let s = store.get(id).shape().to_vec();
                store.set(id, Tensor64::zeros(&s));
            }
        }
        let mut t = Tape64::inference();
        let x = t.constant(input(2));
        let enc = coder.encode(&mut t, &store, x, None, &mut Quant::Eval, None).unwrap();
        assert_eq!(t.value(enc.x2), t.value(x));
        assert!(enc.z_sym.unwrap().data().iter().all(|&v| v == 0.0));
        // zero latents decode to the (zero) biases
        assert!(t.value(enc.x_hat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invertible_without_quantization() {
        for conditional in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f64>::new();
            let coder = AnfCoder::new(&mut store, "a", tiny(conditional), &mut rng).unwrap();
            let mut t = Tape64::inference();
            let x = t.constant(input(4));
            let xt = conditional.then(|| t.constant(input(5)));
            let enc = coder.encode(&mut t, &store, x, xt, &mut Quant::Identity, None).unwrap();
            let cond = coder.condition(&mut t, &store, xt, None).unwrap();
            let back = coder.inverse(&mut t, &store, enc.z_q, enc.x2, None, &cond, None);
            let err = t.value(back).max_abs_diff(t.value(x));
            assert!(err < 1e-10, "conditional={conditional}: {err}");
        }
    }

    #[test]
    fn closed_loop_and_determinism() {
        for conditional in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut store = ParamStore::<f32>::new();
            let coder = AnfCoder::new(&mut store, "a", tiny(conditional), &mut rng).unwrap();
            let xin = input(7).cast::<f32>();
            let xt_in = input(8).cast::<f32>();
            let run = || {
                let mut t = anfvc_nn::Tape32::inference();
                let x = t.constant(xin.clone());
                let xt = conditional.then(|| t.constant(xt_in.clone()));
                let e = coder.encode(&mut t, &store, x, xt, &mut Quant::Eval, None).unwrap();
                (t.value(e.x_hat).clone(), e.z_sym.unwrap(), e.h_sym.unwrap())
            };
            let (rec, zs, hs) = run();
            let (_, zs2, hs2) = run();
            assert_eq!((&zs, &hs), (&zs2, &hs2));
            let mut t = anfvc_nn::Tape32::inference();
            let xt = conditional.then(|| t.constant(xt_in.clone()));
            let dec = coder.decode(&mut t, &store, hs, zs, xt, None).unwrap();
            assert_eq!(t.value(dec), &rec);
        }
    }

    #[test]
    fn condition_presence_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let c = AnfCoder::new(&mut store, "c", tiny(true), &mut rng).unwrap();
        let u = AnfCoder::new(&mut store, "u", tiny(false), &mut rng).unwrap();
        let mut t = Tape64::inference();
        let x = t.constant(input(1));
        assert!(matches!(
            c.encode(&mut t, &store, x, None, &mut Quant::Eval, None),
            Err(Error::MissingCondition)
        ));
        assert!(u.encode(&mut t, &store, x, Some(x), &mut Quant::Eval, None).is_err());
        let bad = t.constant(Tensor64::zeros(&[6, 20, 32]));
        assert!(u.encode(&mut t, &store, bad, None, &mut Quant::Eval, None).is_err());
    }
}
