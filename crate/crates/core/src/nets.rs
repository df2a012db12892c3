//! Convolutional building blocks shared by the coders.

use std::collections::HashMap;

use anfvc_nn::layers::{Conv2d, ConvTranspose2d, Gdn};
use anfvc_nn::{factorized, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY: f64 = 0.1;

/// Per-layer `(scale, shift)` variables produced by a rate-adaption net.
#[derive(Clone, Debug, Default)]
pub struct Mods {
    pairs: HashMap<String, (Var, Var)>,
}

impl Mods {
    pub fn insert(&mut self, layer: String, scale: Var, shift: Var) {
        self.pairs.insert(layer, (scale, shift));
    }

    pub fn get(&self, layer: &str) -> Option<(Var, Var)> {
        self.pairs.get(layer).copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Merges two sets; later entries win.
    pub fn merged(mut self, other: &Mods) -> Mods {
        for (k, v) in &other.pairs {
            self.pairs.insert(k.clone(), *v);
        }
        self
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Down(Conv2d),
    Up(ConvTranspose2d),
}

/// A convolution whose output may be modulated channel-wise.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub name: String,
    pub out_channels: usize,
    kind: Kind,
}

impl ModConv {
    pub fn conv<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ModConv {
            name: name.to_string(),
            out_channels: cout,
            kind: Kind::Down(Conv2d::new(store, name, cin, cout, k, stride, rng)),
        }
    }

    pub fn up<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ModConv {
            name: name.to_string(),
            out_channels: cout,
            kind: Kind::Up(ConvTranspose2d::new(store, name, cin, cout, k, stride, rng)),
        }
    }

    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let (w, b) = match &self.kind {
            Kind::Down(c) => (c.w, c.b),
            Kind::Up(c) => (c.w, c.b),
        };
        for id in [w, b] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s));
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mods: Option<&Mods>) -> Var {
        let y = match &self.kind {
            Kind::Down(c) => c.forward(tape, store, x),
            Kind::Up(c) => c.forward(tape, store, x),
        };
        match mods.and_then(|m| m.get(&self.name)) {
            Some((s, b)) => tape.modulate(y, s, b),
            None => y,
        }
    }

    pub fn spec(&self) -> (String, usize) {
        (self.name.clone(), self.out_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Gdn,
    Leaky,
}

/// Strided downsampling stack. Stage `i > 0` may take extra channels that
/// are concatenated to its input (conditioning features).
#[derive(Clone, Debug)]
pub struct Analysis {
    convs: Vec<ModConv>,
    gdns: Vec<Gdn>,
    act: Act,
}

impl Analysis {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        layers: usize,
        extra: &[usize],
        act: Act,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut gdns = Vec::new();
        for i in 0..layers {
            let ci = if i == 0 { cin } else { mid + extra.get(i - 1).copied().unwrap_or(0) };
            let co = if i + 1 == layers { cout } else { mid };
            convs.push(ModConv::conv(store, &format!("{name}.conv{i}"), ci, co, 5, 2, rng));
            if i + 1 < layers && act == Act::Gdn {
                gdns.push(Gdn::new(store, &format!("{name}.gdn{i}"), mid, false));
            }
        }
        Analysis { convs, gdns, act }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        extra: &[Var],
        mods: Option<&Mods>,
    ) -> Var {
        let mut h = x;
        let n = self.convs.len();
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                if let Some(&e) = extra.get(i - 1) {
                    h = tape.concat(&[h, e]);
                }
            }
            h = c.forward(tape, store, h, mods);
            if i + 1 < n {
                h = match self.act {
                    Act::Gdn => self.gdns[i].forward(tape, store, h),
                    Act::Leaky => tape.leaky_relu(h, T::lit(LEAKY)),
                };
            }
        }
        h
    }

    pub fn specs(&self) -> Vec<(String, usize)> {
        self.convs.iter().map(ModConv::spec).collect()
    }
}

/// Transposed mirror of [`Analysis`] with inverse GDN.
#[derive(Clone, Debug)]
pub struct Synthesis {
    convs: Vec<ModConv>,
    gdns: Vec<Gdn>,
    act: Act,
}

impl Synthesis {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        layers: usize,
        act: Act,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut gdns = Vec::new();
        for i in 0..layers {
            let ci = if i == 0 { cin } else { mid };
            let co = if i + 1 == layers { cout } else { mid };
            convs.push(ModConv::up(store, &format!("{name}.deconv{i}"), ci, co, 5, 2, rng));
            if i + 1 < layers && act == Act::Gdn {
                gdns.push(Gdn::new(store, &format!("{name}.igdn{i}"), mid, true));
            }
        }
        Synthesis { convs, gdns, act }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mods: Option<&Mods>) -> Var {
        let mut h = x;
        let n = self.convs.len();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, store, h, mods);
            if i + 1 < n {
                h = match self.act {
                    Act::Gdn => self.gdns[i].forward(tape, store, h),
                    Act::Leaky => tape.leaky_relu(h, T::lit(LEAKY)),
                };
            }
        }
        h
    }

    pub fn last(&self) -> &ModConv {
        self.convs.last().expect("non-empty stack")
    }

    pub fn specs(&self) -> Vec<(String, usize)> {
        self.convs.iter().map(ModConv::spec).collect()
    }
}

/// Quantization behaviour of a forward pass.
pub enum Quant<'r> {
    /// Uniform noise for the rate, straight-through rounding for the output.
    Train(&'r mut ChaCha8Rng),
    /// Nearest-integer rounding.
    Eval,
    /// No quantization at all (invertibility checks).
    Identity,
}

impl Quant<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, Quant::Eval)
    }
}

/// Quantizes `v - mean`; returns `(symbols for the rate, values for the
/// reconstruction path)`.
pub fn quantize_var<T: Scalar>(tape: &mut Tape<T>, v: Var, mean: Option<Var>, q: &mut Quant<'_>) -> (Var, Var) {
    let centred = match mean {
        Some(m) => tape.sub(v, m),
        None => v,
    };
    match q {
        Quant::Train(rng) => {
            let shape = tape.shape(centred).to_vec();
            let u = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-0.5..0.5)));
            let u = tape.constant(u);
            let noisy = tape.add(centred, u);
            let ste = tape.round_ste(centred);
            (noisy, ste)
        }
        Quant::Eval => {
            let r = tape.value(centred).map(|x| x.round());
            let r = tape.constant(r);
            (r, r)
        }
        Quant::Identity => (centred, centred),
    }
}

/// Forward result of a [`HyperPrior`].
pub struct HyperOut<T> {
    /// Dequantized latent: symbols plus the predicted mean.
    pub z_q: Var,
    pub bits_z: Var,
    pub bits_h: Var,
    pub z_sym: Option<Tensor<T>>,
    pub h_sym: Option<Tensor<T>>,
    /// Gaussian scales for `z_sym` (before the lower bound).
    pub scale: Var,
}

/// Mean-scale hyperprior: hyper analysis, factorized prior on the hyper
/// latent, hyper synthesis producing Gaussian mean and scale.
#[derive(Clone, Debug)]
pub struct HyperPrior {
    h_a: Vec<ModConv>,
    h_s: Vec<ModConv>,
    pub prior: Vec<ParamId>,
    pub latent_channels: usize,
    pub hyper_channels: usize,
}

impl HyperPrior {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, k: usize, m: usize, l: usize, rng: &mut impl Rng) -> Self {
        let h_a = vec![
            ModConv::conv(store, &format!("{name}.ha0"), k, m, 3, 1, rng),
            ModConv::conv(store, &format!("{name}.ha1"), m, m, 5, 2, rng),
            ModConv::conv(store, &format!("{name}.ha2"), m, l, 5, 2, rng),
        ];
        let h_s = vec![
            ModConv::up(store, &format!("{name}.hs0"), l, m, 5, 2, rng),
            ModConv::up(store, &format!("{name}.hs1"), m, m, 5, 2, rng),
            ModConv::conv(store, &format!("{name}.hs2"), m, 2 * k, 3, 1, rng),
        ];
        let prior = factorized::init_params::<T>(l, rng)
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("{name}.prior{i}"), t))
            .collect();
        HyperPrior {
            h_a,
            h_s,
            prior,
            latent_channels: k,
            hyper_channels: l,
        }
    }

    fn stack<T: Scalar>(layers: &[ModConv], tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mods: Option<&Mods>) -> Var {
        let mut h = x;
        for (i, c) in layers.iter().enumerate() {
            h = c.forward(tape, store, h, mods);
            if i + 1 < layers.len() {
                h = tape.leaky_relu(h, T::lit(LEAKY));
            }
        }
        h
    }

    /// `(mean, scale)` of the main latent given the (dequantized) hyper latent.
    pub fn synthesize<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_hat: Var, mods: Option<&Mods>) -> (Var, Var) {
        let out = Self::stack(&self.h_s, tape, store, h_hat, mods);
        let k = self.latent_channels;
        let mean = tape.slice(out, 0, k);
        let raw = tape.slice(out, k, 2 * k);
        let scale = tape.softplus(raw);
        (mean, scale)
    }

    pub fn prior_vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Vec<Var> {
        self.prior.iter().map(|&id| tape.param(store, id)).collect()
    }

    pub fn prior_tensors<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.prior.iter().map(|&id| store.get(id).clone()).collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        q: &mut Quant<'_>,
        mods: Option<&Mods>,
    ) -> HyperOut<T> {
        let h = Self::stack(&self.h_a, tape, store, z, mods);
        let (h_rate, h_hat) = quantize_var(tape, h, None, q);
        let prior = self.prior_vars(tape, store);
        let bits_h = tape.factorized_bits(h_rate, &prior);
        let (mean, scale) = self.synthesize(tape, store, h_hat, mods);
        let (z_rate, z_ste) = quantize_var(tape, z, Some(mean), q);
        let bits_z = tape.gaussian_bits(z_rate, scale);
        let z_q = tape.add(z_ste, mean);
        let eval = q.is_eval();
        HyperOut {
            z_q,
            bits_z,
            bits_h,
            z_sym: eval.then(|| tape.value(z_ste).clone()),
            h_sym: eval.then(|| tape.value(h_hat).clone()),
            scale,
        }
    }

    /// Decoder side: rebuilds `z_q` from decoded symbols.
    pub fn dequantize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_sym: Tensor<T>,
        z_sym: Tensor<T>,
        mods: Option<&Mods>,
    ) -> Var {
        let h = tape.constant(h_sym);
        let (mean, _) = self.synthesize(tape, store, h, mods);
        let z = tape.constant(z_sym);
        tape.add(z, mean)
    }

    /// Gaussian scales for given hyper symbols (to build the decoder's tables).
    pub fn scales<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_sym: Tensor<T>, mods: Option<&Mods>) -> Var {
        let h = tape.constant(h_sym);
        self.synthesize(tape, store, h, mods).1
    }

    pub fn specs(&self) -> Vec<(String, usize)> {
        self.h_a.iter().chain(&self.h_s).map(ModConv::spec).collect()
    }
}

/// Strided feature pyramid of a conditioning frame: one map per analysis
/// stage after the first, at that stage's input resolution.
#[derive(Clone, Debug)]
pub struct CondPyramid {
    convs: Vec<ModConv>,
}

impl CondPyramid {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(ModConv::conv(store, &format!("{name}.conv{i}"), c, w, 5, 2, rng));
            c = w;
        }
        CondPyramid { convs }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mods: Option<&Mods>) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(tape, store, h, mods);
            h = tape.leaky_relu(y, T::lit(LEAKY));
            out.push(h);
        }
        out
    }

    pub fn specs(&self) -> Vec<(String, usize)> {
        self.convs.iter().map(ModConv::spec).collect()
    }
}

/// Tensor of symbols as `i32` (values are integral by construction).
pub fn to_symbols<T: Scalar>(t: &Tensor<T>) -> Vec<i32> {
    t.data().iter().map(|v| v.as_f64().clamp(i32::MIN as f64, i32::MAX as f64) as i32).collect()
}

pub fn from_symbols<T: Scalar>(shape: &[usize], s: &[i32]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::lit(s[i] as f64))
}
