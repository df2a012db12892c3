//! Motion estimation, motion coding and compensation.
//!
//! Flow is estimated between 4:4:4 frames at luma resolution and maps the
//! reference toward the current frame under backward warping:
//! `cur(p) ~ ref(p + f(p))`. The decoded flow warps Y at full resolution
//! (before space-to-depth) and, downsampled and halved, the chroma planes.

use std::path::Path;

use anfvc_nn::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::{Act, Analysis, HyperPrior, ModConv, Mods, Quant, Synthesis, LEAKY};
use crate::yuv::Frame444;
use crate::{Error, Result};

/// Dense luma-resolution flow `[2, H, W]`, channel 0 horizontal, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(Tensor<T>);

impl<T: Scalar> FlowField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::Shape(format!("flow must be [2, H, W], got {s:?}")));
        }
        if t.data().iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::Shape("flow has non-finite values".into()));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField(Tensor::zeros(&[2, height, width]))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.max_abs().as_f64()
    }
}

/// Half-resolution flow in chroma pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaFlow<T>(pub Tensor<T>);

/// Bilinear 2x downsample, displacements halved.
pub fn derive_chroma_flow<T: Scalar>(f: &FlowField<T>) -> Result<ChromaFlow<T>> {
    if f.width() % 2 != 0 || f.height() % 2 != 0 {
        return Err(Error::OddDimensions {
            width: f.width(),
            height: f.height(),
        });
    }
    let half = T::lit(0.5);
    Ok(ChromaFlow(anfvc_nn::kernels::downsample2(&f.0).map(|v| v * half)))
}

/// Tape version of [`derive_chroma_flow`].
pub fn chroma_flow_var<T: Scalar>(tape: &mut Tape<T>, flow: Var) -> Var {
    let d = tape.downsample2(flow);
    tape.scale(d, T::lit(0.5))
}

/// Backward bilinear warp with border replication; `flow` matches the planes.
pub fn warp<T: Scalar>(planes: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (ps, fs) = (planes.shape(), flow.shape());
    if ps.len() != 3 || fs.len() != 3 || fs[0] != 2 || ps[1..] != fs[1..] {
        return Err(Error::Shape(format!("cannot warp {ps:?} with flow {fs:?}")));
    }
    Ok(anfvc_nn::kernels::warp(planes, flow))
}

/// Warps a packed `[6, h, w]` frame with luma flow `[2, 2h, 2w]`: Y at full
/// resolution, then space-to-depth; U and V with the derived chroma flow.
pub fn warp_packed<T: Scalar>(tape: &mut Tape<T>, packed: Var, flow: Var) -> Var {
    let y4 = tape.slice(packed, 0, 4);
    let y = tape.depth_to_space(y4);
    let yw = tape.warp(y, flow);
    let yw4 = tape.space_to_depth(yw);
    let uv = tape.slice(packed, 4, 6);
    let cf = chroma_flow_var(tape, flow);
    let uvw = tape.warp(uv, cf);
    tape.concat(&[yw4, uvw])
}

// ---------------------------------------------------------------- flow files

/// Reads a flow file: `u32 W, u32 H`, then the horizontal and vertical planes
/// as little-endian `f32`, row-major.
pub fn read_flow_file<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    parse_flow(&std::fs::read(path)?)
}

pub fn parse_flow<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            frame: 0,
            needed: 8,
            available: bytes.len(),
        });
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let needed = 8 + 2 * w * h * 4;
    if bytes.len() != needed {
        return Err(Error::Truncated {
            frame: 0,
            needed,
            available: bytes.len(),
        });
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    FlowField::new(Tensor::from_vec(&[2, h, w], data))
}

pub fn flow_to_bytes<T: Scalar>(f: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + f.0.numel() * 4);
    out.extend_from_slice(&(f.width() as u32).to_le_bytes());
    out.extend_from_slice(&(f.height() as u32).to_le_bytes());
    for v in f.0.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn write_flow_file<T: Scalar>(path: impl AsRef<Path>, f: &FlowField<T>) -> Result<()> {
    std::fs::write(path, flow_to_bytes(f))?;
    Ok(())
}

// ---------------------------------------------------------------- flow net

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    /// Feature widths at 1/2, 1/4 and 1/8 resolution.
    pub widths: [usize; 3],
    /// Hidden width of each flow estimator.
    pub estimator: usize,
}

impl FlowNetConfig {
    pub fn preset() -> Self {
        FlowNetConfig {
            widths: [32, 64, 96],
            estimator: 128,
        }
    }

    pub fn desk() -> Self {
        FlowNetConfig {
            widths: [8, 12, 16],
            estimator: 16,
        }
    }
}

const CORR_RADIUS: [usize; 3] = [2, 2, 3];

/// Three-level pyramid flow estimator with cost volumes and coarse-to-fine
/// residual refinement. Estimators start at zero output, so an untrained
/// net predicts zero flow.
#[derive(Clone, Debug)]
pub struct FlowNet {
    cfg: FlowNetConfig,
    feats: Vec<[ModConv; 2]>,
    est: Vec<[ModConv; 2]>,
}

impl FlowNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: FlowNetConfig, rng: &mut impl Rng) -> Self {
        let mut feats = Vec::new();
        let mut est = Vec::new();
        let mut cin = 3;
        for (l, &w) in cfg.widths.iter().enumerate() {
            feats.push([
                ModConv::conv(store, &format!("{name}.feat{l}a"), cin, w, 3, 2, rng),
                ModConv::conv(store, &format!("{name}.feat{l}b"), w, w, 3, 1, rng),
            ]);
            cin = w;
            let r = CORR_RADIUS[l];
            let corr = (2 * r + 1) * (2 * r + 1);
            let up = if l + 1 < cfg.widths.len() { 2 } else { 0 };
            let e0 = ModConv::conv(store, &format!("{name}.est{l}a"), corr + w + up, cfg.estimator, 3, 1, rng);
            let e1 = ModConv::conv(store, &format!("{name}.est{l}b"), cfg.estimator, 2, 3, 1, rng);
            e1.zero_init(store);
            est.push([e0, e1]);
        }
        FlowNet { cfg, feats, est }
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.cfg
    }

    /// Input side must be a multiple of 8.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cur: Var, reference: Var) -> Var {
        let slope = T::lit(LEAKY);
        let pyr = |x: Var, tape: &mut Tape<T>| {
            let mut out = Vec::with_capacity(3);
            let mut h = x;
            for [a, b] in &self.feats {
                let y = a.forward(tape, store, h, None);
                let y = tape.leaky_relu(y, slope);
                let y = b.forward(tape, store, y, None);
                h = tape.leaky_relu(y, slope);
                out.push(h);
            }
            out
        };
        let half = T::lit(-0.5);
        let (cur, reference) = (tape.add_const(cur, half), tape.add_const(reference, half));
        let fc = pyr(cur, tape);
        let fr = pyr(reference, tape);
        let mut flow: Option<Var> = None;
        for l in (0..3).rev() {
            let (warped, up) = match flow {
                Some(f) => {
                    let u = tape.upsample2(f);
                    let u = tape.scale(u, T::lit(2.0));
                    (tape.warp(fr[l], u), Some(u))
                }
                None => (fr[l], None),
            };
            let corr = tape.correlation(fc[l], warped, CORR_RADIUS[l]);
            let mut parts = vec![corr, fc[l]];
            parts.extend(up);
            let inp = tape.concat(&parts);
            let [a, b] = &self.est[l];
            let h = a.forward(tape, store, inp, None);
            let h = tape.leaky_relu(h, slope);
            let d = b.forward(tape, store, h, None);
            flow = Some(match up {
                Some(u) => tape.add(u, d),
                None => d,
            });
        }
        let f = tape.upsample2(flow.expect("three levels"));
        tape.scale(f, T::lit(2.0))
    }
}

/// Pluggable flow estimator.
#[derive(Clone, Debug)]
pub enum FlowSource<T> {
    /// The model's own pyramid network.
    Learned,
    Zero,
    /// Precomputed flows, one per inter frame in coding order.
    External(Vec<FlowField<T>>),
}

/// Estimates flow between two 4:4:4 frames with the given network.
pub fn estimate_flow<T: Scalar>(
    net: &FlowNet,
    store: &ParamStore<T>,
    cur: &Frame444<T>,
    reference: &Frame444<T>,
) -> Result<FlowField<T>> {
    let (cs, rs) = (cur.tensor().shape(), reference.tensor().shape());
    if cs != rs {
        return Err(Error::Shape(format!("flow inputs differ: {cs:?} vs {rs:?}")));
    }
    if cs[1] % 8 != 0 || cs[2] % 8 != 0 {
        return Err(Error::Shape(format!("flow input sides must be multiples of 8, got {cs:?}")));
    }
    let mut tape = Tape::inference();
    let c = tape.constant(cur.tensor().clone());
    let r = tape.constant(reference.tensor().clone());
    let f = net.forward(&mut tape, store, c, r);
    FlowField::new(tape.value(f).clone())
}

// ---------------------------------------------------------------- motion coder

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionCoderConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
}

impl MotionCoderConfig {
    pub fn preset() -> Self {
        MotionCoderConfig {
            n: 128,
            m: 128,
            k: 128,
            l: 128,
        }
    }
}

/// Spatial factor between the luma-resolution flow and its latent.
pub const MOTION_LATENT_STRIDE: usize = 16;

pub struct MotionCoded<T> {
    pub flow_hat: Var,
    pub bits_z: Var,
    pub bits_h: Var,
    pub bits: Var,
    pub z_sym: Option<Tensor<T>>,
    pub h_sym: Option<Tensor<T>>,
    pub scale: Var,
}

/// Mean-scale hyperprior autoencoder for flow fields.
#[derive(Clone, Debug)]
pub struct MotionCoder {
    cfg: MotionCoderConfig,
    enc: Analysis,
    dec: Synthesis,
    pub hyper: HyperPrior,
}

impl MotionCoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: MotionCoderConfig, rng: &mut impl Rng) -> Self {
        MotionCoder {
            cfg,
            enc: Analysis::new(store, &format!("{name}.enc"), 2, cfg.n, cfg.k, 4, &[], Act::Gdn, rng),
            dec: Synthesis::new(store, &format!("{name}.dec"), cfg.k, cfg.n, 2, 4, Act::Gdn, rng),
            hyper: HyperPrior::new(store, &format!("{name}.hyper"), cfg.k, cfg.m, cfg.l, rng),
        }
    }

    pub fn config(&self) -> &MotionCoderConfig {
        &self.cfg
    }

    pub fn layer_specs(&self) -> Vec<(String, usize)> {
        let mut v = self.enc.specs();
        v.extend(self.dec.specs());
        v.extend(self.hyper.specs());
        v
    }

    pub fn latent_shapes(&self, height: usize, width: usize) -> ([usize; 3], [usize; 3]) {
        let (zh, zw) = (height / MOTION_LATENT_STRIDE, width / MOTION_LATENT_STRIDE);
        ([self.cfg.k, zh, zw], [self.cfg.l, zh / 4, zw / 4])
    }

    /// Flow sides must be multiples of 64.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        flow: Var,
        q: &mut Quant<'_>,
        mods: Option<&Mods>,
    ) -> Result<MotionCoded<T>> {
        let s = tape.shape(flow);
        let m = MOTION_LATENT_STRIDE * 4;
        if s.len() != 3 || s[0] != 2 || s[1] % m != 0 || s[2] % m != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("motion coder needs [2, H, W] with sides multiple of {m}, got {s:?}")));
        }
        let y = self.enc.forward(tape, store, flow, &[], mods);
        let h = self.hyper.forward(tape, store, y, q, mods);
        let flow_hat = self.dec.forward(tape, store, h.z_q, mods);
        let bits = tape.add(h.bits_z, h.bits_h);
        Ok(MotionCoded {
            flow_hat,
            bits_z: h.bits_z,
            bits_h: h.bits_h,
            bits,
            z_sym: h.z_sym,
            h_sym: h.h_sym,
            scale: h.scale,
        })
    }

    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_sym: Tensor<T>,
        z_sym: Tensor<T>,
        mods: Option<&Mods>,
    ) -> Var {
        let z_q = self.hyper.dequantize(tape, store, h_sym, z_sym, mods);
        self.dec.forward(tape, store, z_q, mods)
    }
}

// ---------------------------------------------------------------- MC-Net

/// Input channels: warped frame, reference frame, chroma-resolution flow.
pub const MCNET_INPUTS: usize = 6 + 6 + 2;

/// Two-scale residual U-Net refining the warped prediction on the packed grid.
#[derive(Clone, Debug)]
pub struct McNet {
    width: usize,
    e0: ModConv,
    e1: ModConv,
    d0: ModConv,
    d1: ModConv,
    u0: ModConv,
    out: ModConv,
}

impl McNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let c = width;
        let out = ModConv::conv(store, &format!("{name}.out"), c, 6, 3, 1, rng);
        out.zero_init(store);
        McNet {
            width,
            e0: ModConv::conv(store, &format!("{name}.e0"), MCNET_INPUTS, c, 3, 1, rng),
            e1: ModConv::conv(store, &format!("{name}.e1"), c, c, 3, 1, rng),
            d0: ModConv::conv(store, &format!("{name}.d0"), c, 2 * c, 3, 2, rng),
            d1: ModConv::conv(store, &format!("{name}.d1"), 2 * c, 2 * c, 3, 1, rng),
            u0: ModConv::conv(store, &format!("{name}.u0"), 3 * c, c, 3, 1, rng),
            out,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer_specs(&self) -> Vec<(String, usize)> {
        [&self.e0, &self.e1, &self.d0, &self.d1, &self.u0, &self.out].iter().map(|c| c.spec()).collect()
    }

    /// `clamp(warped + net(warped, reference, chroma_flow), 0, 1)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        warped: Var,
        reference: Var,
        chroma_flow: Var,
        mods: Option<&Mods>,
    ) -> Var {
        let slope = T::lit(LEAKY);
        let act = |c: &ModConv, x: Var, tape: &mut Tape<T>| {
            let y = c.forward(tape, store, x, mods);
            tape.leaky_relu(y, slope)
        };
        let inp = tape.concat(&[warped, reference, chroma_flow]);
        let a = act(&self.e0, inp, tape);
        let a = act(&self.e1, a, tape);
        let b = act(&self.d0, a, tape);
        let b = act(&self.d1, b, tape);
        let u = tape.upsample2(b);
        let cat = tape.concat(&[u, a]);
        let h = act(&self.u0, cat, tape);
        let r = self.out.forward(tape, store, h, mods);
        let s = tape.add(warped, r);
        tape.clamp(s, T::zero(), T::one())
    }
}

/// Full compensation path from a decoded luma flow: warp, then refine.
/// Returns `(prediction, warped-only)`.
pub fn motion_compensate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mc: &McNet,
    reference: Var,
    flow_hat: Var,
    mods: Option<&Mods>,
) -> (Var, Var) {
    let warped = warp_packed(tape, reference, flow_hat);
    let cf = chroma_flow_var(tape, flow_hat);
    (mc.forward(tape, store, warped, reference, cf, mods), warped)
}

/// Mean endpoint error between two flows.
pub fn endpoint_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let hw = a.numel() / 2;
    let (ad, bd) = (a.data(), b.data());
    (0..hw)
        .map(|i| {
            let dx = (ad[i] - bd[i]).as_f64();
            let dy = (ad[hw + i] - bd[hw + i]).as_f64();
            (dx * dx + dy * dy).sqrt()
        })
        .sum::<f64>()
        / hw as f64
}

/// Tape version of squared endpoint error, averaged over pixels.
pub fn epe_loss<T: Scalar>(tape: &mut Tape<T>, flow: Var, target: Var) -> Var {
    let d = tape.mse(flow, target);
    tape.scale(d, T::lit(2.0))
}

/// Median of one flow channel.
pub fn median_component<T: Scalar>(f: &FlowField<T>, channel: usize) -> f64 {
    let hw = f.width() * f.height();
    let mut v: Vec<f64> = f.0.data()[channel * hw..(channel + 1) * hw].iter().map(|x| x.as_f64()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        0.0
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anfvc_nn::{Tape64, Tensor64};
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor64::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn chroma_flow_units() {
        let f = FlowField::new(Tensor64::from_fn(&[2, 8, 8], |i| if i < 64 { 4.0 } else { -2.0 })).unwrap();
        let c = derive_chroma_flow(&f).unwrap();
        assert_eq!(c.0.shape(), &[2, 4, 4]);
        assert!(c.0.data()[..16].iter().all(|&v| v == 2.0));
        assert!(c.0.data()[16..].iter().all(|&v| v == -1.0));
        let z = derive_chroma_flow(&FlowField::<f64>::zeros(8, 6)).unwrap();
        assert!(z.0.data().iter().all(|&v| v == 0.0));
        assert!(derive_chroma_flow(&FlowField::<f64>::zeros(7, 6)).is_err());
    }

    #[test]
    fn chroma_flow_ramp_matches_bilinear_oracle() {
        // f_x(x, y) = 0.5x + 0.25y on the luma grid; the 2x2 average at
        // chroma (c, r) samples luma (2c + 0.5, 2r + 0.5), then halves
        let (w, h) = (12usize, 10usize);
        let f = FlowField::new(Tensor64::from_fn(&[2, h, w], |i| {
            let p = i % (h * w);
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            if i < h * w {
                0.5 * x + 0.25 * y
            } else {
                -x + 3.0
            }
        }))
        .unwrap();
        let c = derive_chroma_flow(&f).unwrap();
        let (cw, ch) = (w / 2, h / 2);
        for r in 0..ch {
            for col in 0..cw {
                let (x, y) = (2.0 * col as f64 + 0.5, 2.0 * r as f64 + 0.5);
                let i = r * cw + col;
                assert!((c.0.data()[i] - 0.5 * (0.5 * x + 0.25 * y)).abs() < 1e-6);
                assert!((c.0.data()[ch * cw + i] - 0.5 * (-x + 3.0)).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn chroma_flow_commutes_with_scaling(seed in 0u64..1000, k in -6i32..6, neg in any::<bool>()) {
            // powers of two keep the float average exact
            let alpha = if neg { -1.0 } else { 1.0 } * 2f64.powi(k);
            let t = random(&[2, 8, 12], seed);
            let a = derive_chroma_flow(&FlowField::new(t.map(|v| v * alpha)).unwrap()).unwrap();
            let b = derive_chroma_flow(&FlowField::new(t).unwrap()).unwrap();
            prop_assert_eq!(a.0, b.0.map(|v| v * alpha));
        }

        #[test]
        fn warp_with_zero_flow_is_identity(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
            let p = random(&[3, h, w], seed);
            prop_assert_eq!(warp(&p, &Tensor64::zeros(&[2, h, w])).unwrap(), p);
        }
    }

    #[test]
    fn integer_shift_is_exact_on_interior() {
        let p = random(&[1, 10, 12], 3);
        // cur(x, y) = ref(x - 2, y + 1)
        let f = Tensor64::from_fn(&[2, 10, 12], |i| if i < 120 { -2.0 } else { 1.0 });
        let o = warp(&p, &f).unwrap();
        for y in 0..9 {
            for x in 2..12 {
                assert_eq!(o.data()[y * 12 + x], p.data()[(y + 1) * 12 + x - 2]);
            }
        }
        assert!(warp(&p, &Tensor64::zeros(&[2, 10, 11])).is_err());
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let r = random(&[1, 8, 8], 5);
        let cur = random(&[1, 8, 8], 6);
        let f0 = random(&[2, 8, 8], 7).map(|v| 3.0 * v - 1.5);
        let loss = |f: &Tensor64| {
            let w = warp(&r, f).unwrap();
            w.zip_map(&cur, |a, b| (a - b) * (a - b)).sum() / 64.0
        };
        let mut t = Tape64::new();
        let rv = t.constant(r.clone());
        let fv = t.variable(f0.clone());
        let cv = t.constant(cur.clone());
        let wv = t.warp(rv, fv);
        let l = t.mse(wv, cv);
        let g = t.backward(l).get(fv).unwrap().clone();
        let eps = 1e-6;
        for i in [3usize, 17, 40, 70, 101, 127] {
            let mut fp = f0.clone();
            fp.data_mut()[i] += eps;
            let mut fm = f0.clone();
            fm.data_mut()[i] -= eps;
            let num = (loss(&fp) - loss(&fm)) / (2.0 * eps);
            let ana = g.data()[i];
            assert!((num - ana).abs() <= 1e-2 * num.abs().max(1e-6) + 1e-9, "{i}: {num} vs {ana}");
        }
    }

    #[test]
    fn packed_warp_shifts_luma_and_chroma_consistently() {
        let packed = random(&[6, 8, 8], 9);
        let mut t = Tape64::inference();
        let p = t.constant(packed.clone());
        let z = t.constant(Tensor64::zeros(&[2, 16, 16]));
        let w = warp_packed(&mut t, p, z);
        assert_eq!(t.value(w), &packed);
    }

    #[test]
    fn flow_file_roundtrip() {
        let f = FlowField::new(Tensor64::from_fn(&[2, 3, 4], |i| i as f64 * 0.25 - 1.0)).unwrap();
        let b = flow_to_bytes(&f);
        assert_eq!(&b[..8], &[4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 8 + 24 * 4);
        assert_eq!(parse_flow::<f64>(&b).unwrap(), f);
        assert!(parse_flow::<f64>(&b[..b.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_flow_file(&path, &f).unwrap();
        assert_eq!(read_flow_file::<f64>(&path).unwrap(), f);
    }

    #[test]
    fn untrained_nets_degrade_gracefully() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let net = FlowNet::new(&mut store, "flow", FlowNetConfig::desk(), &mut rng);
        let mc = McNet::new(&mut store, "mc", 8, &mut rng);
        let a = Frame444::from_tensor(random(&[3, 16, 16], 2)).unwrap();
        let f = estimate_flow(&net, &store, &a, &a).unwrap();
        assert_eq!(f.max_abs(), 0.0);
        assert!(estimate_flow(&net, &store, &a, &Frame444::from_tensor(random(&[3, 16, 8], 2)).unwrap()).is_err());

        let reference = random(&[6, 8, 8], 3);
        let warped = random(&[6, 8, 8], 4);
        let mut t = Tape64::inference();
        let w = t.constant(warped.clone());
        let r = t.constant(reference);
        let cf = t.constant(random(&[2, 8, 8], 5));
        let out = mc.forward(&mut t, &store, w, r, cf, None);
        assert_eq!(t.value(out), &warped);
        assert_eq!(t.shape(out), &[6, 8, 8]);
    }

    #[test]
    fn motion_coder_closed_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let cfg = MotionCoderConfig { n: 8, m: 8, k: 6, l: 4 };
        let mc = MotionCoder::new(&mut store, "mv", cfg, &mut rng);
        let flow = random(&[2, 64, 64], 12).map(|v| 4.0 * v - 2.0).cast::<f32>();
        let mut t = anfvc_nn::Tape32::inference();
        let f = t.constant(flow);
        let out = mc.forward(&mut t, &store, f, &mut Quant::Eval, None).unwrap();
        let enc_side = t.value(out.flow_hat).clone();
        let (zs, hs) = (out.z_sym.unwrap(), out.h_sym.unwrap());
        assert_eq!(zs.shape(), &mc.latent_shapes(64, 64).0);
        assert_eq!(hs.shape(), &mc.latent_shapes(64, 64).1);
        let mut t2 = anfvc_nn::Tape32::inference();
        let dec = mc.decode(&mut t2, &store, hs, zs, None);
        assert_eq!(t2.value(dec), &enc_side);
        let bad = t.constant(anfvc_nn::Tensor32::zeros(&[2, 32, 64]));
        assert!(mc.forward(&mut t, &store, bad, &mut Quant::Eval, None).is_err());
    }

    #[test]
    fn median_component_examples() {
        let f = FlowField::new(Tensor64::from_vec(&[2, 1, 3], vec![3.0, 1.0, 2.0, -1.0, -5.0, 0.0])).unwrap();
        assert_eq!(median_component(&f, 0), 2.0);
        assert_eq!(median_component(&f, 1), -1.0);
        assert_eq!(endpoint_error(f.tensor(), f.tensor()), 0.0);
    }
}
