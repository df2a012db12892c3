//! Frame and sequence coding.
//!
//! Every frame is coded as a list of range-coded chunks: the hyper latent
//! under the factorized prior, then the main latent under the Gaussian
//! conditional predicted from it. P-frames put the motion pair first. The
//! encoder reconstructs through the decoder's own arithmetic, so references
//! on both sides stay identical.

mod container;

use anfvc_nn::{ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::entropy::{range_decode, range_encode, BitChunk, FactorizedPrior, GaussianConditional};
use crate::model::{InterMode, VideoModel};
use crate::motion::{motion_compensate, FlowField, FlowSource};
use crate::nets::{from_symbols, to_symbols, HyperPrior, Mods, Quant};
use crate::rate::{group_bounds, search_rate, select_lambda_pair, Calibration, SearchResult, LAMBDA_P};
use crate::yuv::{crop, pad_to_multiple, packed_to_444, Frame420, PackedFrame6};
use crate::{Error, Result};

pub use container::{FrameRecord, FrameType, SequenceBitstream, SequenceHeader, MAGIC, VERSION};

/// Frames are padded so every latent grid is whole.
pub const PAD_MULTIPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GopConfig {
    pub gop_size: usize,
    pub mode: InterMode,
}

impl GopConfig {
    pub fn new(gop_size: usize, mode: InterMode) -> Result<Self> {
        if gop_size == 0 {
            return Err(Error::Config("gop size must be at least 1".into()));
        }
        Ok(GopConfig { gop_size, mode })
    }

    pub fn gop12() -> Self {
        GopConfig {
            gop_size: 12,
            mode: InterMode::Conditional,
        }
    }

    pub fn gop10() -> Self {
        GopConfig {
            gop_size: 10,
            ..Self::gop12()
        }
    }

    pub fn gop32() -> Self {
        GopConfig {
            gop_size: 32,
            ..Self::gop12()
        }
    }

    pub fn is_intra(&self, t: usize) -> bool {
        t % self.gop_size == 0
    }

    pub fn frame_type(&self, t: usize) -> FrameType {
        if self.is_intra(t) {
            FrameType::Intra
        } else {
            FrameType::Inter
        }
    }
}

/// Rate point of a sequence: intra `lambda_i`, inter index into the λ_P set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda_i: f64,
    pub lambda_p_index: usize,
}

impl Lambdas {
    pub fn lambda_p(&self) -> f64 {
        LAMBDA_P[self.lambda_p_index]
    }
}

/// Decoder-side result of coding one frame.
pub struct CodedFrame {
    pub record: FrameRecord,
    pub recon: Frame420,
}

fn hyper_prior<T: Scalar>(hyper: &HyperPrior, store: &ParamStore<T>, h_shape: &[usize]) -> Result<FactorizedPrior> {
    Ok(FactorizedPrior::new(&hyper.prior_tensors(store), h_shape[1] * h_shape[2])?)
}

fn gaussian<T: Scalar>(scale: &Tensor<T>) -> Result<GaussianConditional> {
    Ok(GaussianConditional::zero_mean(scale.data().iter().map(|v| v.as_f64()).collect())?)
}

fn code_latents<T: Scalar>(
    hyper: &HyperPrior,
    store: &ParamStore<T>,
    h_sym: &Tensor<T>,
    z_sym: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<[BitChunk; 2]> {
    let ph = hyper_prior(hyper, store, h_sym.shape())?;
    let h = range_encode(&to_symbols(h_sym), &ph)?;
    let z = range_encode(&to_symbols(z_sym), &gaussian(scale)?)?;
    Ok([h, z])
}

fn decode_latents<T: Scalar>(
    tape: &mut Tape<T>,
    hyper: &HyperPrior,
    store: &ParamStore<T>,
    chunks: &[BitChunk],
    z_shape: [usize; 3],
    h_shape: [usize; 3],
    mods: Option<&Mods>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [hc, zc] = chunks else {
        return Err(Error::Bitstream(format!("expected 2 latent chunks, got {}", chunks.len())));
    };
    let ph = hyper_prior(hyper, store, &h_shape)?;
    let hs = range_decode(hc, &ph, h_shape.iter().product())?;
    let h_sym = from_symbols::<T>(&h_shape, &hs);
    let scale = hyper.scales(tape, store, h_sym.clone(), mods);
    let zs = range_decode(zc, &gaussian(tape.value(scale))?, z_shape.iter().product())?;
    Ok((h_sym, from_symbols(&z_shape, &zs)))
}

fn check_padded(f: &Frame420) -> Result<()> {
    if f.width() % PAD_MULTIPLE != 0 || f.height() % PAD_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "frame {}x{} is not padded to a multiple of {PAD_MULTIPLE}",
            f.width(),
            f.height()
        )));
    }
    Ok(())
}

fn packed_var<T: Scalar>(tape: &mut Tape<T>, f: &Frame420) -> Var {
    tape.constant(PackedFrame6::<T>::pack(f).into_tensor())
}

fn unpack_var<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Frame420> {
    Ok(PackedFrame6::from_tensor(tape.value(v).clone())?.unpack())
}

/// Codes an intra frame (dimensions multiples of [`PAD_MULTIPLE`]).
pub fn encode_intra<T: Scalar>(model: &VideoModel<T>, x: &Frame420, lambda_i: f64) -> Result<CodedFrame> {
    check_padded(x)?;
    let mut tape = Tape::inference();
    let mods = model.intra_mods(&mut tape, lambda_i)?;
    let xv = packed_var(&mut tape, x);
    let enc = model.intra.encode(&mut tape, &model.store, xv, None, &mut Quant::Eval, Some(&mods))?;
    let (h, z) = (enc.h_sym.as_ref().unwrap(), enc.z_sym.as_ref().unwrap());
    let chunks = code_latents(&model.intra.hyper, &model.store, h, z, tape.value(enc.scale))?;
    Ok(CodedFrame {
        record: FrameRecord {
            frame_type: FrameType::Intra,
            chunks: chunks.to_vec(),
        },
        recon: unpack_var(&tape, enc.x_hat)?,
    })
}

pub fn decode_intra<T: Scalar>(
    model: &VideoModel<T>,
    record: &FrameRecord,
    width: usize,
    height: usize,
    lambda_i: f64,
) -> Result<Frame420> {
    let mut tape = Tape::inference();
    let mods = model.intra_mods(&mut tape, lambda_i)?;
    let (zs, hs) = model.intra.latent_shapes(height / 2, width / 2);
    let (h_sym, z_sym) = decode_latents(&mut tape, &model.intra.hyper, &model.store, &record.chunks, zs, hs, Some(&mods))?;
    let rec = model.intra.decode(&mut tape, &model.store, h_sym, z_sym, None, Some(&mods))?;
    unpack_var(&tape, rec)
}

/// Encoder-side flow for one P-frame.
pub fn source_flow<T: Scalar>(
    model: &VideoModel<T>,
    source: &FlowSource<T>,
    x: &Frame420,
    reference: &Frame420,
    inter_index: usize,
) -> Result<FlowField<T>> {
    match source {
        FlowSource::Zero => Ok(FlowField::zeros(x.width(), x.height())),
        FlowSource::Learned => {
            let cur = packed_to_444(&PackedFrame6::<T>::pack(x));
            let r = packed_to_444(&PackedFrame6::<T>::pack(reference));
            crate::motion::estimate_flow(&model.flow, &model.store, &cur, &r)
        }
        FlowSource::External(list) => {
            let f = list
                .get(inter_index)
                .ok_or_else(|| Error::Config(format!("no external flow for P-frame {inter_index}")))?;
            if (f.width(), f.height()) != (x.width(), x.height()) {
                return Err(Error::Shape(format!(
                    "external flow {}x{} does not match frame {}x{}",
                    f.width(),
                    f.height(),
                    x.width(),
                    x.height()
                )));
            }
            Ok(f.clone())
        }
    }
}

/// Codes a P-frame against the decoded reference.
pub fn encode_inter<T: Scalar>(
    model: &VideoModel<T>,
    x: &Frame420,
    reference: &Frame420,
    flow: &FlowField<T>,
    lambda_p_index: usize,
    mode: InterMode,
) -> Result<CodedFrame> {
    check_padded(x)?;
    if (reference.width(), reference.height()) != (x.width(), x.height()) {
        return Err(Error::Shape("reference and current frame sizes differ".into()));
    }
    let mut tape = Tape::inference();
    let mods = model.inter_mods(&mut tape, lambda_p_index, mode)?;
    let st = &model.store;
    let fv = tape.constant(flow.tensor().clone());
    let mv = model.motion.forward(&mut tape, st, fv, &mut Quant::Eval, Some(&mods.motion))?;
    let mv_chunks = code_latents(
        &model.motion.hyper,
        st,
        mv.h_sym.as_ref().unwrap(),
        mv.z_sym.as_ref().unwrap(),
        tape.value(mv.scale),
    )?;
    let rv = packed_var(&mut tape, reference);
    let (x_tilde, _) = motion_compensate(&mut tape, st, &model.mc, rv, mv.flow_hat, Some(&mods.motion));
    let xv = packed_var(&mut tape, x);
    let coder = model.inter_coder(mode);
    let (enc, x_hat) = match mode {
        InterMode::Conditional => {
            let e = coder.encode(&mut tape, st, xv, Some(x_tilde), &mut Quant::Eval, Some(&mods.coder))?;
            let xh = e.x_hat;
            (e, xh)
        }
        InterMode::Residual => {
            let r = tape.sub(xv, x_tilde);
            let e = coder.encode(&mut tape, st, r, None, &mut Quant::Eval, Some(&mods.coder))?;
            let s = tape.add(x_tilde, e.x_rec);
            let xh = tape.clamp(s, T::zero(), T::one());
            (e, xh)
        }
    };
    let c_chunks = code_latents(
        &coder.hyper,
        st,
        enc.h_sym.as_ref().unwrap(),
        enc.z_sym.as_ref().unwrap(),
        tape.value(enc.scale),
    )?;
    let mut chunks = mv_chunks.to_vec();
    chunks.extend(c_chunks);
    Ok(CodedFrame {
        record: FrameRecord {
            frame_type: FrameType::Inter,
            chunks,
        },
        recon: unpack_var(&tape, x_hat)?,
    })
}

/// Decoder side of [`encode_inter`]; needs only the record and the reference.
pub fn decode_inter<T: Scalar>(
    model: &VideoModel<T>,
    record: &FrameRecord,
    reference: &Frame420,
    lambda_p_index: usize,
    mode: InterMode,
) -> Result<Frame420> {
    if record.chunks.len() != 4 {
        return Err(Error::Bitstream(format!("P-frame needs 4 chunks, got {}", record.chunks.len())));
    }
    let (w, h) = (reference.width(), reference.height());
    let mut tape = Tape::inference();
    let mods = model.inter_mods(&mut tape, lambda_p_index, mode)?;
    let st = &model.store;
    let (mzs, mhs) = model.motion.latent_shapes(h, w);
    let (mh, mz) = decode_latents(&mut tape, &model.motion.hyper, st, &record.chunks[..2], mzs, mhs, Some(&mods.motion))?;
    let flow_hat = model.motion.decode(&mut tape, st, mh, mz, Some(&mods.motion));
    let rv = packed_var(&mut tape, reference);
    let (x_tilde, _) = motion_compensate(&mut tape, st, &model.mc, rv, flow_hat, Some(&mods.motion));
    let coder = model.inter_coder(mode);
    let (zs, hs) = coder.latent_shapes(h / 2, w / 2);
    let (ch, cz) = decode_latents(&mut tape, &coder.hyper, st, &record.chunks[2..], zs, hs, Some(&mods.coder))?;
    let x_hat = match mode {
        InterMode::Conditional => coder.decode(&mut tape, st, ch, cz, Some(x_tilde), Some(&mods.coder))?,
        InterMode::Residual => {
            let r = coder.decode_raw(&mut tape, st, ch, cz, None, Some(&mods.coder))?;
            let s = tape.add(x_tilde, r);
            tape.clamp(s, T::zero(), T::one())
        }
    };
    unpack_var(&tape, x_hat)
}

/// Encoder output: the container plus the encoder-side reconstructions.
pub struct EncodedSequence {
    pub bitstream: SequenceBitstream,
    pub recon: Vec<Frame420>,
}

impl EncodedSequence {
    /// Whole-file bits over original luma pixels.
    pub fn bpp(&self) -> f64 {
        self.bitstream.bpp()
    }
}

/// Encodes `frames` (any even size) with a low-delay GOP structure.
pub fn encode_sequence<T: Scalar>(
    model: &VideoModel<T>,
    frames: &[Frame420],
    gop: GopConfig,
    lambdas: Lambdas,
    flow: &FlowSource<T>,
) -> Result<EncodedSequence> {
    let first = frames.first().ok_or_else(|| Error::Config("empty sequence".into()))?;
    let (w, h) = (first.width(), first.height());
    crate::rate::LambdaCondition::intra(lambdas.lambda_i)?;
    crate::rate::LambdaCondition::inter(lambdas.lambda_p_index)?;
    let mut records = Vec::with_capacity(frames.len());
    let mut recon = Vec::with_capacity(frames.len());
    let mut reference: Option<Frame420> = None;
    let mut n_inter = 0;
    for (t, f) in frames.iter().enumerate() {
        if (f.width(), f.height()) != (w, h) {
            return Err(Error::Shape(format!("frame {t} size differs from frame 0")));
        }
        let x = pad_to_multiple(f, PAD_MULTIPLE);
        let coded = if gop.is_intra(t) {
            encode_intra(model, &x, lambdas.lambda_i)?
        } else {
            let r = reference.as_ref().expect("frame 0 is intra");
            let fl = source_flow(model, flow, &x, r, n_inter)?;
            n_inter += 1;
            encode_inter(model, &x, r, &fl, lambdas.lambda_p_index, gop.mode)?
        };
        recon.push(crop(&coded.recon, w, h)?);
        reference = Some(coded.recon);
        records.push(coded.record);
    }
    Ok(EncodedSequence {
        bitstream: SequenceBitstream {
            header: SequenceHeader {
                width: w as u32,
                height: h as u32,
                frames: frames.len() as u32,
                gop_size: gop.gop_size as u32,
                mode: gop.mode,
                lambda_p_index: lambdas.lambda_p_index as u8,
                lambda_i: lambdas.lambda_i,
                model_hash: model.model_hash(),
            },
            records,
        },
        recon,
    })
}

/// Decodes a container, refusing streams produced by a different model.
pub fn decode_sequence<T: Scalar>(stream: &SequenceBitstream, model: &VideoModel<T>) -> Result<Vec<Frame420>> {
    let hd = &stream.header;
    let mh = model.model_hash();
    if hd.model_hash != mh {
        return Err(Error::ModelMismatch {
            stream: crate::model::hash_hex(&hd.model_hash),
            checkpoint: crate::model::hash_hex(&mh),
        });
    }
    if stream.records.len() != hd.frames as usize {
        return Err(Error::Bitstream(format!(
            "header declares {} frames, found {}",
            hd.frames,
            stream.records.len()
        )));
    }
    let gop = GopConfig::new(hd.gop_size as usize, hd.mode)?;
    let (w, h) = (hd.width as usize, hd.height as usize);
    let pad = |v: usize| v.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let (pw, ph) = (pad(w), pad(h));
    let mut out = Vec::with_capacity(stream.records.len());
    let mut reference: Option<Frame420> = None;
    for (t, rec) in stream.records.iter().enumerate() {
        if rec.frame_type != gop.frame_type(t) {
            return Err(Error::Bitstream(format!("frame {t} has type {:?}, GOP says otherwise", rec.frame_type)));
        }
        let f = match rec.frame_type {
            FrameType::Intra => decode_intra(model, rec, pw, ph, hd.lambda_i)?,
            FrameType::Inter => {
                let r = reference.as_ref().expect("frame 0 is intra");
                decode_inter(model, rec, r, hd.lambda_p_index as usize, hd.mode)?
            }
        };
        out.push(crop(&f, w, h)?);
        reference = Some(f);
    }
    Ok(out)
}

/// Measured sequence bpp at each group's lambda_i bounds.
pub fn calibrate<T: Scalar>(
    model: &VideoModel<T>,
    frames: &[Frame420],
    gop: GopConfig,
    flow: &FlowSource<T>,
) -> Result<Calibration> {
    let mut brackets = Vec::with_capacity(LAMBDA_P.len());
    for p in 0..LAMBDA_P.len() {
        let (lo, hi) = group_bounds(p);
        let bpp = |lambda_i| -> Result<f64> {
            let l = Lambdas { lambda_i, lambda_p_index: p };
            Ok(encode_sequence(model, frames, gop, l, flow)?.bpp())
        };
        brackets.push((p, bpp(lo)?, bpp(hi)?));
    }
    Ok(Calibration { brackets })
}

#[derive(Clone, Debug)]
pub struct RateControl {
    pub lambdas: Lambdas,
    pub search: SearchResult,
    pub warnings: Vec<String>,
}

/// Chooses the inter lambda from a fresh calibration on `frames`, then
/// bisects lambda_i within its group until the sequence bpp is within `tol`
/// of `target_bpp`.
pub fn lambdas_for_target<T: Scalar>(
    model: &VideoModel<T>,
    frames: &[Frame420],
    gop: GopConfig,
    flow: &FlowSource<T>,
    target_bpp: f64,
    tol: f64,
) -> Result<RateControl> {
    let cal = calibrate(model, frames, gop, flow)?;
    let pair = select_lambda_pair(target_bpp, &cal)?;
    let p = pair.lambda_p;
    let search = search_rate(
        |lambda_i| {
            let l = Lambdas { lambda_i, lambda_p_index: p };
            Ok(encode_sequence(model, frames, gop, l, flow)?.bpp())
        },
        pair.bounds,
        target_bpp,
        tol,
    )?;
    let warnings = pair.warning.into_iter().chain(search.diagnostic.clone()).collect();
    Ok(RateControl {
        lambdas: Lambdas {
            lambda_i: search.lambda_i,
            lambda_p_index: p,
        },
        search,
        warnings,
    })
}
