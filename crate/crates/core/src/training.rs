//! Staged training on synthetic clips.
//!
//! Intra loss: `bpp + lambda_i * 255^2 * D`. Inter loss: `bpp + lambda_p * D`.
//! `D` is `(2 MSE_Y + MSE_U + MSE_V) / 4` on `[0, 1]` samples; the `255^2`
//! puts the two lambda ranges on one footing (an intra lambda of about
//! `lambda_p / 255^2` trades rate for distortion the same way).

use std::time::Instant;

use anfvc_nn::optim::{clip_global_norm, sum_grads, Adam};
use anfvc_nn::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{InterMode, ModelConfig, ParamGroup, VideoModel};
use crate::motion::{epe_loss, motion_compensate};
use crate::nets::Quant;
use crate::rate::{group_mid, LAMBDA_I_MAX, LAMBDA_I_MIN, LAMBDA_P};
use crate::synth::{generate, ground_truth_flow, mixed_specs};
use crate::yuv::{packed_to_444, PackedFrame6};
use crate::{Error, Result};

pub const INTRA_DISTORTION_SCALE: f64 = 255.0 * 255.0;
pub const EMA_STEPS: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const GRAD_CLIP: f64 = 1.0;
/// Steps averaged for the divergence baseline and the running loss it is
/// compared with.
pub const DIVERGENCE_WINDOW: usize = 10;
/// Consecutive steps the running loss must stay above the divergence bound
/// before a stage aborts; rounding flips cause short recoverable spikes.
pub const DIVERGENCE_PATIENCE: usize = 200;
/// Fixed training items whose evaluation-mode loss is compared before and
/// after each stage.
pub const PROBE_ITEMS: usize = 64;
const PROBE_SEED: u64 = 0x5eed;

pub fn sample_lambda_i(rng: &mut impl Rng) -> f64 {
    (rng.gen_range(LAMBDA_I_MIN.ln()..=LAMBDA_I_MAX.ln())).exp()
}

pub fn sample_lambda_p_index(rng: &mut impl Rng) -> usize {
    rng.gen_range(0..LAMBDA_P.len())
}

/// `(2 MSE_Y + MSE_U + MSE_V) / 4` between packed frames.
pub fn weighted_mse_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let mut parts = Vec::with_capacity(3);
    for (c0, c1, w) in [(0, 4, 0.5), (4, 5, 0.25), (5, 6, 0.25)] {
        let (sa, sb) = (tape.slice(a, c0, c1), tape.slice(b, c0, c1));
        let m = tape.mse(sa, sb);
        parts.push(tape.scale(m, T::lit(w)));
    }
    tape.add_all(&parts)
}

/// One sample's loss graph.
pub struct SampleLoss<T: Scalar> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub bpp: f64,
    pub distortion: f64,
}

impl<T: Scalar> SampleLoss<T> {
    pub fn value(&self) -> f64 {
        self.tape.item(self.loss).as_f64()
    }
}

fn quant(rng: Option<&mut ChaCha8Rng>) -> Quant<'_> {
    match rng {
        Some(r) => Quant::Train(r),
        None => Quant::Eval,
    }
}

fn luma_pixels(shape: &[usize]) -> f64 {
    (4 * shape[1] * shape[2]) as f64
}

/// Intra loss of one packed frame. `rng = None` evaluates with rounding.
pub fn intra_sample<T: Scalar>(
    model: &VideoModel<T>,
    x: &Tensor<T>,
    lambda_i: f64,
    rng: Option<&mut ChaCha8Rng>,
    variable_rate: bool,
) -> Result<SampleLoss<T>> {
    let mut tape = if rng.is_some() { Tape::new() } else { Tape::inference() };
    let mods = if variable_rate { Some(model.intra_mods(&mut tape, lambda_i)?) } else { None };
    let xv = tape.constant(x.clone());
    let mut q = quant(rng);
    let enc = model.intra.encode(&mut tape, &model.store, xv, None, &mut q, mods.as_ref())?;
    let d = weighted_mse_var(&mut tape, enc.x_hat, xv);
    let bpp = tape.scale(enc.bits, T::lit(1.0 / luma_pixels(x.shape())));
    let dl = tape.scale(d, T::lit(lambda_i * INTRA_DISTORTION_SCALE));
    let loss = tape.add(bpp, dl);
    Ok(SampleLoss {
        bpp: tape.item(bpp).as_f64(),
        distortion: tape.item(d).as_f64(),
        loss,
        tape,
    })
}

/// Mean intra loss over a batch, one lambda per element.
pub fn rd_loss_intra<T: Scalar>(
    model: &VideoModel<T>,
    batch: &[Tensor<T>],
    lambdas: &[f64],
    variable_rate: bool,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != lambdas.len() {
        return Err(Error::Training(format!("{} frames for {} lambdas", batch.len(), lambdas.len())));
    }
    let mut s = 0.0;
    for (x, &l) in batch.iter().zip(lambdas) {
        s += intra_sample(model, x, l, None, variable_rate)?.value();
    }
    Ok(s / batch.len() as f64)
}

/// A training pair: current frame, decoded reference and (if known) the
/// true flow from reference to current.
#[derive(Clone, Debug)]
pub struct InterSample<T> {
    pub cur: Tensor<T>,
    pub reference: Tensor<T>,
    pub cur444: Tensor<T>,
    pub ref444: Tensor<T>,
    pub flow_gt: Option<Tensor<T>>,
}

impl<T: Scalar> InterSample<T> {
    pub fn new(cur: PackedFrame6<T>, reference: PackedFrame6<T>, flow_gt: Option<Tensor<T>>) -> Self {
        InterSample {
            cur444: packed_to_444(&cur).into_tensor(),
            ref444: packed_to_444(&reference).into_tensor(),
            cur: cur.into_tensor(),
            reference: reference.into_tensor(),
            flow_gt,
        }
    }
}

/// What an inter loss optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterTarget {
    /// Endpoint error of the raw flow against ground truth only.
    Flow,
    /// Motion rate plus distortion of the motion-compensated frame.
    Motion,
    /// Motion rate, coder rate and distortion of the decoded frame.
    Coder(InterMode),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterOptions {
    pub target: InterTarget,
    pub variable_rate: bool,
    pub epe_weight: f64,
}

/// Inter loss of one sample.
pub fn inter_sample<T: Scalar>(
    model: &VideoModel<T>,
    s: &InterSample<T>,
    lambda_p_index: usize,
    rng: Option<&mut ChaCha8Rng>,
    opts: InterOptions,
) -> Result<SampleLoss<T>> {
    let mut tape = if rng.is_some() { Tape::new() } else { Tape::inference() };
    let st = &model.store;
    if opts.target == InterTarget::Flow {
        let gt = s.flow_gt.as_ref().ok_or_else(|| Error::Training("flow target needs ground-truth flow".into()))?;
        let c444 = tape.constant(s.cur444.clone());
        let r444 = tape.constant(s.ref444.clone());
        let flow = model.flow.forward(&mut tape, st, c444, r444);
        let g = tape.constant(gt.clone());
        let loss = epe_loss(&mut tape, flow, g);
        return Ok(SampleLoss {
            bpp: 0.0,
            distortion: tape.item(loss).as_f64(),
            loss,
            tape,
        });
    }
    let mode = match opts.target {
        InterTarget::Coder(m) => m,
        _ => InterMode::Conditional,
    };
    let mods = if opts.variable_rate {
        Some(model.inter_mods(&mut tape, lambda_p_index, mode)?)
    } else {
        None
    };
    let (mm, cm) = match &mods {
        Some(m) => (Some(&m.motion), Some(&m.coder)),
        None => (None, None),
    };
    let cur = tape.constant(s.cur.clone());
    let reference = tape.constant(s.reference.clone());
    let c444 = tape.constant(s.cur444.clone());
    let r444 = tape.constant(s.ref444.clone());
    let flow = model.flow.forward(&mut tape, st, c444, r444);
    let mut q = quant(rng);
    let mv = model.motion.forward(&mut tape, st, flow, &mut q, mm)?;
    let (x_tilde, _) = motion_compensate(&mut tape, st, &model.mc, reference, mv.flow_hat, mm);
    let (bits, x_hat) = match opts.target {
        InterTarget::Flow | InterTarget::Motion => (mv.bits, x_tilde),
        InterTarget::Coder(InterMode::Conditional) => {
            let e = model.inter.encode(&mut tape, st, cur, Some(x_tilde), &mut q, cm)?;
            (tape.add(mv.bits, e.bits), e.x_hat)
        }
        InterTarget::Coder(InterMode::Residual) => {
            let r = tape.sub(cur, x_tilde);
            let e = model.residual.encode(&mut tape, st, r, None, &mut q, cm)?;
            let sum = tape.add(x_tilde, e.x_rec);
            (tape.add(mv.bits, e.bits), tape.clamp(sum, T::zero(), T::one()))
        }
    };
    let d = weighted_mse_var(&mut tape, x_hat, cur);
    let bpp = tape.scale(bits, T::lit(1.0 / luma_pixels(s.cur.shape())));
    let dl = tape.scale(d, T::lit(LAMBDA_P[lambda_p_index]));
    let mut loss = tape.add(bpp, dl);
    if opts.epe_weight > 0.0 {
        if let Some(gt) = &s.flow_gt {
            let g = tape.constant(gt.clone());
            let e = epe_loss(&mut tape, flow, g);
            let e = tape.scale(e, T::lit(opts.epe_weight));
            loss = tape.add(loss, e);
        }
    }
    Ok(SampleLoss {
        bpp: tape.item(bpp).as_f64(),
        distortion: tape.item(d).as_f64(),
        loss,
        tape,
    })
}

/// Mean inter loss over a batch, one lambda index per element.
pub fn rd_loss_inter<T: Scalar>(
    model: &VideoModel<T>,
    batch: &[&InterSample<T>],
    lambda_p_indexes: &[usize],
    opts: InterOptions,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != lambda_p_indexes.len() {
        return Err(Error::Training(format!("{} samples for {} lambdas", batch.len(), lambda_p_indexes.len())));
    }
    let mut s = 0.0;
    for (x, &p) in batch.iter().zip(lambda_p_indexes) {
        s += inter_sample(model, x, p, None, opts)?.value();
    }
    Ok(s / batch.len() as f64)
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    IntraFixed(f64),
    IntraLogUniform,
    InterFixed(usize),
    InterUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Intra,
    /// Supervised flow pretraining on ground-truth motion.
    Flow,
    Motion,
    Inter,
}

fn default_decay_at() -> f64 {
    0.8
}

fn default_mode() -> InterMode {
    InterMode::Conditional
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub trainable: Vec<ParamGroup>,
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate after `decay_at * iterations` steps.
    pub lr_final: f64,
    #[serde(default = "default_decay_at")]
    pub decay_at: f64,
    /// Steps of linear learning-rate warmup.
    #[serde(default)]
    pub warmup: usize,
    pub lambda: LambdaSpec,
    #[serde(default)]
    pub variable_rate: bool,
    #[serde(default = "default_mode")]
    pub mode: InterMode,
    #[serde(default)]
    pub epe_weight: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if self.trainable.is_empty() {
            return bad("no trainable groups");
        }
        let intra_lambda = matches!(self.lambda, LambdaSpec::IntraFixed(_) | LambdaSpec::IntraLogUniform);
        if (self.kind == StageKind::Intra) != intra_lambda {
            return bad("lambda kind does not match stage kind");
        }
        match self.lambda {
            LambdaSpec::IntraFixed(l) if !(LAMBDA_I_MIN..=LAMBDA_I_MAX).contains(&l) => return bad("lambda_i out of range"),
            LambdaSpec::InterFixed(p) if p >= LAMBDA_P.len() => return bad("lambda_p index out of range"),
            _ => {}
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) || !(0.0..=1.0).contains(&self.decay_at) {
            return bad("learning rates must be positive and decay_at in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = if (step as f64) < self.decay_at * self.iterations as f64 {
            self.lr
        } else {
            self.lr_final
        };
        if step < self.warmup {
            base * (step + 1) as f64 / self.warmup as f64
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelPreset,
    /// Luma side of the square training crops.
    pub crop: usize,
    pub clips: usize,
    pub batch: usize,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % crate::codec::PAD_MULTIPLE != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of {}", crate::codec::PAD_MULTIPLE)));
        }
        if self.clips == 0 || self.batch == 0 {
            return Err(Error::Config("clips and batch must be positive".into()));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = match self.model {
            ModelPreset::Desk => ModelConfig::desk(),
            ModelPreset::Full => ModelConfig::full(),
        };
        c.seed = self.seed;
        c
    }

    /// The full staged schedule at desk scale; `scale` multiplies every
    /// iteration count.
    pub fn desk(scale: f64) -> Self {
        use ParamGroup::*;
        let it = |n: usize| ((n as f64 * scale).round() as usize).max(1);
        let stage = |name: &str, kind, trainable: Vec<ParamGroup>, n, lambda, lr: f64| StageSpec {
            name: name.into(),
            kind,
            trainable,
            iterations: it(n),
            lr,
            lr_final: lr / 10.0,
            decay_at: default_decay_at(),
            warmup: 100,
            lambda,
            variable_rate: false,
            mode: InterMode::Conditional,
            epe_weight: 0.0,
        };
        let mid = LambdaSpec::InterFixed(1);
        let mut stages = vec![
            stage("i1", StageKind::Intra, vec![Intra], 1500, LambdaSpec::IntraFixed(group_mid(1)), 1e-3),
            StageSpec {
                variable_rate: true,
                ..stage("i2", StageKind::Intra, vec![Intra, RateIntra], 1000, LambdaSpec::IntraLogUniform, 5e-4)
            },
            stage("p0", StageKind::Flow, vec![Flow], 2000, mid, 1e-3),
            StageSpec {
                epe_weight: 0.5,
                ..stage("p1", StageKind::Motion, vec![Flow, MotionCoder, McNet], 1500, mid, 1e-3)
            },
            stage("p2", StageKind::Inter, vec![Inter], 8000, mid, 1e-3),
            StageSpec {
                mode: InterMode::Residual,
                ..stage("p2_residual", StageKind::Inter, vec![Residual], 8000, mid, 1e-3)
            },
            stage("p3", StageKind::Inter, vec![Flow, MotionCoder, McNet, Inter], 800, mid, 3e-4),
        ];
        for (name, groups, n, lr) in [
            ("v1", vec![RateInter], 600, 1e-3),
            ("v2", vec![RateMotion], 400, 1e-3),
            ("v3", vec![MotionCoder, McNet, Inter, RateInter, RateMotion], 800, 5e-5),
        ] {
            stages.push(StageSpec {
                variable_rate: true,
                ..stage(name, StageKind::Inter, groups, n, LambdaSpec::InterUniform, lr)
            });
        }
        TrainConfig {
            seed: 0,
            model: ModelPreset::Desk,
            crop: 128,
            clips: 2048,
            batch: 1,
            stages,
        }
    }
}

// ---------------------------------------------------------------- data

/// Consecutive-frame pairs from seeded synthetic clips.
pub struct Dataset<T> {
    /// Every frame, packed.
    pub frames: Vec<PackedFrame6<T>>,
    /// `(previous frame index, current frame index, true flow)`.
    pub pairs: Vec<(usize, usize, Option<Tensor<T>>)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn synthetic(clips: usize, crop: usize, seed: u64) -> Result<Self> {
        let mut frames = Vec::new();
        let mut pairs = Vec::new();
        for spec in mixed_specs(clips, crop, crop, 2, seed) {
            let f = generate(&spec)?;
            let base = frames.len();
            frames.extend(f.iter().map(PackedFrame6::pack));
            pairs.push((base, base + 1, ground_truth_flow(&spec)));
        }
        Ok(Dataset { frames, pairs })
    }
}

impl<T: Scalar> Dataset<T> {
    /// Inter sample for `pair` whose reference is the intra reconstruction of
    /// the previous frame at the group's mid lambda.
    pub fn inter_sample(&self, model: &VideoModel<T>, pair: usize, p: usize) -> Result<InterSample<T>> {
        let (prev, cur, gt) = &self.pairs[pair];
        let f = self.frames[*prev].unpack();
        let rec = crate::codec::encode_intra(model, &f, group_mid(p))?.recon;
        Ok(InterSample::new(self.frames[*cur].clone(), PackedFrame6::pack(&rec), gt.clone()))
    }
}

// ---------------------------------------------------------------- runner

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Mean of the first `EMA_STEPS` losses.
    pub start_loss: f64,
    /// `EMA_STEPS`-step exponential moving average at the end.
    pub end_loss: f64,
    pub end_bpp: f64,
    pub end_distortion: f64,
    /// Evaluation-mode loss on the probe set before the stage.
    pub probe_start: f64,
    /// The same after the stage.
    pub probe_end: f64,
    pub seconds: f64,
    pub frozen_hash: String,
}

impl StageReport {
    pub fn decreased(&self) -> bool {
        self.steps == 0 || self.probe_end < self.probe_start
    }
}

/// Evaluation-mode stage loss over [`PROBE_ITEMS`] items drawn with a fixed
/// seed. Random lambdas are replaced by a fixed grid, so the value is
/// deterministic.
pub fn probe_loss<T: Scalar>(model: &VideoModel<T>, stage: &StageSpec, data: &Dataset<T>) -> Result<f64> {
    let opts = stage_options(stage);
    let n_items = match stage.kind {
        StageKind::Intra => data.frames.len(),
        _ => data.pairs.len(),
    };
    let n = PROBE_ITEMS.min(n_items);
    let items = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(PROBE_SEED), n_items, n);
    let mut total = 0.0;
    for (k, item) in items.iter().enumerate() {
        total += match (stage.kind, stage.lambda) {
            (StageKind::Intra, lam) => {
                let li = match lam {
                    LambdaSpec::IntraFixed(v) => v,
                    _ => (LAMBDA_I_MIN.ln() + (LAMBDA_I_MAX.ln() - LAMBDA_I_MIN.ln()) * (k as f64 + 0.5) / n as f64).exp(),
                };
                intra_sample(model, data.frames[item].tensor(), li, None, stage.variable_rate)?.value()
            }
            (_, lam) => {
                let p = match lam {
                    LambdaSpec::InterFixed(p) => p,
                    _ => k % LAMBDA_P.len(),
                };
                inter_sample(model, &data.inter_sample(model, item, p)?, p, None, opts)?.value()
            }
        };
    }
    Ok(total / n as f64)
}

fn stage_options(stage: &StageSpec) -> InterOptions {
    InterOptions {
        target: match stage.kind {
            StageKind::Flow => InterTarget::Flow,
            StageKind::Motion => InterTarget::Motion,
            _ => InterTarget::Coder(stage.mode),
        },
        variable_rate: stage.variable_rate,
        epe_weight: stage.epe_weight,
    }
}

/// SHA-256 over the names and values of the parameters `pred` selects.
pub fn hash_params<T: Scalar>(store: &ParamStore<T>, pred: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter().filter(|(n, _)| pred(n)) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    crate::model::hash_hex(&h.finalize().into())
}

fn ema(values: &[f64], steps: usize) -> f64 {
    let a = 2.0 / (steps as f64 + 1.0);
    let mut e = values[0];
    for &v in &values[1..] {
        e += a * (v - e);
    }
    e
}

/// Runs one stage in place. Parameters outside `trainable` are verified
/// bit-identical afterwards.
pub fn run_stage<T: Scalar>(
    model: &mut VideoModel<T>,
    stage: &StageSpec,
    data: &Dataset<T>,
    batch: usize,
    seed: u64,
) -> Result<StageReport> {
    stage.validate()?;
    let t0 = Instant::now();
    let in_stage = |n: &str| stage.trainable.iter().any(|g| g.contains(n));
    model.store.set_trainable(in_stage);
    let frozen_before = hash_params(&model.store, |n| !in_stage(n));
    let mut adam = Adam::new(model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(stage.iterations);
    let (mut bpps, mut dists) = (Vec::new(), Vec::new());
    let opts = stage_options(stage);
    let probe_start = probe_loss(model, stage, data)?;
    let n_items = match stage.kind {
        StageKind::Intra => data.frames.len(),
        _ => data.pairs.len(),
    };
    let mut initial: Option<f64> = None;
    let mut window = std::collections::VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut above = 0usize;
    let phase = sample_lambda_p_index(&mut rng);
    for step in 0..stage.iterations {
        let mut sets = Vec::with_capacity(batch);
        let (mut l, mut b, mut d) = (0.0, 0.0, 0.0);
        // stratified lambda_p: a random start cycled over consecutive elements,
        // so every element is uniform and any 4 in a row cover all rates
        let offset = (phase + step * batch) % LAMBDA_P.len();
        for k in 0..batch {
            let item = rng.gen_range(0..n_items);
            let mut noise = ChaCha8Rng::seed_from_u64(rng.gen());
            let s = match (stage.kind, stage.lambda) {
                (StageKind::Intra, lam) => {
                    let li = match lam {
                        LambdaSpec::IntraFixed(v) => v,
                        _ => sample_lambda_i(&mut rng),
                    };
                    intra_sample(model, data.frames[item].tensor(), li, Some(&mut noise), stage.variable_rate)?
                }
                (_, lam) => {
                    let p = match lam {
                        LambdaSpec::InterFixed(p) => p,
                        _ => (offset + k) % LAMBDA_P.len(),
                    };
                    let sample = data.inter_sample(model, item, p)?;
                    inter_sample(model, &sample, p, Some(&mut noise), opts)?
                }
            };
            let v = s.value();
            if !v.is_finite() {
                return Err(Error::Training(format!("stage {}: non-finite loss at step {step}", stage.name)));
            }
            l += v / batch as f64;
            b += s.bpp / batch as f64;
            d += s.distortion / batch as f64;
            let scaled = {
                let mut tape = s.tape;
                let loss = tape.scale(s.loss, T::lit(1.0 / batch as f64));
                let g = tape.backward(loss);
                tape.param_grads(&g).grads
            };
            sets.push(scaled);
        }
        if window.len() == DIVERGENCE_WINDOW {
            window.pop_front();
        }
        window.push_back(l);
        let running = window.iter().sum::<f64>() / window.len() as f64;
        if initial.is_none() && (window.len() == DIVERGENCE_WINDOW || step + 1 == stage.iterations) {
            initial = Some(running);
        }
        if let Some(base) = initial {
            above = if running > DIVERGENCE_FACTOR * base { above + 1 } else { 0 };
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Training(format!(
                    "stage {}: running loss {running:.4} at step {step} exceeded {DIVERGENCE_FACTOR}x the initial {base:.4} for {DIVERGENCE_PATIENCE} steps",
                    stage.name
                )));
            }
        }
        let mut grads = sum_grads(sets);
        clip_global_norm(&mut grads, GRAD_CLIP);
        adam.step(&mut model.store, &grads, stage.lr_at(step));
        losses.push(l);
        bpps.push(b);
        dists.push(d);
        if step % 100 == 0 {
            log::info!("{} step {step}: loss {l:.4} bpp {b:.4} D {d:.6}", stage.name);
        }
    }
    model.store.set_trainable(|_| true);
    let frozen_after = hash_params(&model.store, |n| !in_stage(n));
    if frozen_after != frozen_before {
        return Err(Error::Training(format!("stage {}: frozen parameters changed", stage.name)));
    }
    let k = losses.len().min(EMA_STEPS);
    let tail = |v: &[f64]| if v.is_empty() { f64::NAN } else { ema(v, EMA_STEPS) };
    Ok(StageReport {
        name: stage.name.clone(),
        steps: losses.len(),
        start_loss: if k == 0 { f64::NAN } else { losses[..k].iter().sum::<f64>() / k as f64 },
        end_loss: tail(&losses),
        end_bpp: tail(&bpps),
        end_distortion: tail(&dists),
        probe_start,
        probe_end: probe_loss(model, stage, data)?,
        losses,
        seconds: t0.elapsed().as_secs_f64(),
        frozen_hash: frozen_after,
    })
}

/// Runs every stage in order; `after_stage` sees the model after each one
/// (for checkpointing).
pub fn run_schedule<T: Scalar>(
    model: &mut VideoModel<T>,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    mut after_stage: impl FnMut(&VideoModel<T>, &StageReport) -> Result<()>,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let r = run_stage(model, stage, data, cfg.batch, cfg.seed.wrapping_add(1 + i as u64))?;
        log::info!(
            "stage {} done: probe {:.4} -> {:.4}, smoothed {:.4} -> {:.4} in {:.0}s",
            r.name,
            r.probe_start,
            r.probe_end,
            r.start_loss,
            r.end_loss,
            r.seconds
        );
        after_stage(model, &r)?;
        out.push(r);
    }
    Ok(out)
}

/// Evaluation-mode inter loss averaged over the dataset's pairs.
pub fn eval_inter_loss<T: Scalar>(
    model: &VideoModel<T>,
    data: &Dataset<T>,
    lambda_p_index: usize,
    opts: InterOptions,
) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..data.pairs.len() {
        let sample = data.inter_sample(model, i, lambda_p_index)?;
        s += inter_sample(model, &sample, lambda_p_index, None, opts)?.value();
    }
    Ok(s / data.pairs.len() as f64)
}
