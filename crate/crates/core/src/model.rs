//! The complete video model: intra coder, motion path, inter coders and
//! their rate-adaption nets, plus checkpoint I/O.

use std::path::Path;

use anfvc_nn::{archive, ParamStore, Scalar, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anf::{AnfCoder, AnfConfig};
use crate::motion::{FlowNet, FlowNetConfig, McNet, MotionCoder, MotionCoderConfig};
use crate::nets::Mods;
use crate::rate::{LambdaCondition, RateNet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub intra: AnfConfig,
    pub inter: AnfConfig,
    /// Single-step, unconditional coder for `x - x_tilde`.
    pub residual: AnfConfig,
    pub flow: FlowNetConfig,
    pub motion: MotionCoderConfig,
    pub mc_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size channel counts.
    pub fn full() -> Self {
        let inter = AnfConfig::inter_preset();
        ModelConfig {
            intra: AnfConfig::intra_preset(),
            residual: matched_residual(&inter),
            inter,
            flow: FlowNetConfig::preset(),
            motion: MotionCoderConfig::preset(),
            mc_width: 64,
            seed: 0,
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        let inter = AnfConfig {
            n_steps: 2,
            n: 32,
            m: 32,
            k: 24,
            l: 16,
            conditional: true,
            input_channels: 6,
            cond_channels: 16,
        };
        ModelConfig {
            intra: AnfConfig {
                n_steps: 2,
                n: 32,
                m: 32,
                k: 32,
                l: 16,
                conditional: false,
                input_channels: 6,
                cond_channels: 0,
            },
            residual: matched_residual(&inter),
            inter,
            flow: FlowNetConfig::desk(),
            motion: MotionCoderConfig { n: 16, m: 16, k: 16, l: 8 },
            mc_width: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intra.validate()?;
        self.inter.validate()?;
        self.residual.validate()?;
        if self.intra.conditional || !self.inter.conditional || self.residual.conditional {
            return Err(Error::Config("intra and residual coders are unconditional, the inter coder is conditional".into()));
        }
        if self.residual.n_steps != 1 {
            return Err(Error::Config("the residual coder is a single-step autoencoder".into()));
        }
        if self.mc_width == 0 {
            return Err(Error::Config("mc_width must be positive".into()));
        }
        Ok(())
    }
}

fn coder_params(cfg: AnfConfig) -> usize {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    AnfCoder::new(&mut store, "x", cfg, &mut rng).expect("valid config");
    store.num_elements(|_| true)
}

/// Residual coder whose transform width is chosen so its parameter count is
/// as close as possible to the conditional coder's.
pub fn matched_residual(inter: &AnfConfig) -> AnfConfig {
    let target = coder_params(*inter) as i64;
    let base = AnfConfig {
        n_steps: 1,
        conditional: false,
        cond_channels: 0,
        ..*inter
    };
    // parameter count grows with n, so bisect on multiples of 4
    let count = |q: usize| coder_params(AnfConfig { n: 4 * q, ..base }) as i64;
    let (mut lo, mut hi) = (1usize, inter.n);
    while count(hi) < target {
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = if (count(lo) - target).abs() <= (count(hi) - target).abs() { lo } else { hi };
    AnfConfig { n: 4 * q, ..base }
}

/// Named parameter subsets used to freeze and unfreeze parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Intra,
    Inter,
    Residual,
    Flow,
    MotionCoder,
    McNet,
    RateIntra,
    RateInter,
    RateMotion,
    RateResidual,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Intra,
        ParamGroup::Inter,
        ParamGroup::Residual,
        ParamGroup::Flow,
        ParamGroup::MotionCoder,
        ParamGroup::McNet,
        ParamGroup::RateIntra,
        ParamGroup::RateInter,
        ParamGroup::RateMotion,
        ParamGroup::RateResidual,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Intra => "intra.",
            ParamGroup::Inter => "inter.",
            ParamGroup::Residual => "residual.",
            ParamGroup::Flow => "flow.",
            ParamGroup::MotionCoder => "motion.",
            ParamGroup::McNet => "mc.",
            ParamGroup::RateIntra => "rate_intra.",
            ParamGroup::RateInter => "rate_inter.",
            ParamGroup::RateMotion => "rate_motion.",
            ParamGroup::RateResidual => "rate_residual.",
        }
    }

    pub fn contains(self, name: &str) -> bool {
        name.starts_with(self.prefix())
    }
}

/// Inter-frame coding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterMode {
    Conditional,
    Residual,
}

/// Rate-adaption modulations for one P-frame.
pub struct InterMods {
    pub motion: Mods,
    pub coder: Mods,
}

pub struct VideoModel<T: Scalar> {
    cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub intra: AnfCoder,
    pub inter: AnfCoder,
    pub residual: AnfCoder,
    pub flow: FlowNet,
    pub motion: MotionCoder,
    pub mc: McNet,
    pub rate_intra: RateNet,
    pub rate_inter: RateNet,
    pub rate_motion: RateNet,
    pub rate_residual: RateNet,
}

impl<T: Scalar> VideoModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let intra = AnfCoder::new(&mut store, "intra", cfg.intra, &mut rng)?;
        let inter = AnfCoder::new(&mut store, "inter", cfg.inter, &mut rng)?;
        let residual = AnfCoder::new(&mut store, "residual", cfg.residual, &mut rng)?;
        let flow = FlowNet::new(&mut store, "flow", cfg.flow, &mut rng);
        let motion = MotionCoder::new(&mut store, "motion", cfg.motion, &mut rng);
        let mc = McNet::new(&mut store, "mc", cfg.mc_width, &mut rng);
        let rate_intra = RateNet::new(&mut store, "rate_intra", 1, &intra.layer_specs(), &mut rng);
        let rate_inter = RateNet::new(&mut store, "rate_inter", 4, &inter.layer_specs(), &mut rng);
        let mut motion_layers = motion.layer_specs();
        motion_layers.extend(mc.layer_specs());
        let rate_motion = RateNet::new(&mut store, "rate_motion", 4, &motion_layers, &mut rng);
        let rate_residual = RateNet::new(&mut store, "rate_residual", 4, &residual.layer_specs(), &mut rng);
        Ok(VideoModel {
            cfg,
            store,
            intra,
            inter,
            residual,
            flow,
            motion,
            mc,
            rate_intra,
            rate_inter,
            rate_motion,
            rate_residual,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn group_params(&self, g: ParamGroup) -> usize {
        self.store.num_elements(|n| g.contains(n))
    }

    pub fn intra_mods(&self, tape: &mut Tape<T>, lambda_i: f64) -> Result<Mods> {
        self.rate_intra.forward(tape, &self.store, &LambdaCondition::intra(lambda_i)?)
    }

    pub fn inter_mods(&self, tape: &mut Tape<T>, lambda_p_index: usize, mode: InterMode) -> Result<InterMods> {
        let c = LambdaCondition::inter(lambda_p_index)?;
        let coder = match mode {
            InterMode::Conditional => &self.rate_inter,
            InterMode::Residual => &self.rate_residual,
        };
        Ok(InterMods {
            motion: self.rate_motion.forward(tape, &self.store, &c)?,
            coder: coder.forward(tape, &self.store, &c)?,
        })
    }

    pub fn inter_coder(&self, mode: InterMode) -> &AnfCoder {
        match mode {
            InterMode::Conditional => &self.inter,
            InterMode::Residual => &self.residual,
        }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.cfg })
    }

    /// Identity of the weights and architecture, independent of training logs.
    pub fn model_hash(&self) -> [u8; 32] {
        Sha256::digest(archive::write(&self.store, &self.meta())).into()
    }

    pub fn to_bytes(&self, extra: serde_json::Value) -> Vec<u8> {
        let mut meta = self.meta();
        meta["extra"] = extra;
        archive::write(&self.store, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let a = archive::read::<T>(bytes)?;
        let cfg: ModelConfig = serde_json::from_value(a.meta["config"].clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut m = VideoModel::new(cfg)?;
        archive::load_into(&mut m.store, &a)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(extra))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex form of a model hash.
pub fn hash_hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

pub type Model32 = VideoModel<f32>;
pub type Model64 = VideoModel<f64>;
