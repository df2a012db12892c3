use std::path::{Path, PathBuf};

use anfvc::codec::{decode_sequence, encode_sequence, lambdas_for_target, GopConfig, Lambdas, SequenceBitstream};
use anfvc::evalbench::{bd_rate_with, emit_report, evaluate, ingest_anchor, BdInterp, NamedCurve, Report};
use anfvc::model::InterMode;
use anfvc::motion::FlowSource;
use anfvc::rate::{group_mid, lambda_p_index, LAMBDA_P};
use anfvc::synth::{generate, ClipKind, ClipSpec};
use anfvc::training::{run_stage, Dataset, TrainConfig};
use anfvc::yuv::{load_yuv_sequence, write_yuv_sequence};
use anfvc::Model32;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anfvc", version, about = "Learned YUV 4:2:0 video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a raw I420 sequence.
    Encode(EncodeArgs),
    /// Decode a bitstream to raw I420.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training stages from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stage index or name; all stages when omitted.
        #[arg(long)]
        stage: Option<String>,
        /// Directory for the checkpoint series.
        #[arg(long, default_value = "checkpoints")]
        out_dir: PathBuf,
        /// Starting checkpoint; defaults to the previous stage's output.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Rate-distortion curve over the four inter lambdas.
    Bench {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 12)]
        gop: usize,
        #[arg(long, value_enum, default_value_t = Mode::Conditional)]
        mode: Mode,
        /// Anchor CSV to compute BD-rate against.
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate of one CSV curve against another.
    Bdrate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, value_enum, default_value_t = Interp::Pchip)]
        interp: Interp,
    },
    /// Write a synthetic clip.
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Translation per frame in luma pixels.
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        dx: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        dy: f64,
        /// Rotation per frame.
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        degrees: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 12)]
    gop: usize,
    #[arg(long, default_value_t = 4096.0)]
    lambda_p: f64,
    #[arg(long, conflicts_with = "target_bpp")]
    lambda_i: Option<f64>,
    /// Search lambda_i (and lambda_p) for this whole-file bpp.
    #[arg(long)]
    target_bpp: Option<f64>,
    #[arg(long, value_enum, default_value_t = Mode::Conditional)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Flow::Learned)]
    flow: Flow,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conditional,
    Residual,
}

impl From<Mode> for InterMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Conditional => InterMode::Conditional,
            Mode::Residual => InterMode::Residual,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Flow {
    Learned,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Pchip,
    Cubic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Static,
    Translate,
    Rotate,
    Noise,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    Ok((w, h))
}

fn load_model(path: &Path) -> Result<Model32> {
    Model32::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (w, h) = a.size;
    let frames = load_yuv_sequence(&a.input, w, h, a.frames)?;
    let gop = GopConfig::new(a.gop, a.mode.into())?;
    let flow = match a.flow {
        Flow::Learned => FlowSource::Learned,
        Flow::Zero => FlowSource::Zero,
    };
    let lambdas = match a.target_bpp {
        Some(t) => {
            let rc = lambdas_for_target(&model, &frames, gop, &flow, t, 0.05)?;
            for w in &rc.warnings {
                log::warn!("{w}");
            }
            eprintln!(
                "target {t} bpp: lambda_p {} lambda_i {:.5} ({} bisection steps)",
                LAMBDA_P[rc.lambdas.lambda_p_index], rc.lambdas.lambda_i, rc.search.steps
            );
            rc.lambdas
        }
        None => {
            let p = lambda_p_index(a.lambda_p)?;
            Lambdas {
                lambda_i: a.lambda_i.unwrap_or_else(|| group_mid(p)),
                lambda_p_index: p,
            }
        }
    };
    let enc = encode_sequence(&model, &frames, gop, lambdas, &flow)?;
    let bytes = enc.bitstream.to_bytes();
    std::fs::write(&a.out, &bytes)?;
    println!("{} frames, {} bytes, {:.5} bpp", frames.len(), bytes.len(), enc.bpp());
    Ok(())
}

fn decode(input: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let stream = SequenceBitstream::parse(&std::fs::read(input)?)?;
    let frames = decode_sequence(&stream, &model)?;
    write_yuv_sequence(out, &frames)?;
    println!("{} frames {}x{}", frames.len(), stream.header.width, stream.header.height);
    Ok(())
}

fn stage_path(dir: &Path, i: usize, name: &str) -> PathBuf {
    dir.join(format!("{i:02}_{name}.ckpt"))
}

fn train(config: &Path, stage: Option<&str>, out_dir: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::from_toml(&std::fs::read_to_string(config)?)?;
    let selected: Vec<usize> = match stage {
        None => (0..cfg.stages.len()).collect(),
        Some(k) => match k.parse::<usize>() {
            Ok(i) if i < cfg.stages.len() => vec![i],
            Ok(i) => bail!("stage index {i} out of range (config has {})", cfg.stages.len()),
            Err(_) => vec![cfg.stages.iter().position(|s| s.name == k).with_context(|| format!("no stage named {k}"))?],
        },
    };
    std::fs::create_dir_all(out_dir)?;
    let first = selected[0];
    let mut model = match (init, first) {
        (Some(p), _) => load_model(p)?,
        (None, 0) => Model32::new(cfg.model_config())?,
        (None, i) => load_model(&stage_path(out_dir, i - 1, &cfg.stages[i - 1].name))?,
    };
    let data = Dataset::<f32>::synthetic(cfg.clips, cfg.crop, cfg.seed)?;
    for i in selected {
        let s = &cfg.stages[i];
        let r = run_stage(&mut model, s, &data, cfg.batch, cfg.seed.wrapping_add(1 + i as u64))?;
        println!(
            "stage {i} {}: {} steps, probe loss {:.4} -> {:.4}, smoothed {:.4} -> {:.4}, {:.0}s",
            r.name, r.steps, r.probe_start, r.probe_end, r.start_loss, r.end_loss, r.seconds
        );
        let path = stage_path(out_dir, i, &s.name);
        model.save(&path, serde_json::json!({ "stage": i, "spec": s, "report": r }))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    input: &Path,
    size: (usize, usize),
    n: usize,
    checkpoint: &Path,
    gop: usize,
    mode: Mode,
    anchor: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let frames = load_yuv_sequence(input, size.0, size.1, n)?;
    let grid: Vec<Lambdas> = (0..LAMBDA_P.len())
        .map(|p| Lambdas {
            lambda_i: group_mid(p),
            lambda_p_index: p,
        })
        .collect();
    let curve = evaluate(&model, &frames, &grid, GopConfig::new(gop, mode.into())?, &FlowSource::Learned)?;
    std::fs::create_dir_all(out)?;
    curve.write_csv(out.join("curve.csv"))?;
    let mut curves = vec![NamedCurve {
        name: "anfvc".into(),
        curve,
    }];
    let report = match anchor {
        Some(a) => {
            curves.push(NamedCurve {
                name: "anchor".into(),
                curve: ingest_anchor(a)?,
            });
            Report::against(curves, "anchor")?
        }
        None => Report {
            curves,
            bd_rates: vec![],
        },
    };
    emit_report(&report, out)?;
    for p in report.curves[0].curve.points() {
        println!("{}: {:.5} bpp {:.3} dB", p.label, p.bpp, p.psnr);
    }
    for b in &report.bd_rates {
        println!("BD-rate vs {}: {:.2}%", b.anchor, b.bd_rate_percent);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Encode(a) => encode(a),
        Cmd::Decode { input, checkpoint, out } => decode(&input, &checkpoint, &out),
        Cmd::Train {
            config,
            stage,
            out_dir,
            init,
        } => train(&config, stage.as_deref(), &out_dir, init.as_deref()),
        Cmd::Bench {
            input,
            size,
            frames,
            checkpoint,
            gop,
            mode,
            anchor,
            out,
        } => bench(&input, size, frames, &checkpoint, gop, mode, anchor.as_deref(), &out),
        Cmd::Bdrate { test, anchor, interp } => {
            let interp = match interp {
                Interp::Pchip => BdInterp::Pchip,
                Interp::Cubic => BdInterp::Cubic,
            };
            let bd = bd_rate_with(&ingest_anchor(&test)?, &ingest_anchor(&anchor)?, interp)?;
            println!("{bd:.4}");
            Ok(())
        }
        Cmd::Synth {
            kind,
            size,
            frames,
            seed,
            dx,
            dy,
            degrees,
            out,
        } => {
            let kind = match kind {
                Kind::Static => ClipKind::Static,
                Kind::Translate => ClipKind::Translate { dx, dy },
                Kind::Rotate => ClipKind::Rotate { degrees },
                Kind::Noise => ClipKind::Noise,
            };
            let spec = ClipSpec {
                kind,
                width: size.0,
                height: size.1,
                frames,
                seed,
            };
            write_yuv_sequence(&out, &generate(&spec)?)?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
    }
}
