//! Deterministic synthetic 4:2:0 clips with known motion.
//!
//! Each plane is a continuous band-limited texture (a sum of seeded
//! sinusoids) sampled on the pixel grid, so sub-pixel translation and
//! rotation have exact ground truth. Chroma samples sit at the centre of
//! their 2x2 luma block.

use anfvc_nn::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::yuv::Frame420;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClipKind {
    Static,
    /// Content moves by `(dx, dy)` luma pixels per frame.
    Translate { dx: f64, dy: f64 },
    /// Content rotates about the frame centre by `degrees` per frame.
    Rotate { degrees: f64 },
    /// Every frame is an independent texture.
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub kind: ClipKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
}

const WAVES: usize = 8;

#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    base: f64,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, base: f64, amplitude: f64) -> Self {
        let waves = (0..WAVES)
            .map(|_| {
                let period: f64 = rng.gen_range(6.0..32.0);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let k = 2.0 * std::f64::consts::PI / period;
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), amplitude * rng.gen_range(0.5..1.0))
            })
            .collect();
        Texture { waves, base }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.base + self.waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum::<f64>()
    }
}

struct Planes {
    y: Texture,
    u: Texture,
    v: Texture,
}

impl Planes {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Planes {
            y: Texture::new(rng, 128.0, 22.0),
            u: Texture::new(rng, 118.0, 9.0),
            v: Texture::new(rng, 138.0, 9.0),
        }
    }

    /// Samples the frame whose pixel `p` shows texture point `map(p)`.
    fn render(&self, w: usize, h: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Frame420 {
        let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        let mut y = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let (sx, sy) = map(c as f64, r as f64);
                y.push(q(self.y.at(sx, sy)));
            }
        }
        let (cw, ch) = (w / 2, h / 2);
        let mut u = Vec::with_capacity(cw * ch);
        let mut v = Vec::with_capacity(cw * ch);
        for r in 0..ch {
            for c in 0..cw {
                let (sx, sy) = map(2.0 * c as f64 + 0.5, 2.0 * r as f64 + 0.5);
                u.push(q(self.u.at(sx, sy)));
                v.push(q(self.v.at(sx, sy)));
            }
        }
        Frame420::new(w, h, y, u, v).expect("even dimensions checked by caller")
    }
}

fn rotate(x: f64, y: f64, cx: f64, cy: f64, rad: f64) -> (f64, f64) {
    let (s, c) = rad.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

fn centre(spec: &ClipSpec) -> (f64, f64) {
    ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0)
}

/// Renders every frame of `spec`.
pub fn generate(spec: &ClipSpec) -> Result<Vec<Frame420>> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0 {
        return Err(Error::OddDimensions { width: w, height: h });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planes = Planes::new(&mut rng);
    let (cx, cy) = centre(spec);
    let frames = (0..spec.frames)
        .map(|t| {
            let tf = t as f64;
            match spec.kind {
                ClipKind::Static => planes.render(w, h, |x, y| (x, y)),
                ClipKind::Translate { dx, dy } => planes.render(w, h, |x, y| (x - tf * dx, y - tf * dy)),
                ClipKind::Rotate { degrees } => {
                    let rad = -(degrees * tf).to_radians();
                    planes.render(w, h, |x, y| rotate(x, y, cx, cy, rad))
                }
                ClipKind::Noise => {
                    let mut r = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1)));
                    Planes::new(&mut r).render(w, h, |x, y| (x, y))
                }
            }
        })
        .collect();
    Ok(frames)
}

/// Luma-resolution flow `[2, H, W]` taking frame `t - 1` to frame `t` under
/// backward warping (`frame_t(p) = frame_{t-1}(p + f(p))`), or `None` for
/// clips without coherent motion. Channel 0 is horizontal.
pub fn ground_truth_flow<T: Scalar>(spec: &ClipSpec) -> Option<Tensor<T>> {
    let (w, h) = (spec.width, spec.height);
    match spec.kind {
        ClipKind::Static => Some(Tensor::zeros(&[2, h, w])),
        ClipKind::Translate { dx, dy } => Some(Tensor::from_fn(&[2, h, w], |i| {
            T::lit(if i < h * w { -dx } else { -dy })
        })),
        ClipKind::Rotate { degrees } => {
            let (cx, cy) = centre(spec);
            let rad = degrees.to_radians();
            Some(Tensor::from_fn(&[2, h, w], |i| {
                let p = i % (h * w);
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let (qx, qy) = rotate(x, y, cx, cy, -rad);
                T::lit(if i < h * w { qx - x } else { qy - y })
            }))
        }
        ClipKind::Noise => None,
    }
}

/// A seeded mix of clip kinds for training and evaluation.
pub fn mixed_specs(n: usize, width: usize, height: usize, frames: usize, seed: u64) -> Vec<ClipSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = match i % 4 {
                0 => ClipKind::Static,
                1 | 2 => ClipKind::Translate {
                    dx: rng.gen_range(-3.0..3.0f64),
                    dy: rng.gen_range(-3.0..3.0f64),
                },
                _ => ClipKind::Rotate {
                    degrees: rng.gen_range(-2.0..2.0),
                },
            };
            ClipSpec {
                kind,
                width,
                height,
                frames,
                seed: rng.gen(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ClipKind) -> ClipSpec {
        ClipSpec {
            kind,
            width: 32,
            height: 24,
            frames: 4,
            seed: 7,
        }
    }

    #[test]
    fn static_frames_identical() {
        let f = generate(&spec(ClipKind::Static)).unwrap();
        assert!(f.windows(2).all(|w| w[0] == w[1]));
        assert!(f[0].y.iter().any(|&v| v != f[0].y[0]), "texture must not be flat");
    }

    #[test]
    fn translate_is_an_exact_interior_shift() {
        let f = generate(&spec(ClipKind::Translate { dx: 2.0, dy: 0.0 })).unwrap();
        for t in 1..4 {
            for y in 0..24 {
                for x in 2 * t..32 {
                    assert_eq!(f[t].y[y * 32 + x], f[0].y[y * 32 + x - 2 * t]);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        for kind in [ClipKind::Noise, ClipKind::Rotate { degrees: 1.5 }] {
            let a = generate(&spec(kind)).unwrap();
            let b = generate(&spec(kind)).unwrap();
            assert_eq!(a, b);
        }
        let mut other = spec(ClipKind::Static);
        other.seed = 8;
        assert_ne!(generate(&other).unwrap()[0], generate(&spec(ClipKind::Static)).unwrap()[0]);
    }

    #[test]
    fn noise_frames_differ() {
        let f = generate(&spec(ClipKind::Noise)).unwrap();
        assert_ne!(f[0], f[1]);
    }

    #[test]
    fn ground_truth_flow_reproduces_frames_by_construction() {
        // frame_t(p) must equal the texture of frame_{t-1} at p + f(p)
        let s = spec(ClipKind::Rotate { degrees: 3.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let planes = Planes::new(&mut rng);
        let f = ground_truth_flow::<f64>(&s).unwrap();
        let (cx, cy) = centre(&s);
        let t = 2.0;
        for &(x, y) in &[(3usize, 4usize), (20, 11), (31, 23)] {
            let i = y * 32 + x;
            let (qx, qy) = (x as f64 + f.data()[i], y as f64 + f.data()[768 + i]);
            let cur = rotate(x as f64, y as f64, cx, cy, -(3.0f64 * t).to_radians());
            let prev = rotate(qx, qy, cx, cy, -(3.0f64 * (t - 1.0)).to_radians());
            assert!((planes.y.at(cur.0, cur.1) - planes.y.at(prev.0, prev.1)).abs() < 1e-9);
        }
        let tr = ground_truth_flow::<f32>(&spec(ClipKind::Translate { dx: 1.5, dy: -2.0 })).unwrap();
        assert_eq!((tr.data()[0], tr.data()[768]), (-1.5, 2.0));
        assert!(ground_truth_flow::<f32>(&spec(ClipKind::Noise)).is_none());
    }

    #[test]
    fn odd_size_rejected() {
        let mut s = spec(ClipKind::Static);
        s.width = 31;
        assert!(generate(&s).is_err());
    }
}
