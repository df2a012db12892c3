//! Raw 8-bit I420 frames, the 6-channel packed working form, 4:4:4
//! upsampling for flow estimation, and distortion metrics.

use std::fs;
use std::io::Write;
use std::path::Path;

use anfvc_nn::{kernels, Scalar, Tensor};

use crate::{Error, Result};

/// Per-plane PSNR reported for a zero-MSE plane.
pub const PSNR_CAP_DB: f64 = 100.0;

/// One 8-bit 4:2:0 frame: full-resolution Y, half-resolution U and V.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame420 {
    width: usize,
    height: usize,
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

impl Frame420 {
    pub fn new(width: usize, height: usize, y: Vec<u8>, u: Vec<u8>, v: Vec<u8>) -> Result<Self> {
        check_even(width, height)?;
        let c = width / 2 * (height / 2);
        if y.len() != width * height || u.len() != c || v.len() != c {
            return Err(Error::Shape(format!(
                "plane sizes {}/{}/{} do not fit {width}x{height}",
                y.len(),
                u.len(),
                v.len()
            )));
        }
        Ok(Frame420 { width, height, y, u, v })
    }

    pub fn filled(width: usize, height: usize, y: u8, u: u8, v: u8) -> Result<Self> {
        check_even(width, height)?;
        let c = width / 2 * (height / 2);
        Ok(Frame420 {
            width,
            height,
            y: vec![y; width * height],
            u: vec![u; c],
            v: vec![v; c],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn chroma_width(&self) -> usize {
        self.width / 2
    }

    pub fn chroma_height(&self) -> usize {
        self.height / 2
    }

    /// Bytes occupied by one frame in a planar I420 file.
    pub fn byte_len(width: usize, height: usize) -> usize {
        width * height * 3 / 2
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::byte_len(self.width, self.height));
        out.extend_from_slice(&self.y);
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.v);
        out
    }

    fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        let (ny, nc) = (width * height, width / 2 * (height / 2));
        Frame420 {
            width,
            height,
            y: bytes[..ny].to_vec(),
            u: bytes[ny..ny + nc].to_vec(),
            v: bytes[ny + nc..ny + 2 * nc].to_vec(),
        }
    }
}

fn check_even(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::OddDimensions { width, height });
    }
    Ok(())
}

/// Splits a planar I420 byte buffer into `n_frames` frames.
pub fn parse_yuv_sequence(bytes: &[u8], width: usize, height: usize, n_frames: usize) -> Result<Vec<Frame420>> {
    check_even(width, height)?;
    let fl = Frame420::byte_len(width, height);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * fl;
        if bytes.len() < start + fl {
            return Err(Error::Truncated {
                frame: i,
                needed: (i + 1) * fl,
                available: bytes.len(),
            });
        }
        frames.push(Frame420::from_bytes(width, height, &bytes[start..start + fl]));
    }
    Ok(frames)
}

pub fn load_yuv_sequence(path: impl AsRef<Path>, width: usize, height: usize, n_frames: usize) -> Result<Vec<Frame420>> {
    check_even(width, height)?;
    let bytes = fs::read(path)?;
    parse_yuv_sequence(&bytes, width, height, n_frames)
}

pub fn write_yuv_sequence(path: impl AsRef<Path>, frames: &[Frame420]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for fr in frames {
        f.write_all(&fr.to_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn plane_tensor<T: Scalar>(p: &[u8], h: usize, w: usize) -> Tensor<T> {
    let inv = T::lit(1.0 / 255.0);
    Tensor::from_fn(&[1, h, w], |i| T::lit(p[i] as f64) * inv)
}

fn quantize_plane<T: Scalar>(t: &[T]) -> Vec<u8> {
    t.iter()
        .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Rearranges each 2x2 block of a plane (or of every channel of a
/// `[C, H, W]` tensor) into 4 channels at half resolution.
pub fn space_to_depth<T: Scalar>(plane: &Tensor<T>) -> Result<Tensor<T>> {
    let t = as_chw(plane)?;
    let (_, h, w) = t.dims3();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions { width: w, height: h });
    }
    Ok(kernels::space_to_depth(&t))
}

/// Inverse of [`space_to_depth`] for a `[4C, H/2, W/2]` tensor.
pub fn depth_to_space<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let t = as_chw(t)?;
    if t.shape()[0] % 4 != 0 {
        return Err(Error::Shape(format!("depth_to_space needs 4k channels, got {}", t.shape()[0])));
    }
    Ok(kernels::depth_to_space(&t))
}

fn as_chw<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.shape().len() {
        2 => Ok(t.clone().reshape(&[1, t.shape()[0], t.shape()[1]])),
        3 => Ok(t.clone()),
        _ => Err(Error::Shape(format!("expected a plane or [C,H,W], got {:?}", t.shape()))),
    }
}

/// `s2d(Y) ++ U ++ V` at half resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedFrame6<T>(Tensor<T>);

impl<T: Scalar> PackedFrame6<T> {
    pub fn pack(f: &Frame420) -> Self {
        let (h, w) = (f.height, f.width);
        let y = plane_tensor::<T>(&f.y, h, w);
        let u = plane_tensor::<T>(&f.u, h / 2, w / 2);
        let v = plane_tensor::<T>(&f.v, h / 2, w / 2);
        let ys = kernels::space_to_depth(&y);
        PackedFrame6(Tensor::cat0(&[&ys, &u, &v]))
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 6 {
            return Err(Error::Shape(format!("packed frame must be [6,h,w], got {:?}", t.shape())));
        }
        Ok(PackedFrame6(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Half-resolution `(h, w)` of the packed grid.
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3();
        (h, w)
    }

    /// Full-resolution Y as a `[1, H, W]` tensor.
    pub fn luma(&self) -> Tensor<T> {
        kernels::depth_to_space(&self.0.slice0(0, 4))
    }

    /// U and V as a `[2, H/2, W/2]` tensor.
    pub fn chroma(&self) -> Tensor<T> {
        self.0.slice0(4, 6)
    }

    /// Back to 8-bit samples (round-to-nearest, clamped).
    pub fn unpack(&self) -> Frame420 {
        let (h2, w2) = self.grid();
        let y = self.luma();
        let c = self.chroma();
        Frame420 {
            width: 2 * w2,
            height: 2 * h2,
            y: quantize_plane(y.data()),
            u: quantize_plane(&c.data()[..h2 * w2]),
            v: quantize_plane(&c.data()[h2 * w2..]),
        }
    }
}

/// `[3, H, W]`: Y plus bilinearly upsampled U, V, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame444<T>(Tensor<T>);

impl<T: Scalar> Frame444<T> {
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("4:4:4 frame must be [3, H, W], got {s:?}")));
        }
        Ok(Frame444(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Chroma upsampling for the flow estimator. Sample grids are centre-aligned
/// (a chroma sample sits at the centre of its 2x2 luma block) and edges
/// replicate.
pub fn to_444<T: Scalar>(f: &Frame420) -> Frame444<T> {
    let (h, w) = (f.height, f.width);
    let y = plane_tensor::<T>(&f.y, h, w);
    let u = plane_tensor::<T>(&f.u, h / 2, w / 2);
    let v = plane_tensor::<T>(&f.v, h / 2, w / 2);
    let uv = kernels::upsample2(&Tensor::cat0(&[&u, &v]));
    Frame444(Tensor::cat0(&[&y, &uv]))
}

/// [`to_444`] from a packed frame.
pub fn packed_to_444<T: Scalar>(p: &PackedFrame6<T>) -> Frame444<T> {
    let y = p.luma();
    let uv = kernels::upsample2(&p.chroma());
    Frame444(Tensor::cat0(&[&y, &uv]))
}

fn plane_mse(a: &[u8], b: &[u8]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// PSNR of one 8-bit plane pair, capped at [`PSNR_CAP_DB`].
pub fn plane_psnr(a: &[u8], b: &[u8]) -> f64 {
    let mse = plane_mse(a, b);
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Per-plane PSNR `(Y, U, V)` in dB.
pub fn psnr_planes(reference: &Frame420, rec: &Frame420) -> Result<(f64, f64, f64)> {
    same_dims(reference, rec)?;
    Ok((
        plane_psnr(&reference.y, &rec.y),
        plane_psnr(&reference.u, &rec.u),
        plane_psnr(&reference.v, &rec.v),
    ))
}

/// `(6 PSNR_Y + PSNR_U + PSNR_V) / 8`.
pub fn combine_psnr(py: f64, pu: f64, pv: f64) -> f64 {
    (6.0 * py + pu + pv) / 8.0
}

pub fn psnr_yuv(reference: &Frame420, rec: &Frame420) -> Result<f64> {
    let (py, pu, pv) = psnr_planes(reference, rec)?;
    Ok(combine_psnr(py, pu, pv))
}

fn same_dims(a: &Frame420, b: &Frame420) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `(2 MSE_Y + MSE_U + MSE_V) / 4` on values normalized to `[0, 1]`.
pub fn weighted_mse_frames(reference: &Frame420, rec: &Frame420) -> Result<f64> {
    same_dims(reference, rec)?;
    let n = 255.0f64 * 255.0;
    let my = plane_mse(&reference.y, &rec.y) / n;
    let mu = plane_mse(&reference.u, &rec.u) / n;
    let mv = plane_mse(&reference.v, &rec.v) / n;
    Ok((2.0 * my + mu + mv) / 4.0)
}

/// Packed-form weighted MSE; `MSE_Y` is the mean over the four s2d channels.
pub fn weighted_mse_packed<T: Scalar>(a: &PackedFrame6<T>, b: &PackedFrame6<T>) -> Result<f64> {
    if a.0.shape() != b.0.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.0.shape(), b.0.shape())));
    }
    let (_, h, w) = a.0.dims3();
    let plane = h * w;
    let mse = |c0: usize, c1: usize| -> f64 {
        let s: f64 = a.0.data()[c0 * plane..c1 * plane]
            .iter()
            .zip(&b.0.data()[c0 * plane..c1 * plane])
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        s / ((c1 - c0) * plane) as f64
    };
    Ok((2.0 * mse(0, 4) + mse(4, 5) + mse(5, 6)) / 4.0)
}

/// Replicate-pads a frame so both dimensions are multiples of `multiple`.
pub fn pad_to_multiple(f: &Frame420, multiple: usize) -> Frame420 {
    let pw = f.width.div_ceil(multiple) * multiple;
    let ph = f.height.div_ceil(multiple) * multiple;
    if pw == f.width && ph == f.height {
        return f.clone();
    }
    let pad = |src: &[u8], w: usize, h: usize, nw: usize, nh: usize| -> Vec<u8> {
        let mut out = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            let sy = y.min(h - 1);
            for x in 0..nw {
                out.push(src[sy * w + x.min(w - 1)]);
            }
        }
        out
    };
    Frame420 {
        width: pw,
        height: ph,
        y: pad(&f.y, f.width, f.height, pw, ph),
        u: pad(&f.u, f.width / 2, f.height / 2, pw / 2, ph / 2),
        v: pad(&f.v, f.width / 2, f.height / 2, pw / 2, ph / 2),
    }
}

/// Top-left `width x height` crop.
pub fn crop(f: &Frame420, width: usize, height: usize) -> Result<Frame420> {
    check_even(width, height)?;
    if width > f.width || height > f.height {
        return Err(Error::Shape(format!(
            "crop {width}x{height} exceeds frame {}x{}",
            f.width, f.height
        )));
    }
    let cut = |src: &[u8], sw: usize, w: usize, h: usize| -> Vec<u8> {
        (0..h).flat_map(|y| src[y * sw..y * sw + w].iter().copied()).collect()
    };
    Ok(Frame420 {
        width,
        height,
        y: cut(&f.y, f.width, width, height),
        u: cut(&f.u, f.width / 2, width / 2, height / 2),
        v: cut(&f.v, f.width / 2, width / 2, height / 2),
    })
}
