//! Forward and backward kernels on plain tensors. The tape composes these;
//! they are also usable directly for inference-only preprocessing.

use crate::{scalar, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        assert!(
            n + 2 * self.pad >= self.k,
            "input extent {n} too small for kernel {}",
            self.k
        );
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Unfolds `[C,H,W]` into `[C*k*k, Ho*Wo]`.
pub fn im2col<T: Scalar>(x: &Tensor<T>, g: ConvGeom) -> (Vec<T>, usize, usize) {
    let (c, h, w) = x.dims3();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.k;
    let mut col = vec![T::zero(); c * k * k * ho * wo];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst + ox] = xd[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Adjoint of [`im2col`]: accumulates `[C*k*k, Ho*Wo]` back into `[C,H,W]`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom) -> Tensor<T> {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.k;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            od[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `w: [Co, Ci, k, k]`, `b: [Co]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (ci, _, _) = x.dims3();
    let co = w.shape()[0];
    assert_eq!(w.shape(), &[co, ci, g.k, g.k], "conv weight shape");
    let (col, ho, wo) = im2col(x, g);
    let kk = ci * g.k * g.k;
    let n = ho * wo;
    let mut out = vec![T::zero(); co * n];
    T::gemm(co, kk, n, w.data(), kk as isize, 1, &col, n as isize, 1, T::zero(), &mut out, n as isize, 1);
    if let Some(b) = b {
        for (o, &bv) in b.data().iter().enumerate() {
            for v in &mut out[o * n..(o + 1) * n] {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, wd) = x.dims3();
    let (co, ho, wo) = gout.dims3();
    let (col, _, _) = im2col(x, g);
    let kk = ci * g.k * g.k;
    let n = ho * wo;
    let mut dw = vec![T::zero(); co * kk];
    T::gemm(co, n, kk, gout.data(), n as isize, 1, &col, 1, n as isize, T::zero(), &mut dw, kk as isize, 1);
    let mut dcol = vec![T::zero(); kk * n];
    T::gemm(kk, co, n, w.data(), 1, kk as isize, gout.data(), n as isize, 1, T::zero(), &mut dcol, n as isize, 1);
    let dx = col2im(&dcol, ci, h, wd, g);
    let db = Tensor::from_fn(&[co], |o| gout.data()[o * n..(o + 1) * n].iter().copied().sum());
    (dx, Tensor::from_vec(w.shape(), dw), db)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_len(n: usize, g: ConvGeom, output_pad: usize) -> usize {
    (n - 1) * g.stride + g.k + output_pad - 2 * g.pad
}

/// `w: [Ci, Co, k, k]`, `b: [Co]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
    output_pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = x.dims3();
    let co = w.shape()[1];
    assert_eq!(w.shape(), &[ci, co, g.k, g.k], "conv-transpose weight shape");
    let (ho, wo) = (conv_transpose_len(h, g, output_pad), conv_transpose_len(wd, g, output_pad));
    let kk = co * g.k * g.k;
    let n = h * wd;
    let mut col = vec![T::zero(); kk * n];
    T::gemm(kk, ci, n, w.data(), 1, kk as isize, x.data(), n as isize, 1, T::zero(), &mut col, n as isize, 1);
    let mut out = col2im(&col, co, ho, wo, g);
    if let Some(b) = b {
        let plane = ho * wo;
        let od = out.data_mut();
        for (o, &bv) in b.data().iter().enumerate() {
            for v in &mut od[o * plane..(o + 1) * plane] {
                *v += bv;
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, wd) = x.dims3();
    let (co, ho, wo) = gout.dims3();
    let (gcol, sh, sw) = im2col(gout, g);
    assert_eq!((sh, sw), (h, wd), "conv-transpose geometry mismatch");
    let kk = co * g.k * g.k;
    let n = h * wd;
    let mut dx = vec![T::zero(); ci * n];
    T::gemm(ci, kk, n, w.data(), kk as isize, 1, &gcol, n as isize, 1, T::zero(), &mut dx, n as isize, 1);
    let mut dw = vec![T::zero(); ci * kk];
    T::gemm(ci, n, kk, x.data(), n as isize, 1, &gcol, 1, n as isize, T::zero(), &mut dw, kk as isize, 1);
    let plane = ho * wo;
    let db = Tensor::from_fn(&[co], |o| gout.data()[o * plane..(o + 1) * plane].iter().copied().sum());
    (Tensor::from_vec(&[ci, h, wd], dx), Tensor::from_vec(w.shape(), dw), db)
}

/// Generalized divisive normalization with reparametrized `beta = b^2 + eps`,
/// `gamma = g^2`. `inverse` selects IGDN (multiplicative).
pub fn gdn<T: Scalar>(x: &Tensor<T>, beta_raw: &Tensor<T>, gamma_raw: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let norm = gdn_norm(x, beta_raw, gamma_raw);
    x.zip_map(&norm, |v, n| if inverse { v * n.sqrt() } else { v / n.sqrt() })
}

pub const GDN_EPS: f64 = 1e-6;

fn gdn_norm<T: Scalar>(x: &Tensor<T>, beta_raw: &Tensor<T>, gamma_raw: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    assert_eq!(beta_raw.shape(), &[c]);
    assert_eq!(gamma_raw.shape(), &[c, c]);
    let n = h * w;
    let sq: Vec<T> = x.data().iter().map(|&v| v * v).collect();
    let gamma: Vec<T> = gamma_raw.data().iter().map(|&g| g * g).collect();
    let mut out = vec![T::zero(); c * n];
    for (i, &b) in beta_raw.data().iter().enumerate() {
        let beta = b * b + T::lit(GDN_EPS);
        for v in &mut out[i * n..(i + 1) * n] {
            *v = beta;
        }
    }
    T::gemm(c, c, n, &gamma, c as isize, 1, &sq, n as isize, 1, T::one(), &mut out, n as isize, 1);
    Tensor::from_vec(&[c, h, w], out)
}

pub fn gdn_backward<T: Scalar>(
    x: &Tensor<T>,
    beta_raw: &Tensor<T>,
    gamma_raw: &Tensor<T>,
    inverse: bool,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let norm = gdn_norm(x, beta_raw, gamma_raw);
    let half = T::lit(0.5);
    let mut dx = vec![T::zero(); c * n];
    // q = dL/dnorm
    let mut q = vec![T::zero(); c * n];
    for i in 0..c * n {
        let (xv, nv, gv) = (x.data()[i], norm.data()[i], gout.data()[i]);
        let rs = nv.sqrt();
        if inverse {
            dx[i] = gv * rs;
            q[i] = gv * xv * half / rs;
        } else {
            dx[i] = gv / rs;
            q[i] = -gv * xv * half / (nv * rs);
        }
    }
    let gamma: Vec<T> = gamma_raw.data().iter().map(|&g| g * g).collect();
    // t = gamma^T q
    let mut t = vec![T::zero(); c * n];
    T::gemm(c, c, n, &gamma, 1, c as isize, &q, n as isize, 1, T::zero(), &mut t, n as isize, 1);
    let two = T::lit(2.0);
    for i in 0..c * n {
        dx[i] += two * x.data()[i] * t[i];
    }
    let sq: Vec<T> = x.data().iter().map(|&v| v * v).collect();
    // dgamma_eff[i][k] = sum_p q[i,p] * x[k,p]^2
    let mut dgamma = vec![T::zero(); c * c];
    T::gemm(c, n, c, &q, n as isize, 1, &sq, 1, n as isize, T::zero(), &mut dgamma, c as isize, 1);
    for (dg, &g) in dgamma.iter_mut().zip(gamma_raw.data()) {
        *dg *= two * g;
    }
    let dbeta = Tensor::from_fn(&[c], |i| {
        let s: T = q[i * n..(i + 1) * n].iter().copied().sum();
        s * two * beta_raw.data()[i]
    });
    (
        Tensor::from_vec(&[c, h, w], dx),
        dbeta,
        Tensor::from_vec(&[c, c], dgamma),
    )
}

/// Lossless 2x2 block rearrangement: channel `4c + 2dy + dx` holds the
/// sample at offset `(dy, dx)` of every 2x2 block of input channel `c`.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    assert!(h % 2 == 0 && w % 2 == 0, "space_to_depth needs even dims, got {h}x{w}");
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[4 * c, h2, w2]);
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let k = 2 * (y % 2) + (xx % 2);
                out[(4 * ci + k, y / 2, xx / 2)] = x[(ci, y, xx)];
            }
        }
    }
    out
}

pub fn depth_to_space<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, h2, w2) = x.dims3();
    assert!(c4 % 4 == 0, "depth_to_space needs a multiple of 4 channels, got {c4}");
    let c = c4 / 4;
    let mut out = Tensor::zeros(&[c, 2 * h2, 2 * w2]);
    for ci in 0..c {
        for y in 0..2 * h2 {
            for xx in 0..2 * w2 {
                let k = 2 * (y % 2) + (xx % 2);
                out[(ci, y, xx)] = x[(4 * ci + k, y / 2, xx / 2)];
            }
        }
    }
    out
}

/// Source taps for bilinear x2 upsampling with centre-aligned sample grids
/// (`align_corners = false`): output `j` reads input coordinate `j/2 - 1/4`.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = x[(ci, y0, x0)] * (T::one() - fx) + x[(ci, y0, x1)] * fx;
                let bot = x[(ci, y1, x0)] * (T::one() - fx) + x[(ci, y1, x1)] * fx;
                out[(ci, oy, ox)] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = gout.dims3();
    let (h, w) = (h2 / 2, w2 / 2);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = gout[(ci, oy, ox)];
                dx[(ci, y0, x0)] += g * (T::one() - fy) * (T::one() - fx);
                dx[(ci, y0, x1)] += g * (T::one() - fy) * fx;
                dx[(ci, y1, x0)] += g * fy * (T::one() - fx);
                dx[(ci, y1, x1)] += g * fy * fx;
            }
        }
    }
    dx
}

/// Bilinear /2 downsampling with centre-aligned grids, i.e. a 2x2 mean.
pub fn downsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    assert!(h % 2 == 0 && w % 2 == 0, "downsample2 needs even dims");
    let q = T::lit(0.25);
    Tensor::from_fn(&[c, h / 2, w / 2], |i| {
        let xx = i % (w / 2);
        let y = (i / (w / 2)) % (h / 2);
        let ci = i / (w / 2 * (h / 2));
        (x[(ci, 2 * y, 2 * xx)] + x[(ci, 2 * y, 2 * xx + 1)] + x[(ci, 2 * y + 1, 2 * xx)] + x[(ci, 2 * y + 1, 2 * xx + 1)]) * q
    })
}

pub fn downsample2_backward<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = gout.dims3();
    let q = T::lit(0.25);
    Tensor::from_fn(&[c, 2 * h2, 2 * w2], |i| {
        let xx = i % (2 * w2);
        let y = (i / (2 * w2)) % (2 * h2);
        let ci = i / (2 * w2 * 2 * h2);
        gout[(ci, y / 2, xx / 2)] * q
    })
}

#[inline]
fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, sx: T, sy: T) -> (T, T, T) {
    // border replication: clamp the sampling coordinate into the image
    let maxx = T::lit((w - 1) as f64);
    let maxy = T::lit((h - 1) as f64);
    let cx = sx.max(T::zero()).min(maxx);
    let cy = sy.max(T::zero()).min(maxy);
    let x0 = cx.floor();
    let y0 = cy.floor();
    let fx = cx - x0;
    let fy = cy - y0;
    let x0i = x0.to_usize().unwrap_or(0).min(w - 1);
    let y0i = y0.to_usize().unwrap_or(0).min(h - 1);
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    let v00 = plane[y0i * w + x0i];
    let v01 = plane[y0i * w + x1i];
    let v10 = plane[y1i * w + x0i];
    let v11 = plane[y1i * w + x1i];
    let one = T::one();
    let val = (v00 * (one - fx) + v01 * fx) * (one - fy) + (v10 * (one - fx) + v11 * fx) * fy;
    let inside_x = sx > T::zero() && sx < maxx;
    let inside_y = sy > T::zero() && sy < maxy;
    let dvx = if inside_x {
        (v01 - v00) * (one - fy) + (v11 - v10) * fy
    } else {
        T::zero()
    };
    let dvy = if inside_y {
        (v10 - v00) * (one - fx) + (v11 - v01) * fx
    } else {
        T::zero()
    };
    (val, dvx, dvy)
}

/// Backward warping: `out[c](p) = x[c](p + flow(p))`, bilinear, border replicate.
/// `flow[0]` is horizontal, `flow[1]` vertical.
pub fn warp<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    assert_eq!(flow.shape(), &[2, h, w], "flow must be [2,H,W] matching the image");
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let fd = flow.data();
    for ci in 0..c {
        let src = &x.data()[ci * plane..(ci + 1) * plane];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let sx = T::lit(xx as f64) + fd[p];
                let sy = T::lit(y as f64) + fd[plane + p];
                out.data_mut()[ci * plane + p] = bilinear_sample(src, h, w, sx, sy).0;
            }
        }
    }
    out
}

pub fn warp_backward<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.dims3();
    let plane = h * w;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut dflow = Tensor::zeros(&[2, h, w]);
    let fd = flow.data();
    let maxx = T::lit((w - 1) as f64);
    let maxy = T::lit((h - 1) as f64);
    for ci in 0..c {
        let src = &x.data()[ci * plane..(ci + 1) * plane];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let g = gout.data()[ci * plane + p];
                let sx = T::lit(xx as f64) + fd[p];
                let sy = T::lit(y as f64) + fd[plane + p];
                let (_, dvx, dvy) = bilinear_sample(src, h, w, sx, sy);
                dflow.data_mut()[p] += g * dvx;
                dflow.data_mut()[plane + p] += g * dvy;
                let cx = sx.max(T::zero()).min(maxx);
                let cy = sy.max(T::zero()).min(maxy);
                let x0 = cx.floor();
                let y0 = cy.floor();
                let fx = cx - x0;
                let fy = cy - y0;
                let x0i = x0.to_usize().unwrap_or(0).min(w - 1);
                let y0i = y0.to_usize().unwrap_or(0).min(h - 1);
                let x1i = (x0i + 1).min(w - 1);
                let y1i = (y0i + 1).min(h - 1);
                let one = T::one();
                let d = dx.data_mut();
                let base = ci * plane;
                d[base + y0i * w + x0i] += g * (one - fx) * (one - fy);
                d[base + y0i * w + x1i] += g * fx * (one - fy);
                d[base + y1i * w + x0i] += g * (one - fx) * fy;
                d[base + y1i * w + x1i] += g * fx * fy;
            }
        }
    }
    (dx, dflow)
}

/// Local cost volume: channel `(dy + r) * (2r + 1) + (dx + r)` holds
/// `mean_c a[c](p) * b[c](p + (dx, dy))`, zero outside `b`.
pub fn correlation<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, radius: usize) -> Tensor<T> {
    let (c, h, w) = a.dims3();
    assert_eq!(a.shape(), b.shape());
    let side = 2 * radius + 1;
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = Tensor::zeros(&[side * side, h, w]);
    for dy in 0..side {
        for dx in 0..side {
            let d = dy * side + dx;
            let oy = dy as isize - radius as isize;
            let ox = dx as isize - radius as isize;
            for y in 0..h {
                let by = y as isize + oy;
                if by < 0 || by >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let bx = xx as isize + ox;
                    if bx < 0 || bx >= w as isize {
                        continue;
                    }
                    let mut s = T::zero();
                    for ci in 0..c {
                        s += a[(ci, y, xx)] * b[(ci, by as usize, bx as usize)];
                    }
                    out[(d, y, xx)] = s * inv_c;
                }
            }
        }
    }
    out
}

pub fn correlation_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    radius: usize,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = a.dims3();
    let side = 2 * radius + 1;
    let inv_c = T::one() / T::lit(c as f64);
    let mut da = Tensor::zeros(&[c, h, w]);
    let mut db = Tensor::zeros(&[c, h, w]);
    for dy in 0..side {
        for dx in 0..side {
            let d = dy * side + dx;
            let oy = dy as isize - radius as isize;
            let ox = dx as isize - radius as isize;
            for y in 0..h {
                let by = y as isize + oy;
                if by < 0 || by >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let bx = xx as isize + ox;
                    if bx < 0 || bx >= w as isize {
                        continue;
                    }
                    let g = gout[(d, y, xx)] * inv_c;
                    for ci in 0..c {
                        da[(ci, y, xx)] += g * b[(ci, by as usize, bx as usize)];
                        db[(ci, by as usize, bx as usize)] += g * a[(ci, y, xx)];
                    }
                }
            }
        }
    }
    (da, db)
}

/// Probability floor applied to every bin probability before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound applied to Gaussian scales.
pub const SCALE_MIN: f64 = 0.11;

/// Total bits `-sum log2 P(v)` where `P` is the unit-bin mass of
/// `N(mean, max(scale, SCALE_MIN)^2)` around each value.
pub fn gaussian_bits<T: Scalar>(v: &Tensor<T>, mean: Option<&Tensor<T>>, scale: &Tensor<T>) -> T {
    let mut bits = T::zero();
    for i in 0..v.numel() {
        let mu = mean.map_or(T::zero(), |m| m.data()[i]);
        bits += gaussian_bin(v.data()[i] - mu, scale.data()[i]).0;
    }
    bits
}

/// Returns `(bits, dbits/dr, dbits/dscale_raw)` for residual `r = v - mean`.
#[inline]
pub fn gaussian_bin<T: Scalar>(r: T, scale_raw: T) -> (T, T, T) {
    let smin = T::lit(SCALE_MIN);
    let (sigma, scale_live) = if scale_raw > smin { (scale_raw, true) } else { (smin, false) };
    let d = r.abs();
    let half = T::lit(0.5);
    let a = (half - d) / sigma;
    let b = (-half - d) / sigma;
    let p = scalar::normal_cdf(a) - scalar::normal_cdf(b);
    let floor = T::lit(LIKELIHOOD_FLOOR);
    let ln2 = T::lit(std::f64::consts::LN_2);
    if p <= floor {
        return (-(floor.ln()) / ln2, T::zero(), T::zero());
    }
    let bits = -(p.ln()) / ln2;
    let dbits_dp = -T::one() / (p * ln2);
    let (pa, pb) = (scalar::normal_pdf(a), scalar::normal_pdf(b));
    let dp_dd = (-pa + pb) / sigma;
    let dp_ds = (-a * pa + b * pb) / sigma;
    let sign = if r > T::zero() {
        T::one()
    } else if r < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    let dr = dbits_dp * dp_dd * sign;
    let ds = if scale_live { dbits_dp * dp_ds } else { T::zero() };
    (bits, dr, ds)
}
