//! Rate-distortion evaluation, BD-rate and report emission.
//!
//! Anchor and result CSVs share one schema, with a header row:
//! `label,bpp,psnr_y,psnr_u,psnr_v`. The combined PSNR is
//! `(6 Y + U + V) / 8`.

use std::fmt::Write as _;
use std::path::Path;

use anfvc_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_sequence, encode_sequence, GopConfig, Lambdas};
use crate::model::VideoModel;
use crate::motion::FlowSource;
use crate::rate::LAMBDA_P;
use crate::yuv::{combine_psnr, psnr_planes, Frame420};
use crate::{Error, Result};

pub const MIN_CURVE_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
    pub psnr_y: f64,
    pub psnr_u: f64,
    pub psnr_v: f64,
}

impl RdPoint {
    pub fn from_planes(label: impl Into<String>, bpp: f64, psnr_y: f64, psnr_u: f64, psnr_v: f64) -> Self {
        RdPoint {
            label: label.into(),
            bpp,
            psnr: combine_psnr(psnr_y, psnr_u, psnr_v),
            psnr_y,
            psnr_u,
            psnr_v,
        }
    }
}

/// At least four points with strictly increasing bpp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by bpp and validates.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < MIN_CURVE_POINTS {
            return Err(Error::BdRate(format!("curve needs {MIN_CURVE_POINTS} points, got {}", points.len())));
        }
        if let Some(p) = points.iter().find(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite())) {
            return Err(Error::BdRate(format!("point {}: bpp must be positive and psnr finite", p.label)));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if let Some(w) = points.windows(2).find(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::BdRate(format!("duplicate bpp {} ({}, {})", w[0].bpp, w[0].label, w[1].label)));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["label", "bpp", "psnr_y", "psnr_u", "psnr_v"]).map_err(csv_io)?;
        for p in &self.points {
            w.write_record([p.label.clone(), fmt_f(p.bpp), fmt_f(p.psnr_y), fmt_f(p.psnr_u), fmt_f(p.psnr_v)])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads an RD curve from CSV. Errors carry the 1-based file line.
pub fn ingest_anchor(path: impl AsRef<Path>) -> Result<RdCurve> {
    parse_anchor(&std::fs::read_to_string(path)?)
}

pub fn parse_anchor(text: &str) -> Result<RdCurve> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?.clone();
    let want = ["label", "bpp", "psnr_y", "psnr_u", "psnr_v"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(Error::Csv {
            line: 1,
            msg: format!("expected header {}", want.join(",")),
        });
    }
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            let v: f64 = rec[i].parse().map_err(|_| Error::Csv {
                line,
                msg: format!("{}: not a number: {:?}", want[i], &rec[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { line, msg: format!("{}: not finite", want[i]) });
            }
            Ok(v)
        };
        let p = RdPoint::from_planes(&rec[0], num(1)?, num(2)?, num(3)?, num(4)?);
        if p.bpp <= 0.0 {
            return Err(Error::Csv { line, msg: "bpp must be positive".into() });
        }
        if let Some(q) = points.iter().find(|q: &&RdPoint| q.bpp == p.bpp) {
            return Err(Error::Csv {
                line,
                msg: format!("duplicate bpp {} (also in row {})", p.bpp, q.label),
            });
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Csv { line: 1, msg: "no data rows".into() });
    }
    RdCurve::new(points).map_err(|e| Error::Csv { line: 0, msg: e.to_string() })
}

// ---------------------------------------------------------------- BD-rate

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdInterp {
    /// Monotone piecewise cubic Hermite (Fritsch-Carlson slopes).
    #[default]
    Pchip,
    /// Least-squares cubic polynomial.
    Cubic,
}

/// Log-rate as a function of PSNR.
#[derive(Clone, Debug)]
pub enum LogRateFit {
    Pchip { x: Vec<f64>, y: Vec<f64>, d: Vec<f64> },
    Cubic([f64; 4]),
}

impl LogRateFit {
    pub fn new(curve: &RdCurve, interp: BdInterp) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.psnr, p.bpp.ln())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::BdRate("psnr values must be distinct".into()));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        Ok(match interp {
            BdInterp::Pchip => {
                let d = pchip_slopes(&x, &y);
                LogRateFit::Pchip { x, y, d }
            }
            BdInterp::Cubic => LogRateFit::Cubic(polyfit3(&x, &y)?),
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            LogRateFit::Cubic(c) => c[0] + t * (c[1] + t * (c[2] + t * c[3])),
            LogRateFit::Pchip { x, y, d } => {
                let i = x.partition_point(|&v| v <= t).clamp(1, x.len() - 1) - 1;
                let h = x[i + 1] - x[i];
                let s = (t - x[i]) / h;
                let (s2, s3) = (s * s, s * s * s);
                (2.0 * s3 - 3.0 * s2 + 1.0) * y[i]
                    + (s3 - 2.0 * s2 + s) * h * d[i]
                    + (-2.0 * s3 + 3.0 * s2) * y[i + 1]
                    + (s3 - s2) * h * d[i + 1]
            }
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            LogRateFit::Cubic(c) => {
                let p = |t: f64| t * (c[0] + t * (c[1] / 2.0 + t * (c[2] / 3.0 + t * c[3] / 4.0)));
                p(b) - p(a)
            }
            LogRateFit::Pchip { x, y, d } => {
                // Integral of the Hermite cubic on [x_i, x_i + h] from 0 to s.
                let partial = |i: usize, s: f64| {
                    let h = x[i + 1] - x[i];
                    let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
                    h * ((s4 / 2.0 - s3 + s) * y[i]
                        + (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0) * h * d[i]
                        + (-s4 / 2.0 + s3) * y[i + 1]
                        + (s4 / 4.0 - s3 / 3.0) * h * d[i + 1])
                };
                let locate = |t: f64| {
                    let i = x.partition_point(|&v| v <= t).clamp(1, x.len() - 1) - 1;
                    (i, (t - x[i]) / (x[i + 1] - x[i]))
                };
                let (ia, sa) = locate(a);
                let (ib, sb) = locate(b);
                let mut total = -partial(ia, sa);
                for i in ia..ib {
                    total += partial(i, 1.0);
                }
                total + partial(ib, sb)
            }
        }
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    if n == 2 {
        d[0] = del[0];
        d[1] = del[0];
    } else {
        d[0] = end(h[0], h[1], del[0], del[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    }
    d
}

/// Least-squares cubic through `(x, y)`; x is centred for conditioning.
fn polyfit3(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let t = xi - mu;
        let pw = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pw[r] * pw[c];
            }
            a[r][4] += pw[r] * yi;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::BdRate("singular cubic fit".into()));
        }
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let b: Vec<f64> = (0..4).map(|r| a[r][4] / a[r][r]).collect();
    // expand b0 + b1 (x-mu) + b2 (x-mu)^2 + b3 (x-mu)^3 into powers of x
    Ok([
        b[0] - b[1] * mu + b[2] * mu * mu - b[3] * mu * mu * mu,
        b[1] - 2.0 * b[2] * mu + 3.0 * b[3] * mu * mu,
        b[2] - 3.0 * b[3] * mu,
        b[3],
    ])
}

/// Overlapping PSNR interval of two curves.
pub fn psnr_overlap(a: &RdCurve, b: &RdCurve) -> Result<(f64, f64)> {
    let range = |c: &RdCurve| {
        c.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr), hi.max(p.psnr)))
    };
    let (a0, a1) = range(a);
    let (b0, b1) = range(b);
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo >= hi {
        return Err(Error::BdRate(format!("no PSNR overlap: [{a0}, {a1}] vs [{b0}, {b1}]")));
    }
    Ok((lo, hi))
}

/// Average rate difference of `test` against `anchor` at equal PSNR, in
/// percent; negative means `test` needs fewer bits.
pub fn bd_rate_with(test: &RdCurve, anchor: &RdCurve, interp: BdInterp) -> Result<f64> {
    let (lo, hi) = psnr_overlap(test, anchor)?;
    let ft = LogRateFit::new(test, interp)?;
    let fa = LogRateFit::new(anchor, interp)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * avg.exp_m1())
}

pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    bd_rate_with(test, anchor, BdInterp::Pchip)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub lambdas: Lambdas,
    pub point: RdPoint,
    /// Frames decoded from the serialized bitstream.
    pub decoded: Vec<Frame420>,
    pub bytes: usize,
}

/// Encodes, serializes, parses and decodes at one lambda pair; bpp is the
/// file size over source pixels and PSNR is measured on decoder output
/// (mean of per-frame values).
pub fn evaluate_point<T: Scalar>(
    model: &VideoModel<T>,
    frames: &[Frame420],
    gop: GopConfig,
    lambdas: Lambdas,
    flow: &FlowSource<T>,
    label: impl Into<String>,
) -> Result<EvalPoint> {
    let enc = encode_sequence(model, frames, gop, lambdas, flow)?;
    let bytes = enc.bitstream.to_bytes();
    let stream = crate::codec::SequenceBitstream::parse(&bytes)?;
    let decoded = decode_sequence(&stream, model)?;
    let (mut y, mut u, mut v) = (0.0, 0.0, 0.0);
    for (a, b) in frames.iter().zip(&decoded) {
        let (py, pu, pv) = psnr_planes(a, b)?;
        y += py;
        u += pu;
        v += pv;
    }
    let n = frames.len() as f64;
    let first = &frames[0];
    let bpp = (bytes.len() * 8) as f64 / (n * (first.width() * first.height()) as f64);
    Ok(EvalPoint {
        lambdas,
        point: RdPoint::from_planes(label, bpp, y / n, u / n, v / n),
        decoded,
        bytes: bytes.len(),
    })
}

/// One RD point per lambda pair. Failures name the offending point.
pub fn evaluate<T: Scalar>(
    model: &VideoModel<T>,
    frames: &[Frame420],
    grid: &[Lambdas],
    gop: GopConfig,
    flow: &FlowSource<T>,
) -> Result<RdCurve> {
    let mut pts = Vec::with_capacity(grid.len());
    for l in grid {
        let label = format!("lp{}_li{:.5}", LAMBDA_P[l.lambda_p_index.min(3)], l.lambda_i);
        let p = evaluate_point(model, frames, gop, *l, flow, label.clone())
            .map_err(|e| Error::RdPoint {
            label,
            source: Box::new(e),
        })?;
        pts.push(p.point);
    }
    RdCurve::new(pts)
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub name: String,
    pub curve: RdCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdEntry {
    pub test: String,
    pub anchor: String,
    pub interp: BdInterp,
    pub bd_rate_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub curves: Vec<NamedCurve>,
    pub bd_rates: Vec<BdEntry>,
}

impl Report {
    /// BD-rate of every curve against `anchor`.
    pub fn against(curves: Vec<NamedCurve>, anchor: &str) -> Result<Self> {
        let a = curves
            .iter()
            .find(|c| c.name == anchor)
            .ok_or_else(|| Error::BdRate(format!("no curve named {anchor}")))?
            .curve
            .clone();
        let mut bd_rates = Vec::new();
        for c in curves.iter().filter(|c| c.name != anchor) {
            bd_rates.push(BdEntry {
                test: c.name.clone(),
                anchor: anchor.into(),
                interp: BdInterp::Pchip,
                bd_rate_percent: bd_rate(&c.curve, &a)?,
            });
        }
        Ok(Report { curves, bd_rates })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_svg(&self) -> String {
        rd_plot_svg(&self.curves)
    }
}

/// Writes `results.json` and `rd.svg` into `dir`.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.json"), report.to_json())?;
    std::fs::write(dir.join("rd.svg"), report.to_svg())?;
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn rd_plot_svg(curves: &[NamedCurve]) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let pts = curves.iter().flat_map(|c| c.curve.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (px, py) = ((x1 - x0).max(1e-9) * 0.05, (y1 - y0).max(1e-9) * 0.05);
    let (x0, x1, y0, y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let _ = writeln!(s, r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#, h - m, w - m);
    for i in 0..=4 {
        let (vx, vy) = (x0 + (x1 - x0) * i as f64 / 4.0, y0 + (y1 - y0) * i as f64 / 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{vx:.3}</text>"#, sx(vx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{vy:.2}</text>"#, m - 6.0, sy(vy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">bpp</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" font-size="13" transform="rotate(-90 16 {})" text-anchor="middle">PSNR-YUV (dB)</text>"#, h / 2.0, h / 2.0);
    for (k, c) in curves.iter().enumerate() {
        let col = COLORS[k % COLORS.len()];
        let path: Vec<String> = c.curve.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{col}" stroke-width="2"/>"#, path.join(" "));
        for p in &c.curve.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{col}"/>"#, sx(p.bpp), sy(p.psnr));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="{col}">{}</text>"#, m + 10.0, m + 16.0 * (k + 1) as f64, xml_escape(&c.name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(pts.iter().enumerate().map(|(i, &(b, p))| RdPoint::from_planes(format!("p{i}"), b, p, p, p)).collect()).unwrap()
    }

    fn sample() -> RdCurve {
        curve(&[(0.05, 30.0), (0.1, 32.5), (0.2, 35.0), (0.4, 37.2)])
    }

    #[test]
    fn combined_psnr_row() {
        let c = parse_anchor("label,bpp,psnr_y,psnr_u,psnr_v\na,0.1,40,38,36\nb,0.2,41,39,37\nc,0.3,42,40,38\nd,0.4,43,41,39\n").unwrap();
        assert_eq!(c.points()[0].psnr, 39.25);
    }

    #[test]
    fn anchor_errors_carry_line_numbers() {
        assert!(parse_anchor("").is_err());
        assert!(parse_anchor("label,bpp,psnr_y,psnr_u,psnr_v\n").is_err());
        let dup = "label,bpp,psnr_y,psnr_u,psnr_v\na,0.1,40,38,36\nb,0.1,41,39,37\nc,0.3,42,40,38\nd,0.4,43,41,39\n";
        match parse_anchor(dup) {
            Err(Error::Csv { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad = "label,bpp,psnr_y,psnr_u,psnr_v\na,0.1,40,38,36\nb,x,41,39,37\n";
        match parse_anchor(bad) {
            Err(Error::Csv { line: 3, msg }) => assert!(msg.contains("bpp")),
            other => panic!("{other:?}"),
        }
        let short = "label,bpp,psnr_y,psnr_u,psnr_v\na,0.1,40,38\n";
        assert!(matches!(parse_anchor(short), Err(Error::Csv { line: 2, .. })));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = sample();
        c.write_csv(&p).unwrap();
        assert_eq!(ingest_anchor(&p).unwrap(), c);
    }

    #[test]
    fn bd_self_and_scaled() {
        for interp in [BdInterp::Pchip, BdInterp::Cubic] {
            let a = sample();
            assert_eq!(bd_rate_with(&a, &a, interp).unwrap(), 0.0);
            for k in [0.5, 1.5, 2.0] {
                let t = curve(&a.points().iter().map(|p| (p.bpp * k, p.psnr)).collect::<Vec<_>>());
                let bd = bd_rate_with(&t, &a, interp).unwrap();
                assert!((bd - 100.0 * (k - 1.0)).abs() < 1e-9, "{interp:?} {k} {bd}");
            }
        }
    }

    #[test]
    fn no_overlap_is_an_error() {
        let b = curve(&[(0.05, 40.0), (0.1, 41.0), (0.2, 42.0), (0.4, 43.0)]);
        assert!(bd_rate(&sample(), &b).is_err());
    }

    #[test]
    fn pchip_interpolates_and_integrates() {
        let f = LogRateFit::new(&sample(), BdInterp::Pchip).unwrap();
        for p in sample().points() {
            assert!((f.eval(p.psnr) - p.bpp.ln()).abs() < 1e-12);
        }
        let (a, b) = (30.7, 36.1);
        let n = 200_000;
        let hh = (b - a) / n as f64;
        let trap: f64 = (0..n).map(|i| 0.5 * hh * (f.eval(a + i as f64 * hh) + f.eval(a + (i + 1) as f64 * hh))).sum();
        assert!((trap - f.integral(a, b)).abs() < 1e-8);
    }

    #[test]
    fn cubic_fit_is_exact_on_cubics() {
        let c = [0.3, -0.2, 0.01, 0.0004];
        let xs = [30.0, 32.0, 33.5, 36.0, 39.0];
        let ys: Vec<f64> = xs.iter().map(|&x| c[0] + x * (c[1] + x * (c[2] + x * c[3]))).collect();
        let f = polyfit3(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let v = f[0] + x * (f[1] + x * (f[2] + x * f[3]));
            assert!((v - y).abs() < 1e-8);
        }
    }

    #[test]
    fn report_is_deterministic_and_empty_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let empty = Report { curves: vec![], bd_rates: vec![] };
        emit_report(&empty, dir.path()).unwrap();
        let back: Report = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
        assert_eq!(back, empty);

        let a = sample();
        let t = curve(&a.points().iter().map(|p| (p.bpp * 0.8, p.psnr)).collect::<Vec<_>>());
        let r = Report::against(vec![NamedCurve { name: "x".into(), curve: a.clone() }, NamedCurve { name: "t".into(), curve: t.clone() }], "x").unwrap();
        assert_eq!(r.bd_rates[0].bd_rate_percent, bd_rate(&t, &a).unwrap());
        emit_report(&r, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("results.json")).unwrap();
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("results.json")).unwrap(), first);
        assert!(std::fs::read_to_string(dir.path().join("rd.svg")).unwrap().contains("<polyline"));
    }
}
