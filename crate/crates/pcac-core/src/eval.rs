//! Rate-distortion sweeps, Bjontegaard metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bitstream::{decode_sequence_file, encode_sequence_file, FrameStats};
use crate::error::{Error, Result};
use crate::network::CodecModel;
use crate::pointcloud::{
    distortion_norms, psnr, write_ply_with_scalar, FrameSequence, PlyFormat, VoxelizedFrame,
};

/// One operating point, averaged over the frames of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr_y: f64,
    pub psnr_yuv: f64,
    /// Mean wall time per frame.
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    /// Sorted by bpp.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts points by bpp; rejects non-finite values and repeated rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        let label = label.into();
        if let Some(p) = points
            .iter()
            .find(|p| !(p.bpp.is_finite() && p.psnr_y.is_finite() && p.psnr_yuv.is_finite()))
        {
            return Err(Error::InvariantViolation(format!(
                "curve {label}: non-finite point {p:?}"
            )));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::InvariantViolation(format!(
                "curve {label}: repeated bpp value"
            )));
        }
        Ok(Self { label, points })
    }

    /// Convenience for curves without timing.
    pub fn from_rate_quality(
        label: impl Into<String>,
        rate_psnr_y_yuv: &[(f64, f64, f64)],
    ) -> Result<Self> {
        let points = rate_psnr_y_yuv
            .iter()
            .map(|&(bpp, psnr_y, psnr_yuv)| RDPoint {
                bpp,
                psnr_y,
                psnr_yuv,
                encode_seconds: 0.0,
                decode_seconds: 0.0,
            })
            .collect();
        Self::new(label, points)
    }
}

/// Result of coding a whole sequence with one model.
#[derive(Clone, Debug)]
pub struct ModelEvaluation {
    pub point: RDPoint,
    pub lambda: f64,
    pub stats: Vec<FrameStats>,
    /// Decoded frames, canonical order.
    pub reconstructions: Vec<VoxelizedFrame>,
}

/// Encodes and decodes `seq`, checks the decoder matches the encoder, and
/// averages bpp and PSNR over the non-empty frames.
pub fn evaluate_model(seq: &FrameSequence, model: &CodecModel, gop: usize) -> Result<ModelEvaluation> {
    let frames = seq.len().max(1) as f64;
    let t0 = Instant::now();
    let enc = encode_sequence_file(seq, model, gop)?;
    let encode_seconds = t0.elapsed().as_secs_f64() / frames;
    let t1 = Instant::now();
    let dec = decode_sequence_file(&enc.encoded, seq, model)?;
    let decode_seconds = t1.elapsed().as_secs_f64() / frames;
    if let Some(i) = (0..dec.len()).find(|&i| dec[i] != enc.reconstructions[i]) {
        return Err(Error::Decode(format!(
            "frame {i}: decoder output differs from the encoder's"
        )));
    }
    let mut n = 0usize;
    let (mut bpp, mut y, mut yuv) = (0.0, 0.0, 0.0);
    for ((f, r), s) in seq.frames().iter().zip(&dec).zip(&enc.stats) {
        if f.is_empty() {
            continue;
        }
        let q = psnr(f, r)?;
        bpp += s.bpp;
        y += q.psnr_y;
        yuv += q.psnr_yuv;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("sequence {} has no points", seq.name)));
    }
    let n = n as f64;
    Ok(ModelEvaluation {
        point: RDPoint {
            bpp: bpp / n,
            psnr_y: y / n,
            psnr_yuv: yuv / n,
            encode_seconds,
            decode_seconds,
        },
        lambda: model.lambda(),
        stats: enc.stats,
        reconstructions: dec,
    })
}

/// One RD point per model.
pub fn run_rd_sweep(
    label: &str,
    seq: &FrameSequence,
    models: &[CodecModel],
    gop: usize,
) -> Result<(RDCurve, Vec<ModelEvaluation>)> {
    if models.len() < 2 {
        return Err(Error::Contract(format!(
            "a sweep needs at least 2 models, got {}",
            models.len()
        )));
    }
    let evals = models
        .iter()
        .map(|m| evaluate_model(seq, m, gop))
        .collect::<Result<Vec<_>>>()?;
    let curve = RDCurve::new(label, evals.iter().map(|e| e.point).collect())?;
    Ok((curve, evals))
}

/// Least-squares cubic in a centred and scaled variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicFit {
    pub center: f64,
    pub scale: f64,
    /// Coefficients of `1, u, u^2, u^3` with `u = (x - center) / scale`.
    pub coeffs: [f64; 4],
}

impl CubicFit {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 4 {
            return Err(Error::Contract(format!(
                "cubic fit needs at least 4 points, got {}",
                x.len().min(y.len())
            )));
        }
        let n = x.len() as f64;
        let center = x.iter().sum::<f64>() / n;
        let scale = x.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
        if scale <= 0.0 {
            return Err(Error::Contract("cubic fit over a single abscissa".into()));
        }
        let rows: Vec<[f64; 4]> = x
            .iter()
            .map(|&v| {
                let u = (v - center) / scale;
                [1.0, u, u * u, u * u * u]
            })
            .collect();
        let coeffs = least_squares4(rows, y.to_vec())?;
        Ok(Self {
            center,
            scale,
            coeffs,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.scale;
        let c = &self.coeffs;
        ((c[3] * u + c[2]) * u + c[1]) * u + c[0]
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |x: f64| {
            let u = (x - self.center) / self.scale;
            let c = &self.coeffs;
            u * (c[0] + u * (c[1] / 2.0 + u * (c[2] / 3.0 + u * c[3] / 4.0)))
        };
        (prim(b) - prim(a)) * self.scale
    }
}

/// Householder QR solve of an overdetermined `m x 4` system.
#[allow(clippy::needless_range_loop)]
fn least_squares4(mut a: Vec<[f64; 4]>, mut b: Vec<f64>) -> Result<[f64; 4]> {
    let m = a.len();
    for k in 0..4 {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Contract("rank-deficient cubic fit".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        for j in k..4 {
            let d: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum::<f64>() * 2.0 / vv;
            for i in k..m {
                a[i][j] -= d * v[i - k];
            }
        }
        let d: f64 = (k..m).map(|i| v[i - k] * b[i]).sum::<f64>() * 2.0 / vv;
        for i in k..m {
            b[i] -= d * v[i - k];
        }
    }
    let mut x = [0.0; 4];
    for k in (0..4).rev() {
        if a[k][k].abs() < 1e-12 {
            return Err(Error::Contract("rank-deficient cubic fit".into()));
        }
        let s: f64 = (k + 1..4).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Ok(x)
}

/// Bjontegaard deltas of `test` against `anchor` for one quality measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdPair {
    /// Average rate change at equal quality, percent; negative is a saving.
    pub rate_percent: f64,
    /// Average quality change at equal rate, dB.
    pub quality_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdResult {
    pub y: BdPair,
    pub yuv: BdPair,
    /// Non-monotone curves are reported here and processed as given.
    pub warnings: Vec<String>,
}

/// Classic cubic-fit Bjontegaard metrics over PSNR-Y and PSNR-YUV.
pub fn bd_metrics(anchor: &RDCurve, test: &RDCurve) -> Result<BdResult> {
    let mut warnings = Vec::new();
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::Contract(format!(
                "curve {} has {} points, BD needs at least 4",
                c.label,
                c.points.len()
            )));
        }
        for (name, q) in [("PSNR-Y", psnr_y as fn(&RDPoint) -> f64), ("PSNR-YUV", psnr_yuv)] {
            if c.points.windows(2).any(|w| q(&w[0]) >= q(&w[1])) {
                warnings.push(format!("curve {}: {name} not increasing with rate", c.label));
            }
        }
    }
    let pair = |q: fn(&RDPoint) -> f64, what: &'static str| -> Result<BdPair> {
        let ra: Vec<f64> = anchor.points.iter().map(|p| p.bpp.log10()).collect();
        let rt: Vec<f64> = test.points.iter().map(|p| p.bpp.log10()).collect();
        let qa: Vec<f64> = anchor.points.iter().map(q).collect();
        let qt: Vec<f64> = test.points.iter().map(q).collect();
        Ok(BdPair {
            rate_percent: bd_rate(&ra, &qa, &rt, &qt, what)?,
            quality_db: bd_quality(&ra, &qa, &rt, &qt)?,
        })
    };
    Ok(BdResult {
        y: pair(psnr_y, "PSNR-Y")?,
        yuv: pair(psnr_yuv, "PSNR-YUV")?,
        warnings,
    })
}

fn psnr_y(p: &RDPoint) -> f64 {
    p.psnr_y
}

fn psnr_yuv(p: &RDPoint) -> f64 {
    p.psnr_yuv
}

fn overlap(a: &[f64], b: &[f64], what: &'static str) -> Result<(f64, f64)> {
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(a).max(min(b));
    let hi = max(a).min(max(b));
    if lo >= hi {
        return Err(Error::NoOverlap(what));
    }
    Ok((lo, hi))
}

/// BD-rate in percent from log10 rates and qualities.
pub fn bd_rate(
    log_rate_anchor: &[f64],
    quality_anchor: &[f64],
    log_rate_test: &[f64],
    quality_test: &[f64],
    what: &'static str,
) -> Result<f64> {
    let (lo, hi) = overlap(quality_anchor, quality_test, what)?;
    let fa = CubicFit::fit(quality_anchor, log_rate_anchor)?;
    let ft = CubicFit::fit(quality_test, log_rate_test)?;
    let delta = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(delta) - 1.0) * 100.0)
}

/// BD-quality in dB from log10 rates and qualities.
pub fn bd_quality(
    log_rate_anchor: &[f64],
    quality_anchor: &[f64],
    log_rate_test: &[f64],
    quality_test: &[f64],
) -> Result<f64> {
    let (lo, hi) = overlap(log_rate_anchor, log_rate_test, "rate")?;
    let fa = CubicFit::fit(log_rate_anchor, quality_anchor)?;
    let ft = CubicFit::fit(log_rate_test, quality_test)?;
    Ok((ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo))
}

/// Formats with 6 significant digits, plain decimal notation when sensible.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    // exponent after rounding to 6 digits, so 9.9999996 becomes 10.0000
    let sci = format!("{:.5e}", x.abs());
    let mag: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-4..=14).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

const RD_HEADER: &str = "label,bpp,psnr_y,psnr_yuv,enc_s,dec_s";

pub fn rd_curves_to_csv(curves: &[RDCurve]) -> String {
    let mut s = String::from(RD_HEADER);
    s.push('\n');
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.label,
                format_sig6(p.bpp),
                format_sig6(p.psnr_y),
                format_sig6(p.psnr_yuv),
                format_sig6(p.encode_seconds),
                format_sig6(p.decode_seconds)
            );
        }
    }
    s
}

/// Parses RD CSV text. Columns are found by header name; `label`, `bpp` and
/// `psnr_y` are required, `psnr_yuv` defaults to `psnr_y` and timings to 0.
/// Rows without a label column form one curve named `default_label`.
pub fn parse_rd_csv(text: &str, default_label: &str) -> Result<Vec<RDCurve>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty RD csv".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let bpp = col("bpp").ok_or_else(|| Error::Parse("RD csv lacks a bpp column".into()))?;
    let y = col("psnr_y").ok_or_else(|| Error::Parse("RD csv lacks a psnr_y column".into()))?;
    let (label, yuv, enc, dec) = (col("label"), col("psnr_yuv"), col("enc_s"), col("dec_s"));

    let mut groups: Vec<(String, Vec<RDPoint>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != header.len() {
            return Err(Error::Parse(format!(
                "RD csv row {}: {} fields, header has {}",
                i + 1,
                f.len(),
                header.len()
            )));
        }
        let num = |c: usize| -> Result<f64> {
            f[c].parse()
                .map_err(|_| Error::Parse(format!("RD csv row {}: bad number '{}'", i + 1, f[c])))
        };
        let p = RDPoint {
            bpp: num(bpp)?,
            psnr_y: num(y)?,
            psnr_yuv: yuv.map_or_else(|| num(y), num)?,
            encode_seconds: enc.map_or(Ok(0.0), num)?,
            decode_seconds: dec.map_or(Ok(0.0), num)?,
        };
        let name = label.map_or(default_label, |c| f[c]).to_string();
        match groups.iter_mut().find(|g| g.0 == name) {
            Some(g) => g.1.push(p),
            None => groups.push((name, vec![p])),
        }
    }
    groups
        .into_iter()
        .map(|(l, pts)| RDCurve::new(l, pts))
        .collect()
}

/// BD results of one test curve against one anchor.
#[derive(Clone, Debug)]
pub struct BdEntry {
    pub anchor: String,
    pub test: String,
    pub result: BdResult,
}

pub fn bd_summary_csv(entries: &[BdEntry]) -> String {
    let mut s = String::from(
        "anchor,test,bd_rate_y_pct,bd_quality_y_db,bd_rate_yuv_pct,bd_quality_yuv_db\n",
    );
    for e in entries {
        let r = &e.result;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.anchor,
            e.test,
            format_sig6(r.y.rate_percent),
            format_sig6(r.y.quality_db),
            format_sig6(r.yuv.rate_percent),
            format_sig6(r.yuv.quality_db)
        );
    }
    s
}

/// A reconstruction to render as a per-point error map.
#[derive(Clone, Debug)]
pub struct DistortionMap {
    pub name: String,
    pub reference: VoxelizedFrame,
    pub reconstruction: VoxelizedFrame,
}

/// Largest possible RGB error norm, `255 * sqrt(3)`.
pub fn max_rgb_error() -> f64 {
    255.0 * 3f64.sqrt()
}

/// Gray level for an error norm: 0 is black, the largest possible error white.
pub fn error_gray(norm: f64) -> u8 {
    (norm / max_rgb_error() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a distortion map PLY: reference geometry, grayscale error colors
/// and the raw norm as a `distortion` property.
pub fn write_distortion_map(map: &DistortionMap, path: &Path) -> Result<Vec<f64>> {
    let norms = distortion_norms(&map.reference, &map.reconstruction)?;
    let geometry = map.reference.canonicalized();
    let colors = norms.iter().map(|&n| [error_gray(n); 3]).collect();
    let frame = geometry.with_colors(colors)?;
    write_ply_with_scalar(&frame, "distortion", &norms, path, PlyFormat::Ascii)?;
    Ok(norms)
}

/// PSNR-Y versus bpp.
pub fn rd_svg(curves: &[RDCurve]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = curves.iter().flat_map(|c| &c.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr_y);
        y1 = y1.max(p.psnr_y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a > 0.0 { (b - a) * 0.05 } else { 0.5 };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let (x0, x1, y0, y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} V{} H{}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            H - M + 18.0,
            format_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            M - 6.0,
            sy(yv) + 4.0,
            format_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">bpp</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">PSNR-Y (dB)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr_y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            path.join(" ")
        );
        for p in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(p.bpp),
                sy(p.psnr_y)
            );
        }
        let ly = M + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
            W - M - 140.0,
            xml_escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub rd_curve: PathBuf,
    pub bd_summary: PathBuf,
    pub plot: PathBuf,
    pub distortion_maps: Vec<PathBuf>,
}

pub fn emit_report(
    curves: &[RDCurve],
    bd: &[BdEntry],
    maps: &[DistortionMap],
    dir: &Path,
) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        rd_curve: dir.join("rd_curve.csv"),
        bd_summary: dir.join("bd_summary.csv"),
        plot: dir.join("rd_curve.svg"),
        distortion_maps: maps
            .iter()
            .map(|m| dir.join(format!("distortion_{}.ply", m.name)))
            .collect(),
    };
    fs::write(&files.rd_curve, rd_curves_to_csv(curves))?;
    fs::write(&files.bd_summary, bd_summary_csv(bd))?;
    fs::write(&files.plot, rd_svg(curves))?;
    for (m, p) in maps.iter().zip(&files.distortion_maps) {
        write_distortion_map(m, p)?;
    }
    Ok(files)
}
