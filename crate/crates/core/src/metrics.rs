//! Image quality metrics: PSNR, SSIM, Pearson correlation and spectral angle.
//!
//! Every metric can be restricted to the gap region of a mask. PSNR, CC and
//! SAM then use only missing pixels; SSIM averages the local map over windows
//! whose centre pixel is missing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::masks::Mask;
use crate::tensor::{Real, Tensor4};

/// Which pixels a metric is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    GapOnly,
}

impl Scope {
    pub fn label(self) -> &'static str {
        match self {
            Scope::Full => "full",
            Scope::GapOnly => "gap_only",
        }
    }

    fn region(self, mask: &Mask) -> Option<&Mask> {
        match self {
            Scope::Full => None,
            Scope::GapOnly => Some(mask),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn in_scope(gap: Option<&Mask>, idx: usize) -> bool {
    gap.is_none_or(|m| !m.is_valid_at(idx))
}

fn check_plane<T: Real>(x: &[T], y: &[T], gap: Option<&Mask>, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(StsError::shape(what, "pixels", x.len(), y.len()));
    }
    if let Some(m) = gap {
        if m.data().len() != x.len() {
            return Err(StsError::shape(
                format!("{what} scope mask"),
                "pixels",
                x.len(),
                m.data().len(),
            ));
        }
    }
    Ok(())
}

/// Mean squared error over the scoped pixels of one band.
pub fn mse<T: Real>(x: &[T], y: &[T], gap: Option<&Mask>) -> Result<f64> {
    check_plane(x, y, gap, "mse")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        if in_scope(gap, i) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(StsError::UndefinedMetric("empty scope region".into()));
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the bands are identical.
pub fn psnr<T: Real>(x: &[T], y: &[T], peak: f64, gap: Option<&Mask>) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(StsError::Argument(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(x, y, gap)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `h×w` plane with `taps` on both axes.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(u, t)| t * rows[(y + u) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM map over all fully contained `11×11` windows, row-major
/// `(h−10)×(w−10)`.
pub fn ssim_map<T: Real>(x: &[T], y: &[T], h: usize, w: usize, peak: f64) -> Result<Vec<f64>> {
    check_plane(x, y, None, "ssim")?;
    if x.len() != h * w {
        return Err(StsError::shape("ssim", "pixels", h * w, x.len()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(StsError::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xf: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let yf: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = xf.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yf.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xf.iter().zip(&yf).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&xf, h, w, &taps);
    let my = filter_valid(&yf, h, w, &taps);
    let sxx = filter_valid(&xx, h, w, &taps);
    let syy = filter_valid(&yy, h, w, &taps);
    let sxy = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    Ok((0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean structural similarity of one band.
pub fn ssim<T: Real>(x: &[T], y: &[T], h: usize, w: usize, peak: f64, gap: Option<&Mask>) -> Result<f64> {
    let map = ssim_map(x, y, h, w, peak)?;
    let half = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, v) in map.iter().enumerate() {
        let centre = (i / ow + half) * w + i % ow + half;
        if in_scope(gap, centre) {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(StsError::UndefinedMetric("no ssim window centred in scope".into()));
    }
    Ok(sum / count as f64)
}

/// Pearson correlation over scoped pixels, pooled across all bands and batch items.
pub fn cc<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, gap: Option<&Mask>) -> Result<f64> {
    let s = x.shape();
    y.shape().expect_eq(&s, "cc")?;
    if let Some(m) = gap {
        m.expect_dims(s.h, s.w, "cc scope mask")?;
    }
    let mut pairs = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for (i, (a, b)) in x.plane(n, c).iter().zip(y.plane(n, c)).enumerate() {
                if in_scope(gap, i) {
                    pairs.push((a.as_f64(), b.as_f64()));
                }
            }
        }
    }
    if pairs.len() < 2 {
        return Err(StsError::UndefinedMetric("cc needs at least two pixels".into()));
    }
    let k = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / k;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StsError::UndefinedMetric("cc of a constant signal".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Result of a spectral angle computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralAngle {
    /// Mean angle in degrees over the evaluated pixels.
    pub mean_deg: f64,
    pub evaluated: usize,
    /// Pixels skipped because either spectral vector was zero.
    pub skipped: usize,
}

/// Mean spectral angle between per-pixel band vectors, in degrees.
pub fn sam<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, gap: Option<&Mask>) -> Result<SpectralAngle> {
    let s = x.shape();
    y.shape().expect_eq(&s, "sam")?;
    if s.c < 2 {
        return Err(StsError::Argument(format!("sam needs at least 2 bands, got {}", s.c)));
    }
    if let Some(m) = gap {
        m.expect_dims(s.h, s.w, "sam scope mask")?;
    }
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for n in 0..s.n {
        for i in 0..s.plane() {
            if !in_scope(gap, i) {
                continue;
            }
            let (mut nx, mut ny) = (0.0, 0.0);
            for c in 0..s.c {
                nx += x.plane(n, c)[i].as_f64().powi(2);
                ny += y.plane(n, c)[i].as_f64().powi(2);
            }
            if nx == 0.0 || ny == 0.0 {
                skipped += 1;
                continue;
            }
            let (nx, ny) = (nx.sqrt(), ny.sqrt());
            let (mut diff, mut sum_sq) = (0.0, 0.0);
            for c in 0..s.c {
                let a = x.plane(n, c)[i].as_f64() / nx;
                let b = y.plane(n, c)[i].as_f64() / ny;
                diff += (a - b) * (a - b);
                sum_sq += (a + b) * (a + b);
            }
            sum += (2.0 * diff.sqrt().atan2(sum_sq.sqrt())).to_degrees();
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(StsError::UndefinedMetric("all spectral vectors are zero".into()));
    }
    Ok(SpectralAngle {
        mean_deg: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: usize,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub cc: f64,
}

/// Per-band and scene-level quality of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: Scope,
    /// Peak value `L` used by PSNR and SSIM.
    pub data_range: f64,
    pub bands: Vec<BandMetrics>,
    #[serde(with = "float_or_inf")]
    pub mpsnr: f64,
    pub mssim: f64,
    pub cc_all: f64,
    /// `None` for single-band images.
    pub sam_mean: Option<f64>,
}

/// Evaluate `estimate` against `truth` (both `1×B×H×W`).
pub fn evaluate<T: Real>(
    truth: &Tensor4<T>,
    estimate: &Tensor4<T>,
    mask: &Mask,
    scope: Scope,
    peak: f64,
) -> Result<MetricsReport> {
    let s = truth.shape();
    estimate.shape().expect_eq(&s, "evaluate")?;
    if s.n != 1 {
        return Err(StsError::shape("evaluate", "batch", 1, s.n));
    }
    mask.expect_dims(s.h, s.w, "evaluate mask")?;
    let gap = scope.region(mask);
    let mut bands = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let (a, b) = (truth.plane(0, c), estimate.plane(0, c));
        let ta = truth.slice_channels(c..c + 1)?;
        let tb = estimate.slice_channels(c..c + 1)?;
        bands.push(BandMetrics {
            band: c,
            psnr: psnr(a, b, peak, gap)?,
            ssim: ssim(a, b, s.h, s.w, peak, gap)?,
            cc: cc(&ta, &tb, gap)?,
        });
    }
    let k = s.c as f64;
    let sam_mean = if s.c >= 2 {
        Some(sam(truth, estimate, gap)?.mean_deg)
    } else {
        None
    };
    Ok(MetricsReport {
        scope,
        data_range: peak,
        mpsnr: bands.iter().map(|b| b.psnr).sum::<f64>() / k,
        mssim: bands.iter().map(|b| b.ssim).sum::<f64>() / k,
        cc_all: cc(truth, estimate, gap)?,
        sam_mean,
        bands,
    })
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub scope: Scope,
    /// Band index, or `all` for the scene-level row.
    pub band: String,
    pub psnr: f64,
    pub ssim: f64,
    pub cc: f64,
    /// Empty on per-band rows.
    pub sam: Option<f64>,
    pub shift: i32,
    pub seed: u64,
}

pub const METRICS_CSV_HEADER: [&str; 9] = ["method", "scope", "band", "psnr", "ssim", "cc", "sam", "shift", "seed"];

impl MetricsReport {
    /// Per-band rows followed by one `all` row.
    pub fn rows(&self, method: &str, shift: i32, seed: u64) -> Vec<MetricsRow> {
        let mut rows: Vec<MetricsRow> = self
            .bands
            .iter()
            .map(|b| MetricsRow {
                method: method.to_string(),
                scope: self.scope,
                band: b.band.to_string(),
                psnr: b.psnr,
                ssim: b.ssim,
                cc: b.cc,
                sam: None,
                shift,
                seed,
            })
            .collect();
        rows.push(MetricsRow {
            method: method.to_string(),
            scope: self.scope,
            band: "all".into(),
            psnr: self.mpsnr,
            ssim: self.mssim,
            cc: self.cc_all,
            sam: self.sam_mean,
            shift,
            seed,
        });
        rows
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(METRICS_CSV_HEADER) {
        return Err(StsError::format(
            "metrics csv header",
            format!("unexpected columns {headers:?}"),
        ));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub(crate) fn csv_error(e: csv::Error) -> StsError {
    StsError::format("csv", e.to_string())
}

/// JSON has no infinity; identical images store PSNR as the string `"inf"`.
mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
