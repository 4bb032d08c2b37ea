//! Validity masks and simulators for the three degradation patterns:
//! periodic dead detector lines, SLC-off wedge gaps, and thick cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::tensor::{Real, Shape, Tensor4};

/// Single-channel binary raster, 1 = observed, 0 = missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(StsError::Argument("mask dimensions must be positive".into()));
        }
        if data.len() != h * w {
            return Err(StsError::shape("mask data", "length", h * w, data.len()));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(StsError::Argument(format!("mask value {bad} is not binary")));
        }
        Ok(Mask { h, w, data })
    }

    pub fn all_valid(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn all_missing(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut valid: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(valid(y, x) as u8);
            }
        }
        Mask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    #[inline]
    pub fn is_valid_at(&self, idx: usize) -> bool {
        self.data[idx] == 1
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Fraction of missing pixels.
    pub fn coverage(&self) -> f64 {
        self.missing_count() as f64 / self.data.len() as f64
    }

    pub fn is_all_valid(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    pub fn is_all_missing(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// The mask as a `1×1×H×W` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let data = self
            .data
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor4::new(Shape::new(1, 1, self.h, self.w), data).expect("mask shape is consistent")
    }

    /// Accepts a single-channel, batch-of-one tensor holding only 0 and 1.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(StsError::shape("mask tensor", "batch", 1, s.n));
        }
        if s.c != 1 {
            return Err(StsError::shape("mask tensor", "channels", 1, s.c));
        }
        let mut data = Vec::with_capacity(s.plane());
        for &v in t.data() {
            if v == T::one() {
                data.push(1);
            } else if v == T::zero() {
                data.push(0);
            } else {
                return Err(StsError::Argument(format!("mask tensor value {v:?} is not binary")));
            }
        }
        Mask::new(s.h, s.w, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.h || x0 + w > self.w {
            return Err(StsError::Argument(format!(
                "mask crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.h, self.w
            )));
        }
        Ok(Mask::from_fn(h, w, |y, x| self.is_valid(y0 + y, x0 + x)))
    }

    pub fn expect_dims(&self, h: usize, w: usize, context: &str) -> Result<()> {
        if self.h != h {
            return Err(StsError::shape(context, "height", h, self.h));
        }
        if self.w != w {
            return Err(StsError::shape(context, "width", w, self.w));
        }
        Ok(())
    }

    /// Edges between a missing pixel and an observed 4-neighbour, divided by the
    /// number of missing pixels. Smaller means rounder, smoother gaps.
    pub fn perimeter_area_ratio(&self) -> f64 {
        let missing = self.missing_count();
        if missing == 0 {
            return 0.0;
        }
        let mut edges = 0usize;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_valid(y, x) {
                    continue;
                }
                let neighbours = [
                    (y > 0).then(|| (y - 1, x)),
                    (y + 1 < self.h).then_some((y + 1, x)),
                    (x > 0).then(|| (y, x - 1)),
                    (x + 1 < self.w).then_some((y, x + 1)),
                ];
                edges += neighbours
                    .iter()
                    .flatten()
                    .filter(|&&(ny, nx)| self.is_valid(ny, nx))
                    .count();
            }
        }
        edges as f64 / missing as f64
    }
}

/// Rows `r` with `(r − phase) mod period < stripe_width` are missing.
pub fn gen_stripe_mask(h: usize, w: usize, period: usize, stripe_width: usize, phase: usize) -> Result<Mask> {
    if stripe_width == 0 {
        return Err(StsError::Argument("stripe width must be at least 1".into()));
    }
    if stripe_width >= period {
        return Err(StsError::Argument(format!(
            "stripe width {stripe_width} must be smaller than period {period}"
        )));
    }
    if period > h {
        return Err(StsError::Argument(format!("stripe period {period} exceeds height {h}")));
    }
    if w == 0 {
        return Err(StsError::Argument("mask width must be positive".into()));
    }
    let period_i = period as isize;
    Ok(Mask::from_fn(h, w, |y, _| {
        (y as isize - phase as isize).rem_euclid(period_i) >= stripe_width as isize
    }))
}

/// Geometry of the simulated SLC-off gap pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlcOffGeometry {
    /// Half-width in columns of the fully observed central band.
    #[serde(default = "SlcOffGeometry::default_center_band")]
    pub center_band: usize,
    /// Gap width in rows reached at the left and right scene edges.
    #[serde(default = "SlcOffGeometry::default_max_gap")]
    pub max_gap: usize,
    /// Row period of the gap stripes.
    #[serde(default = "SlcOffGeometry::default_period")]
    pub period: usize,
    /// Slant of the stripes against the row axis.
    #[serde(default = "SlcOffGeometry::default_angle")]
    pub angle_deg: f64,
    #[serde(default)]
    pub phase: usize,
}

impl SlcOffGeometry {
    fn default_center_band() -> usize {
        10
    }
    fn default_max_gap() -> usize {
        10
    }
    fn default_period() -> usize {
        33
    }
    fn default_angle() -> f64 {
        8.0
    }
}

impl Default for SlcOffGeometry {
    fn default() -> Self {
        SlcOffGeometry {
            center_band: Self::default_center_band(),
            max_gap: Self::default_max_gap(),
            period: Self::default_period(),
            angle_deg: Self::default_angle(),
            phase: 0,
        }
    }
}

/// Periodic slanted gap stripes whose width grows linearly from zero at the
/// vertical centerline to `max_gap` at the left and right edges.
pub fn gen_slcoff_mask(h: usize, w: usize, geom: &SlcOffGeometry) -> Result<Mask> {
    if geom.max_gap == 0 {
        return Err(StsError::Argument("SLC-off max gap must be at least 1".into()));
    }
    if geom.period <= geom.max_gap {
        return Err(StsError::Argument(format!(
            "SLC-off period {} must exceed max gap {}",
            geom.period, geom.max_gap
        )));
    }
    if !geom.angle_deg.is_finite() || geom.angle_deg.abs() >= 90.0 {
        return Err(StsError::Argument(format!(
            "SLC-off angle {} out of range",
            geom.angle_deg
        )));
    }
    if h == 0 || w == 0 {
        return Err(StsError::Argument("mask dimensions must be positive".into()));
    }
    let center = (w as f64 - 1.0) / 2.0;
    let ramp = center - geom.center_band as f64;
    if ramp <= 0.0 {
        return Err(StsError::Argument(format!(
            "central band {} leaves no room for gaps in width {w}",
            geom.center_band
        )));
    }
    let slope = geom.angle_deg.to_radians().tan();
    let period = geom.period as f64;
    let mask = Mask::from_fn(h, w, |y, x| {
        let dist = (x as f64 - center).abs() - geom.center_band as f64;
        let gap = geom.max_gap as f64 * (dist / ramp).clamp(0.0, 1.0);
        let pos = (y as f64 + geom.phase as f64 - x as f64 * slope).rem_euclid(period);
        pos >= gap
    });
    if mask.is_all_valid() {
        return Err(StsError::Argument("SLC-off geometry produced no gaps".into()));
    }
    Ok(mask)
}

fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &field[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                s += row[clamp(x as isize + k, w)];
            }
            tmp[y * w + x] = s * norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                s += tmp[clamp(y as isize + k, h) * w + x];
            }
            out[y * w + x] = s * norm;
        }
    }
    out
}

/// Seeded white noise smoothed by three box-filter passes of the given radius.
pub(crate) fn smooth_noise(h: usize, w: usize, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    for _ in 0..3 {
        field = box_blur(&field, h, w, radius);
    }
    field
}

const CLOUD_TOLERANCE: f64 = 0.01;
const CLOUD_THRESHOLD_ITERS: usize = 20;

/// Thresholded smooth random field with roughly `target_coverage` missing.
pub fn gen_cloud_mask(h: usize, w: usize, target_coverage: f64, smoothness: f64, seed: u64) -> Result<Mask> {
    if !(target_coverage > 0.0 && target_coverage < 0.5) {
        return Err(StsError::Argument(format!(
            "cloud coverage must lie in (0, 0.5), got {target_coverage}"
        )));
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(StsError::Argument(format!(
            "cloud smoothness must be non-negative, got {smoothness}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(StsError::Argument("mask dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = smooth_noise(h, w, smoothness.round() as usize, &mut rng);
    let n = field.len() as f64;
    let covered = |t: f64| field.iter().filter(|&&v| v > t).count() as f64 / n;

    let (mut lo, mut hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut best = (f64::INFINITY, hi);
    for _ in 0..CLOUD_THRESHOLD_ITERS {
        let mid = 0.5 * (lo + hi);
        let c = covered(mid);
        let err = (c - target_coverage).abs();
        if err < best.0 {
            best = (err, mid);
        }
        if c > target_coverage {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CLOUD_TOLERANCE {
        return Err(StsError::Argument(format!(
            "cloud coverage {target_coverage} unreachable (closest miss {:.4})",
            best.0
        )));
    }
    let threshold = best.1;
    let data = field.iter().map(|&v| (v <= threshold) as u8).collect();
    Mask::new(h, w, data)
}

/// A pixel is valid only if it is valid in both masks.
pub fn combine_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    b.expect_dims(a.h, a.w, "combine masks")?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x & y).collect();
    Ok(Mask { h: a.h, w: a.w, data })
}

/// `x` where valid, `fill` in every band where missing.
pub fn apply_mask<T: Real>(x: &Tensor4<T>, mask: &Mask, fill: T) -> Result<Tensor4<T>> {
    let s = x.shape();
    mask.expect_dims(s.h, s.w, "apply mask")?;
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for (i, v) in out.plane_mut(n, c).iter_mut().enumerate() {
                if !mask.is_valid_at(i) {
                    *v = fill;
                }
            }
        }
    }
    Ok(out)
}

/// Integer translation by `dx` columns and `dy` rows with edge replication.
pub fn shift_image<T: Real>(x: &Tensor4<T>, dx: i32, dy: i32) -> Tensor4<T> {
    let s = x.shape();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    Tensor4::from_fn(s, |n, c, y, xx| {
        x.get(
            n,
            c,
            clamp(y as i64 - dy as i64, s.h),
            clamp(xx as i64 - dx as i64, s.w),
        )
    })
}

/// Declarative description of a degradation pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    ModisStripes {
        #[serde(default = "default_stripe_period")]
        period: usize,
        #[serde(default = "default_stripe_width")]
        stripe_width: usize,
        /// Fixed phase; drawn from the seed when absent.
        #[serde(default)]
        phase: Option<usize>,
    },
    SlcOff {
        #[serde(default)]
        geometry: SlcOffGeometry,
    },
    Cloud {
        coverage: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
    },
    CloudPlusSlc {
        coverage: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
        #[serde(default)]
        geometry: SlcOffGeometry,
    },
}

fn default_stripe_period() -> usize {
    4
}
fn default_stripe_width() -> usize {
    1
}
fn default_smoothness() -> f64 {
    6.0
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::ModisStripes {
            period: default_stripe_period(),
            stripe_width: default_stripe_width(),
            phase: None,
        }
    }
}

impl MaskSpec {
    pub fn generate(&self, h: usize, w: usize, seed: u64) -> Result<Mask> {
        match self {
            MaskSpec::ModisStripes {
                period,
                stripe_width,
                phase,
            } => {
                let phase = match phase {
                    Some(p) => *p,
                    None => ChaCha8Rng::seed_from_u64(seed).random_range(0..*period.max(&1)),
                };
                gen_stripe_mask(h, w, *period, *stripe_width, phase)
            }
            MaskSpec::SlcOff { geometry } => gen_slcoff_mask(h, w, geometry),
            MaskSpec::Cloud { coverage, smoothness } => gen_cloud_mask(h, w, *coverage, *smoothness, seed),
            MaskSpec::CloudPlusSlc {
                coverage,
                smoothness,
                geometry,
            } => {
                let cloud = gen_cloud_mask(h, w, *coverage, *smoothness, seed)?;
                combine_masks(&cloud, &gen_slcoff_mask(h, w, geometry)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripe_rows_and_coverage() {
        let m = gen_stripe_mask(8, 5, 4, 1, 0).unwrap();
        for y in 0..8 {
            assert_eq!(m.is_valid(y, 2), y != 0 && y != 4, "row {y}");
        }
        assert_eq!(m.coverage(), 2.0 / 8.0);
    }

    #[test]
    fn stripe_count_400_rows() {
        let m = gen_stripe_mask(400, 3, 4, 1, 0).unwrap();
        let missing_rows = (0..400).filter(|&y| !m.is_valid(y, 0)).count();
        assert_eq!(missing_rows, 100);
    }

    #[test]
    fn stripe_argument_errors() {
        assert!(gen_stripe_mask(8, 8, 4, 0, 0).is_err());
        assert!(gen_stripe_mask(8, 8, 4, 4, 0).is_err());
        assert!(gen_stripe_mask(3, 8, 4, 1, 0).is_err());
    }

    #[test]
    fn stripe_phase_shifts_rows() {
        let m = gen_stripe_mask(8, 1, 4, 1, 1).unwrap();
        assert!(!m.is_valid(1, 0) && !m.is_valid(5, 0));
        assert!(m.is_valid(0, 0));
    }

    #[test]
    fn slcoff_centerline_column_valid() {
        let geom = SlcOffGeometry {
            center_band: 0,
            ..Default::default()
        };
        let m = gen_slcoff_mask(101, 101, &geom).unwrap();
        assert!((0..101).all(|y| m.is_valid(y, 50)));
        assert!((0..101).any(|y| !m.is_valid(y, 0)));
    }

    #[test]
    fn slcoff_coverage_increases_with_gap() {
        let cov: Vec<f64> = [3, 6, 10, 14]
            .iter()
            .map(|&g| {
                let geom = SlcOffGeometry {
                    max_gap: g,
                    ..Default::default()
                };
                gen_slcoff_mask(200, 200, &geom).unwrap().coverage()
            })
            .collect();
        assert!(cov.windows(2).all(|p| p[1] > p[0]), "{cov:?}");
    }

    #[test]
    fn slcoff_degenerate_period() {
        let geom = SlcOffGeometry {
            period: 10,
            max_gap: 10,
            ..Default::default()
        };
        assert!(gen_slcoff_mask(50, 50, &geom).is_err());
    }

    #[test]
    fn cloud_hits_target() {
        for seed in 0..5 {
            let m = gen_cloud_mask(128, 128, 0.15, 6.0, seed).unwrap();
            assert!((0.14..=0.16).contains(&m.coverage()), "{}", m.coverage());
        }
    }

    #[test]
    fn cloud_deterministic() {
        let a = gen_cloud_mask(64, 64, 0.2, 4.0, 11).unwrap();
        let b = gen_cloud_mask(64, 64, 0.2, 4.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cloud_rejects_bad_coverage() {
        assert!(gen_cloud_mask(32, 32, 0.0, 2.0, 1).is_err());
        assert!(gen_cloud_mask(32, 32, 0.5, 2.0, 1).is_err());
    }

    #[test]
    fn combine_identities() {
        let m = gen_stripe_mask(16, 16, 4, 1, 1).unwrap();
        let valid = Mask::all_valid(16, 16);
        assert_eq!(combine_masks(&valid, &m).unwrap(), m);
        assert_eq!(combine_masks(&m, &m).unwrap(), m);
        let c = gen_cloud_mask(16, 16, 0.3, 1.0, 2).unwrap();
        let both = combine_masks(&m, &c).unwrap();
        assert!(both.coverage() >= m.coverage().max(c.coverage()));
        assert!(combine_masks(&m, &Mask::all_valid(16, 15)).is_err());
    }

    #[test]
    fn apply_mask_fills_all_bands() {
        let x = Tensor4::<f64>::from_fn(Shape::new(1, 3, 8, 4), |_, c, y, x| (c + y + x) as f64 + 1.0);
        let m = gen_stripe_mask(8, 4, 4, 1, 0).unwrap();
        let y1 = apply_mask(&x, &m, -7.0).unwrap();
        for c in 0..3 {
            assert_eq!(y1.get(0, c, 4, 2), -7.0);
            assert_eq!(y1.get(0, c, 5, 2), x.get(0, c, 5, 2));
        }
        assert_eq!(apply_mask(&x, &Mask::all_valid(8, 4), 0.0).unwrap(), x);
    }

    #[test]
    fn shift_moves_bright_pixel() {
        let mut x = Tensor4::<f64>::zeros(Shape::new(1, 1, 9, 9));
        x.set(0, 0, 4, 3, 1.0);
        let s = shift_image(&x, 2, 0);
        assert_eq!(s.get(0, 0, 4, 5), 1.0);
        assert_eq!(s.sum(), 1.0);
        assert_eq!(shift_image(&x, 0, 0), x);
    }

    #[test]
    fn mask_spec_json_round_trip() {
        let spec = MaskSpec::CloudPlusSlc {
            coverage: 0.2,
            smoothness: 5.0,
            geometry: SlcOffGeometry::default(),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: MaskSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        let bad = r#"{"kind":"modis_stripes","period":4,"bogus":1}"#;
        assert!(serde_json::from_str::<MaskSpec>(bad).is_err());
    }
}
