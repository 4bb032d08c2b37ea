//! Classical gap fillers used as reference points.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::masks::Mask;
use crate::tensor::{Real, Tensor4};

/// Polynomial regression of a target band on an auxiliary band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Coefficients in ascending powers of the auxiliary value.
    pub coeffs: Vec<f64>,
    /// Root-mean-square residual over the fitted pixels.
    pub rms: f64,
}

impl LinearFit {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn intercept(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn slope(&self) -> f64 {
        self.coeffs.get(1).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * v + c)
    }
}

/// Solve a small dense system with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Least-squares fit of `target` on `aux` over the valid pixels of `mask`.
///
/// The regressor is centred and scaled before solving; coefficients are
/// returned in the raw basis.
pub fn lf_fit<T: Real>(aux: &[T], target: &[T], mask: &Mask, degree: usize) -> Result<LinearFit> {
    if aux.len() != target.len() {
        return Err(StsError::shape("lf_fit target", "pixels", aux.len(), target.len()));
    }
    if mask.data().len() != aux.len() {
        return Err(StsError::shape("lf_fit mask", "pixels", aux.len(), mask.data().len()));
    }
    if degree == 0 {
        return Err(StsError::Argument("fit degree must be at least 1".into()));
    }
    let pts: Vec<(f64, f64)> = (0..aux.len())
        .filter(|&i| mask.is_valid_at(i))
        .map(|i| (aux[i].as_f64(), target[i].as_f64()))
        .collect();
    if pts.len() < degree + 1 {
        return Err(StsError::Argument(format!(
            "degenerate regressor: {} valid pixels for degree {degree}",
            pts.len()
        )));
    }
    let k = pts.len() as f64;
    let mean = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let spread = (pts.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / k).sqrt();
    if spread <= 1e-12 * mean.abs().max(f64::MIN_POSITIVE) {
        return Err(StsError::Argument(
            "degenerate regressor: auxiliary band is constant".into(),
        ));
    }

    let coeffs = if degree == 1 {
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mean) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mean).powi(2)).sum();
        let a = sxy / sxx;
        vec![my - a * mean, a]
    } else {
        let m = degree + 1;
        let mut ata = vec![vec![0.0; m]; m];
        let mut atb = vec![0.0; m];
        for &(u, v) in &pts {
            let t = (u - mean) / spread;
            let pows: Vec<f64> = (0..m).map(|p| t.powi(p as i32)).collect();
            for r in 0..m {
                atb[r] += pows[r] * v;
                for c in 0..m {
                    ata[r][c] += pows[r] * pows[c];
                }
            }
        }
        let scaled = solve(ata, atb)
            .ok_or_else(|| StsError::Argument("degenerate regressor: singular normal equations".into()))?;
        // expand Σ c_p ((u − mean)/spread)^p into powers of u
        let mut raw = vec![0.0; m];
        for (p, c) in scaled.iter().enumerate() {
            let f = c / spread.powi(p as i32);
            for q in 0..=p {
                raw[q] += f * binomial(p, q) * (-mean).powi((p - q) as i32);
            }
        }
        raw
    };
    let mut fit = LinearFit { coeffs, rms: 0.0 };
    fit.rms = (pts.iter().map(|&(u, v)| (fit.eval(u) - v).powi(2)).sum::<f64>() / k).sqrt();
    if !fit.rms.is_finite() || fit.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(StsError::NonFinite("lf_fit coefficients".into()));
    }
    Ok(fit)
}

fn check_triplet<T: Real>(y1: &Tensor4<T>, y2: &Tensor4<T>, mask: &Mask, what: &str) -> Result<()> {
    let s = y1.shape();
    y2.shape().expect_eq(&s, &format!("{what} y2"))?;
    mask.expect_dims(s.h, s.w, &format!("{what} mask"))
}

/// Fill each band's gaps with a polynomial of the auxiliary band fitted on
/// the observed pixels. Returns the reconstruction and the per-band fits.
pub fn lf_reconstruct<T: Real>(
    y1: &Tensor4<T>,
    y2: &Tensor4<T>,
    mask: &Mask,
    degree: usize,
) -> Result<(Tensor4<T>, Vec<LinearFit>)> {
    check_triplet(y1, y2, mask, "lf_reconstruct")?;
    let s = y1.shape();
    let mut out = y1.clone();
    let mut fits = Vec::with_capacity(s.n * s.c);
    if mask.is_all_valid() {
        return Ok((out, fits));
    }
    for n in 0..s.n {
        for c in 0..s.c {
            let fit = lf_fit(y2.plane(n, c), y1.plane(n, c), mask, degree)?;
            let aux = y2.plane(n, c);
            for (i, v) in out.plane_mut(n, c).iter_mut().enumerate() {
                if !mask.is_valid_at(i) {
                    *v = T::of(fit.eval(aux[i].as_f64()));
                }
            }
            fits.push(fit);
        }
    }
    Ok((out, fits))
}

/// Copy the auxiliary image into the gaps unchanged.
pub fn copy_fill<T: Real>(y1: &Tensor4<T>, y2: &Tensor4<T>, mask: &Mask) -> Result<Tensor4<T>> {
    check_triplet(y1, y2, mask, "copy_fill")?;
    let s = y1.shape();
    let mut out = y1.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let aux = y2.plane(n, c);
            for (i, v) in out.plane_mut(n, c).iter_mut().enumerate() {
                if !mask.is_valid_at(i) {
                    *v = aux[i];
                }
            }
        }
    }
    Ok(out)
}
