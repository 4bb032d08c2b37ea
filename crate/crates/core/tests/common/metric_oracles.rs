//! Naive metric implementations written straight from the definitions.

use super::rng;
use rand::Rng;
use stscnn::masks::{gen_cloud_mask, Mask};
use stscnn::{Shape, Tensor4};

pub fn pair(seed: u64, bands: usize, h: usize, w: usize) -> (Tensor4<f64>, Tensor4<f64>) {
    let mut r = rng(seed);
    let s = Shape::new(1, bands, h, w);
    let x = Tensor4::from_fn(s, |_, _, _, _| r.random_range(0.0..1.0));
    let noise: f64 = r.random_range(0.01..0.3);
    let y = Tensor4::from_fn(s, |_, c, i, j| {
        (x.get(0, c, i, j) + noise * r.random_range(-1.0..1.0)).max(0.0)
    });
    (x, y)
}

pub fn scope_mask(seed: u64, h: usize, w: usize) -> Mask {
    gen_cloud_mask(h, w, 0.3, 2.0, seed).unwrap()
}

pub fn in_gap(m: Option<&Mask>, y: usize, x: usize) -> bool {
    m.is_none_or(|m| !m.is_valid(y, x))
}

pub fn naive_psnr(x: &Tensor4<f64>, y: &Tensor4<f64>, c: usize, peak: f64, m: Option<&Mask>) -> f64 {
    let s = x.shape();
    let (mut sum, mut n) = (0.0, 0.0);
    for i in 0..s.h {
        for j in 0..s.w {
            if in_gap(m, i, j) {
                sum += (x.get(0, c, i, j) - y.get(0, c, i, j)).powi(2);
                n += 1.0;
            }
        }
    }
    10.0 * (peak * peak / (sum / n)).log10()
}

/// Direct 2-D Gaussian window statistics at every valid window position.
pub fn naive_ssim(x: &Tensor4<f64>, y: &Tensor4<f64>, c: usize, peak: f64, m: Option<&Mask>) -> f64 {
    let s = x.shape();
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in g.iter_mut().enumerate() {
        for (v, val) in row.iter_mut().enumerate() {
            let d2 = ((u as f64 - 5.0).powi(2) + (v as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *val = (-d2).exp();
            total += *val;
        }
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (mut acc, mut count) = (0.0, 0.0);
    for i in 0..=s.h - 11 {
        for j in 0..=s.w - 11 {
            if !in_gap(m, i + 5, j + 5) {
                continue;
            }
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wgt = g[u][v] / total;
                    mx += wgt * x.get(0, c, i + u, j + v);
                    my += wgt * y.get(0, c, i + u, j + v);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wgt = g[u][v] / total;
                    let a = x.get(0, c, i + u, j + v) - mx;
                    let b = y.get(0, c, i + u, j + v) - my;
                    vx += wgt * a * a;
                    vy += wgt * b * b;
                    cov += wgt * a * b;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    acc / count
}

pub fn naive_cc(x: &Tensor4<f64>, y: &Tensor4<f64>, m: Option<&Mask>) -> f64 {
    let s = x.shape();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                if in_gap(m, i, j) {
                    a.push(x.get(0, c, i, j));
                    b.push(y.get(0, c, i, j));
                }
            }
        }
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn naive_sam(x: &Tensor4<f64>, y: &Tensor4<f64>, m: Option<&Mask>) -> f64 {
    let s = x.shape();
    let (mut acc, mut n) = (0.0, 0.0);
    for i in 0..s.h {
        for j in 0..s.w {
            if !in_gap(m, i, j) {
                continue;
            }
            let p: Vec<f64> = (0..s.c).map(|c| x.get(0, c, i, j)).collect();
            let q: Vec<f64> = (0..s.c).map(|c| y.get(0, c, i, j)).collect();
            let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            if np == 0.0 || nq == 0.0 {
                continue;
            }
            acc += (dot / (np * nq)).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
            n += 1.0;
        }
    }
    acc / n
}
