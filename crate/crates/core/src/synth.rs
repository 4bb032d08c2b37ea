//! Seeded synthetic multi-band scenes with a correlated auxiliary image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::masks::smooth_noise;
use crate::tensor::{Shape, Tensor4};

/// How the auxiliary image relates to the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `aux = gain·x + offset` per band.
    Affine,
    /// Affine plus a quadratic term and an independent smooth perturbation.
    #[default]
    Nonlinear,
}

/// Blur radii of the latent texture fields shared by all bands.
const LATENT_RADII: [usize; 3] = [2, 5, 11];
const CURVATURE: f64 = 0.6;
const PERTURBATION: f64 = 0.04;
const PERTURBATION_RADIUS: usize = 3;

/// Gain and offset of band `b`. Fixed per band so a model trained on one
/// scene transfers to another.
pub fn band_gain_offset(b: usize) -> (f64, f64) {
    (0.75 + 0.05 * (b % 3) as f64, 0.08 + 0.03 * (b % 4) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Ground truth, `1×B×H×W`, values in (0, 1).
    pub x: Tensor4<f64>,
    /// Auxiliary image, same shape, values in [0, 1].
    pub aux: Tensor4<f64>,
    pub relation: Relation,
}

impl SynthScene {
    /// `(slope, intercept)` of the exact map from auxiliary to truth for
    /// band `b` under [`Relation::Affine`].
    pub fn inverse_affine(b: usize) -> (f64, f64) {
        let (g, o) = band_gain_offset(b);
        (1.0 / g, -o / g)
    }
}

fn standardized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    v
}

pub fn synth_scene(bands: usize, h: usize, w: usize, seed: u64, relation: Relation) -> Result<SynthScene> {
    if bands < 2 {
        return Err(StsError::Argument(format!(
            "synthetic scenes need at least 2 bands, got {bands}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(StsError::Argument("scene dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<f64>> = LATENT_RADII
        .iter()
        .map(|&r| standardized(smooth_noise(h, w, r, &mut rng)))
        .collect();
    let shape = Shape::new(1, bands, h, w);
    let x = Tensor4::from_fn(shape, |_, c, i, j| {
        let k = i * w + j;
        let z: f64 = latent
            .iter()
            .enumerate()
            .map(|(f, field)| {
                let weight = if (c + f) % 3 == 0 { 0.9 } else { 0.45 };
                let sign = if (c * 2 + f) % 7 == 6 { -1.0 } else { 1.0 };
                sign * weight * field[k]
            })
            .sum();
        1.0 / (1.0 + (-0.9 * z).exp())
    });

    let perturb: Vec<Vec<f64>> = match relation {
        Relation::Affine => Vec::new(),
        Relation::Nonlinear => (0..bands)
            .map(|_| standardized(smooth_noise(h, w, PERTURBATION_RADIUS, &mut rng)))
            .collect(),
    };
    let aux = Tensor4::from_fn(shape, |_, c, i, j| {
        let v = x.get(0, c, i, j);
        let (g, o) = band_gain_offset(c);
        match relation {
            Relation::Affine => g * v + o,
            Relation::Nonlinear => {
                let d = v - 0.5;
                (g * v + o + CURVATURE * d * d + PERTURBATION * perturb[c][i * w + j]).clamp(0.0, 1.0)
            }
        }
    });
    Ok(SynthScene { x, aux, relation })
}
