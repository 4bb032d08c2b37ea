//! Central finite-difference check of network parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, StsError};
use crate::masks::gen_stripe_mask;
use crate::network::{
    build_network, forward, loss_and_gradients, loss_mse, LossNormalization, NetworkConfig, NetworkParams,
    TrainingSample,
};
use crate::tensor::{Shape, Tensor4};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_layer: String,
    pub worst_index: usize,
}

/// Denominator floor of the relative error, so parameters with near-zero
/// gradients are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Central-difference step for the whole-network check.
pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// The shrunken network used for checking: one band, six trunk channels.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        input_bands: 1,
        fusion_channels: 3,
        multiscale_channels: 2,
        dilations: vec![1, 2, 3, 2, 1],
        trunk_channels: 6,
        multiscale_block: true,
        boosting_path: true,
    }
}

/// Initialised network moved to a generic point: the zero-started output layer
/// gets He-normal weights and every bias a small random value, so no
/// gradient vanishes identically.
pub fn probe_network(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<f64>> {
    let mut params = build_network::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let last = params.layers().len() - 1;
    for (k, layer) in params.layers_mut().iter_mut().enumerate() {
        if k == last {
            let fan_in = (layer.in_channels * layer.kernel_size * layer.kernel_size) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt())
                .map_err(|e| StsError::Internal(format!("weight distribution: {e}")))?;
            layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        }
        layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    Ok(params)
}

/// Random smooth-ish sample with a stripe mask.
pub fn random_sample(bands: usize, h: usize, w: usize, seed: u64) -> Result<TrainingSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, bands, h, w);
    let x = Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0));
    let y2 = Tensor4::from_fn(shape, |n, c, i, j| 0.7 * x.get(n, c, i, j) + rng.random_range(0.0..0.3));
    let mask = gen_stripe_mask(h, w, 4.min(h), 1, 1)?;
    TrainingSample::new(x, y2, mask)
}

fn sample_loss(params: &NetworkParams<f64>, s: &TrainingSample<f64>) -> Result<f64> {
    let r = forward(params, &s.y1, &s.y2, &s.mask)?;
    Ok(loss_mse(&r, &s.y1, &s.x)?.total)
}

fn param(p: &NetworkParams<f64>, layer: usize, k: usize, n_w: usize) -> f64 {
    let l = &p.layers()[layer];
    if k < n_w {
        l.weights[k]
    } else {
        l.biases[k - n_w]
    }
}

fn set_param(p: &mut NetworkParams<f64>, layer: usize, k: usize, n_w: usize, v: f64) {
    let l = &mut p.layers_mut()[layer];
    if k < n_w {
        l.weights[k] = v;
    } else {
        l.biases[k - n_w] = v;
    }
}

/// Steps tried per parameter. A ReLU kink closer than `step` to the probed
/// point spoils the central difference there, so smaller steps are tried too.
pub fn step_ladder(step: f64) -> [f64; 3] {
    [step, step / 10.0, step / 100.0]
}

/// Compare every analytic parameter gradient with a central difference of
/// the loss, keeping the best agreement over [`step_ladder`].
pub fn check_network(params: &NetworkParams<f64>, sample: &TrainingSample<f64>, step: f64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(params, sample, LossNormalization::Sample)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_layer: String::new(),
        worst_index: 0,
    };
    let mut probe = params.clone();
    for (li, g) in grads.layers.iter().enumerate() {
        let n_w = g.d_weights.len();
        for k in 0..n_w + g.d_biases.len() {
            let analytic = if k < n_w { g.d_weights[k] } else { g.d_biases[k - n_w] };
            let orig = param(&probe, li, k, n_w);
            let mut err = f64::INFINITY;
            for h in step_ladder(step) {
                set_param(&mut probe, li, k, n_w, orig + h);
                let plus = sample_loss(&probe, sample)?;
                set_param(&mut probe, li, k, n_w, orig - h);
                let minus = sample_loss(&probe, sample)?;
                set_param(&mut probe, li, k, n_w, orig);
                err = err.min(relative_error(analytic, (plus - minus) / (2.0 * h)));
                if err < 1e-7 {
                    break;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_layer = g.name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

/// Build the tiny network and run [`check_network`] on an 8×8 sample.
pub fn run_default(seed: u64) -> Result<GradCheckReport> {
    let config = tiny_config();
    let params = probe_network(&config, seed)?;
    let sample = random_sample(1, 8, 8, seed.wrapping_add(1))?;
    check_network(&params, &sample, DEFAULT_STEP)
}
