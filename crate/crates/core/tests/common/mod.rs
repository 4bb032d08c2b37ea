#![allow(dead_code)]

pub mod metric_oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stscnn::conv::{Activation, ConvLayerParams};
use stscnn::{Shape, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_layer(
    in_c: usize,
    out_c: usize,
    k: usize,
    d: usize,
    act: Activation,
    rng: &mut ChaCha8Rng,
) -> ConvLayerParams<f64> {
    let mut l = ConvLayerParams::new(in_c, out_c, k, d, act).unwrap();
    l.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    l
}

/// Straightforward loop-nest cross-correlation with zero padding, independent
/// of the library's row-sliced kernel.
pub fn reference_conv(input: &Tensor4<f64>, layer: &ConvLayerParams<f64>, pad: usize) -> Tensor4<f64> {
    let s = input.shape();
    let k = layer.kernel_size;
    let d = layer.dilation;
    let oh = s.h + 2 * pad - d * (k - 1);
    let ow = s.w + 2 * pad - d * (k - 1);
    let mut out = Tensor4::zeros(Shape::new(s.n, layer.out_channels, oh, ow));
    for n in 0..s.n {
        for j in 0..layer.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..layer.in_channels {
                        for u in 0..k {
                            for v in 0..k {
                                let iy = y as isize + (u * d) as isize - pad as isize;
                                let ix = x as isize + (v * d) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = layer.weights[((j * layer.in_channels + i) * k + u) * k + v];
                                acc += wv * input.get(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    acc += layer.biases[j];
                    if layer.activation == Activation::Relu && acc < 0.0 {
                        acc = 0.0;
                    }
                    out.set(n, j, y, x, acc);
                }
            }
        }
    }
    out
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
