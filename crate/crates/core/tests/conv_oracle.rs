mod common;

use common::{random_layer, random_tensor, reference_conv, rel_err, rng};
use proptest::prelude::*;
use rand::Rng;
use stscnn::conv::{conv2d_backward, conv2d_forward, Activation};
use stscnn::tensor::{relu, relu_backward};
use stscnn::{Shape, Tensor4};

fn max_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dilated_forward_matches_loop_nest() {
    let mut r = rng(42);
    let x = random_tensor(Shape::new(2, 3, 8, 8), &mut r);
    let layer = random_layer(3, 4, 3, 2, Activation::Linear, &mut r);
    let fast = conv2d_forward(&x, &layer, 2).unwrap();
    let slow = reference_conv(&x, &layer, 2);
    assert_eq!(fast.shape(), Shape::new(2, 4, 8, 8));
    assert!(max_diff(&fast, &slow) <= 1e-12);
}

#[test]
fn fifty_random_configs_match_loop_nest() {
    let mut r = rng(7);
    for case in 0..50 {
        let k = [3, 5, 7][case % 3];
        let d = 1 + (case / 3) % 3;
        let in_c = r.random_range(1..4);
        let out_c = r.random_range(1..4);
        let h = r.random_range(d * (k - 1) / 2 + 1..14);
        let w = r.random_range(d * (k - 1) / 2 + 1..14);
        let act = if case % 2 == 0 {
            Activation::Linear
        } else {
            Activation::Relu
        };
        let x = random_tensor(Shape::new(r.random_range(1..3), in_c, h, w), &mut r);
        let layer = random_layer(in_c, out_c, k, d, act, &mut r);
        let pad = layer.same_padding();
        let fast = conv2d_forward(&x, &layer, pad).unwrap();
        let slow = reference_conv(&x, &layer, pad);
        assert!(max_diff(&fast, &slow) <= 1e-12, "case {case}: k={k} d={d}");
        assert_eq!(fast.shape().h, h);
        assert_eq!(fast.shape().w, w);
    }
}

#[test]
fn valid_padding_matches_loop_nest() {
    let mut r = rng(3);
    let x = random_tensor(Shape::new(1, 2, 11, 9), &mut r);
    let layer = random_layer(2, 2, 3, 2, Activation::Relu, &mut r);
    let fast = conv2d_forward(&x, &layer, 0).unwrap();
    assert_eq!(fast.shape(), Shape::new(1, 2, 7, 5));
    assert!(max_diff(&fast, &reference_conv(&x, &layer, 0)) <= 1e-12);
}

/// Scalar loss `Σ c ⊙ conv(x)` with fixed random coefficients `c`.
fn probe_loss(x: &Tensor4<f64>, layer: &stscnn::conv::ConvLayerParams<f64>, c: &Tensor4<f64>) -> f64 {
    let y = conv2d_forward(x, layer, layer.same_padding()).unwrap();
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_central_differences() {
    let mut r = rng(99);
    let h = 1e-6;
    for act in [Activation::Linear, Activation::Relu] {
        let x = random_tensor(Shape::new(1, 2, 6, 6), &mut r);
        let layer = random_layer(2, 3, 3, 2, act, &mut r);
        let pad = layer.same_padding();
        let out = conv2d_forward(&x, &layer, pad).unwrap();
        let c = random_tensor(out.shape(), &mut r);
        let g = conv2d_backward(&x, &layer, pad, &out, &c).unwrap();

        let mut worst = 0.0f64;
        for k in 0..layer.weights.len() {
            let mut plus = layer.clone();
            plus.weights[k] += h;
            let mut minus = layer.clone();
            minus.weights[k] -= h;
            let num = (probe_loss(&x, &plus, &c) - probe_loss(&x, &minus, &c)) / (2.0 * h);
            worst = worst.max(rel_err(g.d_weights[k], num, 1e-4));
        }
        for k in 0..layer.biases.len() {
            let mut plus = layer.clone();
            plus.biases[k] += h;
            let mut minus = layer.clone();
            minus.biases[k] -= h;
            let num = (probe_loss(&x, &plus, &c) - probe_loss(&x, &minus, &c)) / (2.0 * h);
            worst = worst.max(rel_err(g.d_biases[k], num, 1e-4));
        }
        let d_in = g.d_input.unwrap();
        for k in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            let num = (probe_loss(&plus, &layer, &c) - probe_loss(&minus, &layer, &c)) / (2.0 * h);
            worst = worst.max(rel_err(d_in.data()[k], num, 1e-4));
        }
        assert!(worst < 1e-5, "{act:?}: worst relative error {worst:e}");
    }
}

#[test]
fn relu_backward_matches_central_differences() {
    let mut r = rng(5);
    let x = random_tensor(Shape::new(1, 2, 4, 4), &mut r);
    let c = random_tensor(x.shape(), &mut r);
    let loss = |t: &Tensor4<f64>| -> f64 { relu(t).data().iter().zip(c.data()).map(|(a, b)| a * b).sum() };
    let g = relu_backward(&x, &c).unwrap();
    let h = 1e-6;
    for k in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[k] += h;
        let mut m = x.clone();
        m.data_mut()[k] -= h;
        let num = (loss(&p) - loss(&m)) / (2.0 * h);
        assert!(rel_err(g.data()[k], num, 1e-4) < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn convolution_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, d in 1usize..4) {
        let mut r = rng(seed);
        let mut layer = random_layer(2, 3, 3, d, Activation::Linear, &mut r);
        layer.biases.iter_mut().for_each(|b| *b = 0.0);
        let shape = Shape::new(1, 2, 9, 7);
        let x = random_tensor(shape, &mut r);
        let y = random_tensor(shape, &mut r);
        let pad = layer.same_padding();
        let combo = Tensor4::from_fn(shape, |n, c, i, j| alpha * x.get(n, c, i, j) + beta * y.get(n, c, i, j));
        let lhs = conv2d_forward(&combo, &layer, pad).unwrap();
        let cx = conv2d_forward(&x, &layer, pad).unwrap();
        let cy = conv2d_forward(&y, &layer, pad).unwrap();
        for k in 0..lhs.data().len() {
            let rhs = alpha * cx.data()[k] + beta * cy.data()[k];
            prop_assert!((lhs.data()[k] - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_stays_finite(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(Shape::new(1, 2, 6, 5), &mut r);
        let layer = random_layer(2, 2, 5, 1, Activation::Relu, &mut r);
        prop_assert!(conv2d_forward(&x, &layer, 2).unwrap().all_finite());
    }
}
