//! Gradient containers and the momentum SGD update.

use crate::conv::ConvLayerParams;
use crate::error::{Result, StsError};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T: Real = f64> {
    pub name: String,
    pub d_weights: Vec<T>,
    pub d_biases: Vec<T>,
}

/// Per-layer gradients in network layer order. Also used as the velocity state.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T: Real = f64> {
    pub layers: Vec<LayerGradient<T>>,
}

impl<T: Real> GradientSet<T> {
    /// Zero gradients shaped like `layers`.
    pub fn zeros_like(names: &[String], layers: &[ConvLayerParams<T>]) -> Self {
        GradientSet {
            layers: names
                .iter()
                .zip(layers)
                .map(|(name, l)| LayerGradient {
                    name: name.clone(),
                    d_weights: vec![T::zero(); l.weights.len()],
                    d_biases: vec![T::zero(); l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(StsError::shape(
                "gradient sum",
                "layers",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.d_weights.len() != b.d_weights.len() || a.d_biases.len() != b.d_biases.len() {
                return Err(StsError::shape(
                    format!("gradient sum {}", a.name),
                    "length",
                    a.d_weights.len(),
                    b.d_weights.len(),
                ));
            }
            a.d_weights.iter_mut().zip(&b.d_weights).for_each(|(x, &y)| *x = *x + y);
            a.d_biases.iter_mut().zip(&b.d_biases).for_each(|(x, &y)| *x = *x + y);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for l in &mut self.layers {
            l.d_weights.iter_mut().for_each(|x| *x = *x * k);
            l.d_biases.iter_mut().for_each(|x| *x = *x * k);
        }
    }

    pub fn get(&self, name: &str) -> Option<&LayerGradient<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Flattened view in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.d_weights);
            out.extend_from_slice(&l.d_biases);
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.d_weights.iter().chain(&l.d_biases))
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// One momentum SGD step: `v ← μ·v − η·g`, `w ← w + v`.
///
/// All gradients are checked for finiteness before any parameter is touched.
pub fn sgd_step<T: Real>(
    layers: &mut [ConvLayerParams<T>],
    grads: &GradientSet<T>,
    lr: f64,
    momentum: f64,
    velocity: &mut GradientSet<T>,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(StsError::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(StsError::Argument(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if layers.len() != grads.layers.len() || layers.len() != velocity.layers.len() {
        return Err(StsError::shape("sgd step", "layers", layers.len(), grads.layers.len()));
    }
    for (layer, (g, v)) in layers.iter().zip(grads.layers.iter().zip(&velocity.layers)) {
        if g.d_weights.len() != layer.weights.len() || v.d_weights.len() != layer.weights.len() {
            return Err(StsError::shape(
                format!("sgd step {}", g.name),
                "weights",
                layer.weights.len(),
                g.d_weights.len(),
            ));
        }
        if g.d_biases.len() != layer.biases.len() || v.d_biases.len() != layer.biases.len() {
            return Err(StsError::shape(
                format!("sgd step {}", g.name),
                "biases",
                layer.biases.len(),
                g.d_biases.len(),
            ));
        }
        if !g.d_weights.iter().chain(&g.d_biases).all(|x| x.is_finite()) {
            return Err(StsError::NonFinite(format!("gradient of layer {}", g.name)));
        }
    }

    let (eta, mu) = (T::of(lr), T::of(momentum));
    for (layer, (g, v)) in layers
        .iter_mut()
        .zip(grads.layers.iter().zip(velocity.layers.iter_mut()))
    {
        update(&mut layer.weights, &g.d_weights, &mut v.d_weights, eta, mu);
        update(&mut layer.biases, &g.d_biases, &mut v.d_biases, eta, mu);
    }
    Ok(())
}

#[inline]
fn update<T: Real>(w: &mut [T], g: &[T], v: &mut [T], eta: T, mu: T) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v - eta * g;
        *w = *w + *v;
    }
}
