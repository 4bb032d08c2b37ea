//! Stride-1 dilated 2-D convolution (cross-correlation) and its gradients.
//!
//! Forward: `out(n,j,y,x) = F(b_j + Σ_i Σ_{u,v} W_ji(u,v) · in(n, i, y + d·u − p, x + d·v − p))`
//! with zero fill outside the input. Kernels are visited in `(i, u, v)` order
//! for every output element, so results do not depend on how callers split work.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::tensor::{Real, Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T: Real = f64> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub activation: Activation,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> ConvLayerParams<T> {
    /// Zero-initialised layer.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        activation: Activation,
    ) -> Result<Self> {
        let layer = ConvLayerParams {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            activation,
            weights: vec![T::zero(); out_channels * in_channels * kernel_size * kernel_size],
            biases: vec![T::zero(); out_channels],
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(StsError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilation == 0 {
            return Err(StsError::Config("dilation must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(StsError::Config("channel counts must be positive".into()));
        }
        if self.weights.len() != self.weight_count() {
            return Err(StsError::shape(
                "conv weights",
                "length",
                self.weight_count(),
                self.weights.len(),
            ));
        }
        if self.biases.len() != self.out_channels {
            return Err(StsError::shape(
                "conv biases",
                "length",
                self.out_channels,
                self.biases.len(),
            ));
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }

    /// Extent covered by one dilated kernel, `d·(S−1)+1`.
    pub fn extent(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    /// Zero padding that keeps height and width unchanged.
    pub fn same_padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }

    #[inline]
    pub fn weight_index(&self, j: usize, i: usize, u: usize, v: usize) -> usize {
        ((j * self.in_channels + i) * self.kernel_size + u) * self.kernel_size + v
    }

    pub fn cast<U: Real>(&self) -> ConvLayerParams<U> {
        ConvLayerParams {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_size: self.kernel_size,
            dilation: self.dilation,
            activation: self.activation,
            weights: self.weights.iter().map(|&w| U::of(w.as_f64())).collect(),
            biases: self.biases.iter().map(|&b| U::of(b.as_f64())).collect(),
        }
    }
}

/// Gradients of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradient<T: Real = f64> {
    pub d_weights: Vec<T>,
    pub d_biases: Vec<T>,
    /// Absent when the caller asked for parameter gradients only.
    pub d_input: Option<Tensor4<T>>,
}

/// Valid index range of an output axis for one kernel tap offset.
#[inline]
fn tap_range(offset: isize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi_signed = in_len as isize - offset;
    let hi = if hi_signed < 0 {
        0
    } else {
        (hi_signed as usize).min(out_len)
    };
    (lo, hi.max(lo))
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// Dot product with eight interleaved partial sums; order is fixed for a given length.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..a.len() {
        tail = tail + a[k] * b[k];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn output_dims(input: Shape, layer: &ConvLayerParams<impl Real>, padding: usize) -> Result<(usize, usize)> {
    let ext = layer.extent();
    let ph = input.h + 2 * padding;
    let pw = input.w + 2 * padding;
    if ext > ph {
        return Err(StsError::shape("conv kernel extent vs padded input", "height", ph, ext));
    }
    if ext > pw {
        return Err(StsError::shape("conv kernel extent vs padded input", "width", pw, ext));
    }
    Ok((ph - ext + 1, pw - ext + 1))
}

fn check_input<T: Real>(input: &Tensor4<T>, layer: &ConvLayerParams<T>) -> Result<()> {
    layer.validate()?;
    if input.shape().c != layer.in_channels {
        return Err(StsError::shape(
            "conv input",
            "channels",
            layer.in_channels,
            input.shape().c,
        ));
    }
    Ok(())
}

/// Convolution followed by the layer's activation.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, layer: &ConvLayerParams<T>, padding: usize) -> Result<Tensor4<T>> {
    check_input(input, layer)?;
    let s = input.shape();
    let (oh, ow) = output_dims(s, layer, padding)?;
    let out_shape = Shape::new(s.n, layer.out_channels, oh, ow);
    let mut out = Tensor4::zeros(out_shape);
    let k = layer.kernel_size;
    let d = layer.dilation as isize;
    let p = padding as isize;

    for n in 0..s.n {
        for j in 0..layer.out_channels {
            let bias = layer.biases[j];
            let plane = out.plane_mut(n, j);
            plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..layer.in_channels {
                let src = input.plane(n, i);
                for u in 0..k {
                    let dy = u as isize * d - p;
                    let (y0, y1) = tap_range(dy, oh, s.h);
                    for v in 0..k {
                        let w = layer.weights[layer.weight_index(j, i, u, v)];
                        if w == T::zero() {
                            continue;
                        }
                        let dx = v as isize * d - p;
                        let (x0, x1) = tap_range(dx, ow, s.w);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let src_row = &src[iy * s.w + ix0..iy * s.w + ix0 + (x1 - x0)];
                            axpy(w, src_row, &mut plane[y * ow + x0..y * ow + x1]);
                        }
                    }
                }
            }
            if layer.activation == Activation::Relu {
                plane.iter_mut().for_each(|v| {
                    if *v <= T::zero() {
                        *v = T::zero()
                    }
                });
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given its forward `input` and activated `output`.
///
/// `upstream` is the loss gradient with respect to `output`; for ReLU layers it
/// is gated by `output > 0` before flowing into the linear part.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    layer: &ConvLayerParams<T>,
    padding: usize,
    output: &Tensor4<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGradient<T>> {
    conv2d_backward_impl(input, layer, padding, output, upstream, true)
}

/// As [`conv2d_backward`] but skips the input gradient.
pub fn conv2d_backward_params<T: Real>(
    input: &Tensor4<T>,
    layer: &ConvLayerParams<T>,
    padding: usize,
    output: &Tensor4<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGradient<T>> {
    conv2d_backward_impl(input, layer, padding, output, upstream, false)
}

fn conv2d_backward_impl<T: Real>(
    input: &Tensor4<T>,
    layer: &ConvLayerParams<T>,
    padding: usize,
    output: &Tensor4<T>,
    upstream: &Tensor4<T>,
    want_input: bool,
) -> Result<ConvGradient<T>> {
    check_input(input, layer)?;
    let s = input.shape();
    let (oh, ow) = output_dims(s, layer, padding)?;
    let out_shape = Shape::new(s.n, layer.out_channels, oh, ow);
    out_shape.expect_eq(&upstream.shape(), "conv backward upstream")?;
    out_shape.expect_eq(&output.shape(), "conv backward output")?;

    let delta = match layer.activation {
        Activation::Linear => std::borrow::Cow::Borrowed(upstream),
        Activation::Relu => std::borrow::Cow::Owned(crate::tensor::relu_backward(output, upstream)?),
    };
    let delta = delta.as_ref();

    let k = layer.kernel_size;
    let d = layer.dilation as isize;
    let p = padding as isize;
    let mut d_weights = vec![T::zero(); layer.weight_count()];
    let mut d_biases = vec![T::zero(); layer.out_channels];
    let mut d_input = if want_input { Some(Tensor4::zeros(s)) } else { None };

    for n in 0..s.n {
        for j in 0..layer.out_channels {
            let dp = delta.plane(n, j);
            d_biases[j] = d_biases[j] + dp.iter().copied().sum::<T>();
            for i in 0..layer.in_channels {
                let src = input.plane(n, i);
                for u in 0..k {
                    let dy = u as isize * d - p;
                    let (y0, y1) = tap_range(dy, oh, s.h);
                    for v in 0..k {
                        let dx = v as isize * d - p;
                        let (x0, x1) = tap_range(dx, ow, s.w);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = (x0 as isize + dx) as usize;
                        let len = x1 - x0;
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            acc = acc
                                + dot(
                                    &dp[y * ow + x0..y * ow + x1],
                                    &src[iy * s.w + ix0..iy * s.w + ix0 + len],
                                );
                        }
                        let wi = layer.weight_index(j, i, u, v);
                        d_weights[wi] = d_weights[wi] + acc;
                    }
                }
            }
        }
        if let Some(d_in) = d_input.as_mut() {
            for i in 0..layer.in_channels {
                let dst = d_in.plane_mut(n, i);
                for j in 0..layer.out_channels {
                    let dp = delta.plane(n, j);
                    for u in 0..k {
                        let dy = u as isize * d - p;
                        let (y0, y1) = tap_range(dy, oh, s.h);
                        for v in 0..k {
                            let w = layer.weights[layer.weight_index(j, i, u, v)];
                            if w == T::zero() {
                                continue;
                            }
                            let dx = v as isize * d - p;
                            let (x0, x1) = tap_range(dx, ow, s.w);
                            if x0 >= x1 {
                                continue;
                            }
                            let ix0 = (x0 as isize + dx) as usize;
                            let len = x1 - x0;
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                axpy(
                                    w,
                                    &dp[y * ow + x0..y * ow + x1],
                                    &mut dst[iy * s.w + ix0..iy * s.w + ix0 + len],
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGradient {
        d_weights,
        d_biases,
        d_input,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptiveMode {
    /// Stacked undilated 3×3 convolutions.
    Common,
    /// 3×3 convolutions whose dilation doubles with depth (1, 2, 4, ...).
    DilatedPyramid,
}

/// Side length of the square receptive field after `depth` stacked 3×3 layers.
pub fn receptive_field(depth: usize, mode: ReceptiveMode) -> Result<usize> {
    if depth == 0 {
        return Err(StsError::Argument("receptive field depth must be at least 1".into()));
    }
    Ok(match mode {
        ReceptiveMode::Common => 2 * depth + 1,
        ReceptiveMode::DilatedPyramid => {
            let shift = u32::try_from(depth + 1)
                .ok()
                .filter(|s| *s < usize::BITS)
                .ok_or_else(|| StsError::Argument(format!("depth {depth} overflows")))?;
            (1usize << shift) - 1
        }
    })
}

/// Receptive field side of a stack of 3×3 layers with the given dilations.
pub fn stack_receptive_field(dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| 2 * d).sum::<usize>()
}
