//! The two-input residual reconstruction network.
//!
//! Data flow for one forward pass:
//!
//! ```text
//! y1 ─conv_y1─relu─┐
//!                  concat ── t0 ─┬─ ms3 ─┐
//! y2 ─conv_y2─relu─┘             ├─ ms5 ─┼ concat ─(+t0)── t1
//!                                └─ ms7 ─┘
//! filled = y1 + (1−mask)·y2 ─boost_conv─relu── boost
//!
//! t1 ─d1─(+boost)─d2─d3─d4─(+boost)─d5─(+t1)─output_conv── residual_hat
//! ```
//!
//! Every convolution keeps the spatial size (zero "same" padding) and all but
//! `output_conv` are followed by a ReLU. The network predicts the residual
//! `y1 − x`; [`reconstruct`] subtracts it from `y1` inside the gaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, stack_receptive_field, Activation, ConvLayerParams,
};
use crate::error::{Result, StsError};
use crate::masks::Mask;
use crate::optim::{GradientSet, LayerGradient};
use crate::tensor::{concat_channels, split_channels, Real, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Bands of each of the two inputs (and of the output).
    pub input_bands: usize,
    #[serde(default = "NetworkConfig::default_fusion")]
    pub fusion_channels: usize,
    /// Width of each of the three multi-scale branches.
    #[serde(default = "NetworkConfig::default_multiscale")]
    pub multiscale_channels: usize,
    #[serde(default = "NetworkConfig::default_dilations")]
    pub dilations: Vec<usize>,
    #[serde(default = "NetworkConfig::default_trunk")]
    pub trunk_channels: usize,
    /// When false the 3/5/7 branches collapse into a single 3×3 trunk conv.
    #[serde(default = "yes")]
    pub multiscale_block: bool,
    /// When false the gap-filled composite is not injected into the dilated stack.
    #[serde(default = "yes")]
    pub boosting_path: bool,
}

fn yes() -> bool {
    true
}

impl NetworkConfig {
    fn default_fusion() -> usize {
        30
    }
    fn default_multiscale() -> usize {
        20
    }
    fn default_dilations() -> Vec<usize> {
        vec![1, 2, 3, 2, 1]
    }
    fn default_trunk() -> usize {
        60
    }

    /// Full-size network for `bands`-band inputs.
    pub fn new(bands: usize) -> Self {
        NetworkConfig {
            input_bands: bands,
            fusion_channels: Self::default_fusion(),
            multiscale_channels: Self::default_multiscale(),
            dilations: Self::default_dilations(),
            trunk_channels: Self::default_trunk(),
            multiscale_block: true,
            boosting_path: true,
        }
    }

    /// Same topology with a `trunk`-channel trunk (`trunk` divisible by 6).
    pub fn with_trunk(bands: usize, trunk: usize) -> Self {
        NetworkConfig {
            fusion_channels: trunk / 2,
            multiscale_channels: trunk / 3,
            trunk_channels: trunk,
            ..Self::new(bands)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bands == 0 {
            return Err(StsError::Config("input_bands must be positive".into()));
        }
        if self.fusion_channels == 0 || 2 * self.fusion_channels != self.trunk_channels {
            return Err(StsError::Config(format!(
                "trunk_channels ({}) must equal twice fusion_channels ({})",
                self.trunk_channels, self.fusion_channels
            )));
        }
        if self.multiscale_block
            && (self.multiscale_channels == 0 || 3 * self.multiscale_channels != self.trunk_channels)
        {
            return Err(StsError::Config(format!(
                "trunk_channels ({}) must equal three times multiscale_channels ({})",
                self.trunk_channels, self.multiscale_channels
            )));
        }
        if self.dilations.is_empty() {
            return Err(StsError::Config("at least one dilated layer is required".into()));
        }
        if self.dilations.contains(&0) {
            return Err(StsError::Config("dilation factors must be at least 1".into()));
        }
        Ok(())
    }

    /// Indices of dilated layers followed by a boost junction: the first and
    /// the second to last (the fourth of five).
    pub fn boost_junctions(&self) -> Vec<usize> {
        if !self.boosting_path {
            return Vec::new();
        }
        let l = self.dilations.len();
        let mut j = vec![0];
        if l >= 2 && l - 2 != 0 {
            j.push(l - 2);
        }
        j
    }

    /// Side of the receptive field of one output pixel with respect to `y1`.
    pub fn receptive_field(&self) -> usize {
        // fusion 3×3, widest multi-scale branch, dilated stack, output 3×3
        let ms = if self.multiscale_block { 7 } else { 3 };
        stack_receptive_field(&self.dilations) + 2 + (ms - 1) + 2
    }
}

/// Shape of one named layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub activation: Activation,
}

/// Positions of each role in the layer list.
#[derive(Debug, Clone)]
struct Layout {
    y1: usize,
    y2: usize,
    multiscale: Vec<usize>,
    boost: Option<usize>,
    dilated: Vec<usize>,
    output: usize,
}

pub fn layer_specs(config: &NetworkConfig) -> Result<Vec<LayerSpec>> {
    config.validate()?;
    let b = config.input_bands;
    let t = config.trunk_channels;
    let spec = |name: String, i, o, k, d, a| LayerSpec {
        name,
        in_channels: i,
        out_channels: o,
        kernel_size: k,
        dilation: d,
        activation: a,
    };
    let mut out = vec![
        spec("conv_y1".into(), b, config.fusion_channels, 3, 1, Activation::Relu),
        spec("conv_y2".into(), b, config.fusion_channels, 3, 1, Activation::Relu),
    ];
    if config.multiscale_block {
        for k in [3, 5, 7] {
            out.push(spec(
                format!("ms{k}"),
                t,
                config.multiscale_channels,
                k,
                1,
                Activation::Relu,
            ));
        }
    } else {
        out.push(spec("ms_single".into(), t, t, 3, 1, Activation::Relu));
    }
    if config.boosting_path {
        out.push(spec("boost_conv".into(), b, t, 3, 1, Activation::Relu));
    }
    for (k, &d) in config.dilations.iter().enumerate() {
        out.push(spec(format!("d{}", k + 1), t, t, 3, d, Activation::Relu));
    }
    out.push(spec("output_conv".into(), t, b, 3, 1, Activation::Linear));
    Ok(out)
}

fn layout(config: &NetworkConfig) -> Layout {
    let ms_count = if config.multiscale_block { 3 } else { 1 };
    let mut next = 2;
    let multiscale: Vec<usize> = (next..next + ms_count).collect();
    next += ms_count;
    let boost = config.boosting_path.then(|| {
        next += 1;
        next - 1
    });
    let dilated: Vec<usize> = (next..next + config.dilations.len()).collect();
    next += config.dilations.len();
    Layout {
        y1: 0,
        y2: 1,
        multiscale,
        boost,
        dilated,
        output: next,
    }
}

/// Ordered convolution layers realising a [`NetworkConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Real = f64> {
    config: NetworkConfig,
    names: Vec<String>,
    layers: Vec<ConvLayerParams<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// All-zero parameters.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        let specs = layer_specs(config)?;
        let mut names = Vec::with_capacity(specs.len());
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            layers.push(ConvLayerParams::new(
                s.in_channels,
                s.out_channels,
                s.kernel_size,
                s.dilation,
                s.activation,
            )?);
            names.push(s.name);
        }
        Ok(NetworkParams {
            config: config.clone(),
            names,
            layers,
        })
    }

    /// Assemble from explicit layers, checking them against the config.
    pub fn from_layers(config: &NetworkConfig, layers: Vec<ConvLayerParams<T>>) -> Result<Self> {
        let specs = layer_specs(config)?;
        if specs.len() != layers.len() {
            return Err(StsError::shape("network layers", "count", specs.len(), layers.len()));
        }
        for (s, l) in specs.iter().zip(&layers) {
            l.validate()?;
            let ok = s.in_channels == l.in_channels
                && s.out_channels == l.out_channels
                && s.kernel_size == l.kernel_size
                && s.dilation == l.dilation
                && s.activation == l.activation;
            if !ok {
                return Err(StsError::Config(format!(
                    "layer {} does not match the network config",
                    s.name
                )));
            }
        }
        Ok(NetworkParams {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            layers,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[ConvLayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayerParams<T>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayerParams<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.layers[i])
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            names: self.names.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn zero_gradients(&self) -> GradientSet<T> {
        GradientSet::zeros_like(&self.names, &self.layers)
    }
}

/// He-normal weights (`σ = sqrt(2 / (in·S²))`) and zero biases, deterministic in
/// `seed`. The output layer starts at zero, so the initial residual is zero.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    let mut params = NetworkParams::<T>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let fan_in = (layer.in_channels * layer.kernel_size * layer.kernel_size) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| StsError::Internal(format!("weight distribution: {e}")))?;
        for w in &mut layer.weights {
            *w = T::of(dist.sample(&mut rng));
        }
    }
    if let Some(out) = params.layers.last_mut() {
        out.weights.iter_mut().for_each(|w| *w = T::zero());
    }
    Ok(params)
}

/// One training example. All tensors are `1×B×H×W`; `y1 = x · mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T: Real = f64> {
    pub x: Tensor4<T>,
    pub y1: Tensor4<T>,
    pub y2: Tensor4<T>,
    pub mask: Mask,
}

impl<T: Real> TrainingSample<T> {
    /// Build a sample by zero-filling `x` outside `mask`.
    pub fn new(x: Tensor4<T>, y2: Tensor4<T>, mask: Mask) -> Result<Self> {
        x.shape().expect_eq(&y2.shape(), "sample y2")?;
        let y1 = crate::masks::apply_mask(&x, &mask, T::zero())?;
        Ok(TrainingSample { x, y1, y2, mask })
    }

    pub fn cast<U: Real>(&self) -> TrainingSample<U> {
        TrainingSample {
            x: self.x.cast(),
            y1: self.y1.cast(),
            y2: self.y2.cast(),
            mask: self.mask.clone(),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(TrainingSample {
            x: self.x.crop(y0, x0, h, w)?,
            y1: self.y1.crop(y0, x0, h, w)?,
            y2: self.y2.crop(y0, x0, h, w)?,
            mask: self.mask.crop(y0, x0, h, w)?,
        })
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    y1: Tensor4<T>,
    y2: Tensor4<T>,
    filled: Option<Tensor4<T>>,
    f1: Tensor4<T>,
    f2: Tensor4<T>,
    t0: Tensor4<T>,
    ms_out: Vec<Tensor4<T>>,
    boost: Option<Tensor4<T>>,
    dil_in: Vec<Tensor4<T>>,
    dil_out: Vec<Tensor4<T>>,
    head_in: Tensor4<T>,
    output: Tensor4<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &Tensor4<T> {
        &self.output
    }
}

fn same<T: Real>(x: &Tensor4<T>, layer: &ConvLayerParams<T>) -> Result<Tensor4<T>> {
    conv2d_forward(x, layer, layer.same_padding())
}

fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, junction: &str) -> Result<Tensor4<T>> {
    let mut out = a.clone();
    b.shape().expect_eq(&a.shape(), junction)?;
    out.add_assign(b)?;
    Ok(out)
}

/// `y1 + (1 − mask)·y2`: observed pixels from `y1`, gaps from `y2`.
pub fn gap_filled<T: Real>(y1: &Tensor4<T>, y2: &Tensor4<T>, mask: &Mask) -> Result<Tensor4<T>> {
    let s = y1.shape();
    y2.shape().expect_eq(&s, "gap fill y2")?;
    mask.expect_dims(s.h, s.w, "gap fill mask")?;
    let mut out = y1.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = y2.plane(n, c);
            for (i, v) in out.plane_mut(n, c).iter_mut().enumerate() {
                if !mask.is_valid_at(i) {
                    *v = *v + src[i];
                }
            }
        }
    }
    Ok(out)
}

fn check_inputs<T: Real>(params: &NetworkParams<T>, y1: &Tensor4<T>, y2: &Tensor4<T>, mask: &Mask) -> Result<()> {
    let s = y1.shape();
    if s.c != params.config.input_bands {
        return Err(StsError::shape("input y1", "channels", params.config.input_bands, s.c));
    }
    y2.shape().expect_eq(&s, "input y2")?;
    mask.expect_dims(s.h, s.w, "input mask")
}

/// Forward pass keeping every activation needed by [`backward`].
pub fn forward_cached<T: Real>(
    params: &NetworkParams<T>,
    y1: &Tensor4<T>,
    y2: &Tensor4<T>,
    mask: &Mask,
) -> Result<ForwardCache<T>> {
    check_inputs(params, y1, y2, mask)?;
    let lay = layout(&params.config);
    let l = &params.layers;

    let f1 = same(y1, &l[lay.y1])?;
    let f2 = same(y2, &l[lay.y2])?;
    let t0 = concat_channels(&[&f1, &f2])?;

    let ms_out = lay
        .multiscale
        .iter()
        .map(|&i| same(&t0, &l[i]))
        .collect::<Result<Vec<_>>>()?;
    let ms_cat = if ms_out.len() == 1 {
        ms_out[0].clone()
    } else {
        concat_channels(&ms_out.iter().collect::<Vec<_>>())?
    };
    let t1 = add(&ms_cat, &t0, "multi-scale skip")?;

    let (filled, boost) = match lay.boost {
        Some(b) => {
            let filled = gap_filled(y1, y2, mask)?;
            let boost = same(&filled, &l[b])?;
            (Some(filled), Some(boost))
        }
        None => (None, None),
    };

    let junctions = params.config.boost_junctions();
    let last = lay.dilated.len() - 1;
    let mut dil_in = Vec::with_capacity(lay.dilated.len());
    let mut dil_out = Vec::with_capacity(lay.dilated.len());
    let mut cur = t1.clone();
    for (k, &li) in lay.dilated.iter().enumerate() {
        let u = same(&cur, &l[li])?;
        let mut next = u.clone();
        if junctions.contains(&k) {
            let b = boost.as_ref().expect("junctions imply a boost path");
            b.shape()
                .expect_eq(&next.shape(), &format!("boost junction after d{}", k + 1))?;
            next.add_assign(b)?;
        }
        if k == last {
            t1.shape().expect_eq(&next.shape(), "dilated-stack skip")?;
            next.add_assign(&t1)?;
        }
        dil_in.push(std::mem::replace(&mut cur, next));
        dil_out.push(u);
    }
    let output = same(&cur, &l[lay.output])?;

    Ok(ForwardCache {
        y1: y1.clone(),
        y2: y2.clone(),
        filled,
        f1,
        f2,
        t0,
        ms_out,
        boost,
        dil_in,
        dil_out,
        head_in: cur,
        output,
    })
}

/// Predicted residual `y1 − x`, same shape as `y1`.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    y1: &Tensor4<T>,
    y2: &Tensor4<T>,
    mask: &Mask,
) -> Result<Tensor4<T>> {
    Ok(forward_cached(params, y1, y2, mask)?.output)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// `1/(2N) Σ ‖residual_hat − (y1 − x)‖²` over the batch.
    pub total: f64,
    /// `total` divided by the number of elements per sample.
    pub per_pixel: f64,
}

/// How the loss gradient handed to [`backward`] is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Gradient of the batch-averaged squared-error sum.
    Sample,
    /// Additionally divided by elements per sample, which keeps step sizes
    /// independent of patch size.
    #[default]
    Pixel,
}

fn residual_error<T: Real>(residual_hat: &Tensor4<T>, y1: &Tensor4<T>, x: &Tensor4<T>) -> Result<Vec<f64>> {
    let s = residual_hat.shape();
    y1.shape().expect_eq(&s, "loss y1")?;
    x.shape().expect_eq(&s, "loss x")?;
    Ok(residual_hat
        .data()
        .iter()
        .zip(y1.data().iter().zip(x.data()))
        .map(|(&r, (&a, &b))| r.as_f64() - (a.as_f64() - b.as_f64()))
        .collect())
}

pub fn loss_mse<T: Real>(residual_hat: &Tensor4<T>, y1: &Tensor4<T>, x: &Tensor4<T>) -> Result<LossValue> {
    let e = residual_error(residual_hat, y1, x)?;
    let s = residual_hat.shape();
    let total = e.iter().map(|v| v * v).sum::<f64>() / (2.0 * s.n as f64);
    Ok(LossValue {
        total,
        per_pixel: total / (s.c * s.plane()) as f64,
    })
}

/// Loss and its gradient with respect to `residual_hat`.
pub fn loss_with_gradient<T: Real>(
    residual_hat: &Tensor4<T>,
    y1: &Tensor4<T>,
    x: &Tensor4<T>,
    norm: LossNormalization,
) -> Result<(LossValue, Tensor4<T>)> {
    let e = residual_error(residual_hat, y1, x)?;
    let s = residual_hat.shape();
    let total = e.iter().map(|v| v * v).sum::<f64>() / (2.0 * s.n as f64);
    let per_sample = (s.c * s.plane()) as f64;
    let denom = match norm {
        LossNormalization::Sample => s.n as f64,
        LossNormalization::Pixel => s.n as f64 * per_sample,
    };
    let grad = Tensor4::new(s, e.iter().map(|v| T::of(v / denom)).collect())?;
    Ok((
        LossValue {
            total,
            per_pixel: total / per_sample,
        },
        grad,
    ))
}

/// Parameter gradients given `d_out`, the loss gradient w.r.t. the network output.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    d_out: &Tensor4<T>,
) -> Result<GradientSet<T>> {
    let lay = layout(&params.config);
    let l = &params.layers;
    let mut grads: Vec<Option<LayerGradient<T>>> = vec![None; l.len()];
    let mut put = |idx: usize, g: crate::conv::ConvGradient<T>| {
        grads[idx] = Some(LayerGradient {
            name: params.names[idx].clone(),
            d_weights: g.d_weights,
            d_biases: g.d_biases,
        });
    };
    let take_input = |g: &mut crate::conv::ConvGradient<T>| {
        g.d_input
            .take()
            .ok_or_else(|| StsError::Internal("input gradient missing".into()))
    };

    let mut g = conv2d_backward(
        &cache.head_in,
        &l[lay.output],
        l[lay.output].same_padding(),
        &cache.output,
        d_out,
    )?;
    let mut d_cur = take_input(&mut g)?;
    put(lay.output, g);

    let junctions = params.config.boost_junctions();
    let mut d_t1 = d_cur.clone();
    let mut d_boost: Option<Tensor4<T>> = None;
    for k in (0..lay.dilated.len()).rev() {
        // d_cur is the gradient w.r.t. the post-junction value of layer k
        if junctions.contains(&k) {
            match d_boost.as_mut() {
                Some(acc) => acc.add_assign(&d_cur)?,
                None => d_boost = Some(d_cur.clone()),
            }
        }
        let li = lay.dilated[k];
        let layer = &l[li];
        let mut g = conv2d_backward(&cache.dil_in[k], layer, layer.same_padding(), &cache.dil_out[k], &d_cur)?;
        d_cur = take_input(&mut g)?;
        put(li, g);
    }
    // d_cur now flows into t1 as the input of the first dilated layer
    d_t1.add_assign(&d_cur)?;

    if let Some(bi) = lay.boost {
        let filled = cache
            .filled
            .as_ref()
            .ok_or_else(|| StsError::Internal("boost input not cached".into()))?;
        let boost = cache
            .boost
            .as_ref()
            .ok_or_else(|| StsError::Internal("boost output not cached".into()))?;
        let d_b = d_boost.ok_or_else(|| StsError::Internal("boost gradient missing".into()))?;
        let g = conv2d_backward_params(filled, &l[bi], l[bi].same_padding(), boost, &d_b)?;
        put(bi, g);
    }

    // t1 = concat(ms branches) + t0
    let mut d_t0 = d_t1.clone();
    let sizes: Vec<usize> = lay.multiscale.iter().map(|&i| l[i].out_channels).collect();
    let pieces = split_channels(&d_t1, &sizes)?;
    for ((&li, piece), out) in lay.multiscale.iter().zip(&pieces).zip(&cache.ms_out) {
        let mut g = conv2d_backward(&cache.t0, &l[li], l[li].same_padding(), out, piece)?;
        d_t0.add_assign(&take_input(&mut g)?)?;
        put(li, g);
    }

    let fusion = l[lay.y1].out_channels;
    let halves = split_channels(&d_t0, &[fusion, fusion])?;
    let g1 = conv2d_backward_params(&cache.y1, &l[lay.y1], 1, &cache.f1, &halves[0])?;
    put(lay.y1, g1);
    let g2 = conv2d_backward_params(&cache.y2, &l[lay.y2], 1, &cache.f2, &halves[1])?;
    put(lay.y2, g2);

    let layers = grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.ok_or_else(|| StsError::Internal(format!("no gradient for layer {}", params.names[i]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientSet { layers })
}

/// Forward, loss and backward for one sample.
pub fn loss_and_gradients<T: Real>(
    params: &NetworkParams<T>,
    sample: &TrainingSample<T>,
    norm: LossNormalization,
) -> Result<(LossValue, GradientSet<T>)> {
    let cache = forward_cached(params, &sample.y1, &sample.y2, &sample.mask)?;
    let (loss, d_out) = loss_with_gradient(&cache.output, &sample.y1, &sample.x, norm)?;
    let grads = backward(params, &cache, &d_out)?;
    Ok((loss, grads))
}

/// Closed interval reconstructed gap values are clamped to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DataRange {
    fn default() -> Self {
        DataRange { lo: 0.0, hi: 1.0 }
    }
}

impl DataRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(StsError::Argument(format!("invalid data range [{lo}, {hi}]")));
        }
        Ok(DataRange { lo, hi })
    }

    pub fn peak(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Keep observed pixels of `y1` verbatim and take `estimate` (clamped) in the gaps.
pub fn composite<T: Real>(y1: &Tensor4<T>, estimate: &Tensor4<T>, mask: &Mask, range: DataRange) -> Result<Tensor4<T>> {
    let s = y1.shape();
    estimate.shape().expect_eq(&s, "composite estimate")?;
    mask.expect_dims(s.h, s.w, "composite mask")?;
    let (lo, hi) = (T::of(range.lo), T::of(range.hi));
    let mut out = y1.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let est = estimate.plane(n, c);
            for (i, v) in out.plane_mut(n, c).iter_mut().enumerate() {
                if !mask.is_valid_at(i) {
                    *v = est[i].max(lo).min(hi);
                }
            }
        }
    }
    Ok(out)
}

/// Reconstruct the full image: `y1 − residual` in the gaps, `y1` elsewhere.
pub fn reconstruct<T: Real>(
    params: &NetworkParams<T>,
    y1: &Tensor4<T>,
    y2: &Tensor4<T>,
    mask: &Mask,
    range: DataRange,
) -> Result<Tensor4<T>> {
    let residual = forward(params, y1, y2, mask)?;
    let mut raw = y1.clone();
    for (v, &r) in raw.data_mut().iter_mut().zip(residual.data()) {
        *v = *v - r;
    }
    composite(y1, &raw, mask, range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::gen_stripe_mask;
    use crate::tensor::Shape;

    fn tiny() -> NetworkConfig {
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

    fn inputs(b: usize, h: usize, w: usize) -> (Tensor4<f64>, Tensor4<f64>, Mask) {
        let x = Tensor4::from_fn(Shape::new(1, b, h, w), |_, c, y, x| {
            0.5 + 0.3 * ((y as f64 * 0.7 + c as f64).sin() * (x as f64 * 0.3).cos())
        });
        let y2 = x.map(|v| 0.8 * v + 0.1);
        let mask = gen_stripe_mask(h, w, 4, 1, 1).unwrap();
        let y1 = crate::masks::apply_mask(&x, &mask, 0.0).unwrap();
        (y1, y2, mask)
    }

    #[test]
    fn default_layer_list() {
        let p = NetworkParams::<f64>::zeros(&NetworkConfig::new(2)).unwrap();
        let names: Vec<&str> = p.names().iter().map(|s| s.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv_y1",
                "conv_y2",
                "ms3",
                "ms5",
                "ms7",
                "boost_conv",
                "d1",
                "d2",
                "d3",
                "d4",
                "d5",
                "output_conv"
            ]
        );
        let ms7 = p.layer("ms7").unwrap();
        assert_eq!((ms7.in_channels, ms7.out_channels, ms7.kernel_size), (60, 20, 7));
        let d3 = p.layer("d3").unwrap();
        assert_eq!((d3.in_channels, d3.out_channels, d3.dilation), (60, 60, 3));
        let out = p.layer("output_conv").unwrap();
        assert_eq!((out.out_channels, out.activation), (2, Activation::Linear));
        assert_eq!(p.layer("boost_conv").unwrap().in_channels, 2);
    }

    #[test]
    fn modis_fusion_weight_count() {
        let p = NetworkParams::<f64>::zeros(&NetworkConfig::new(7)).unwrap();
        assert_eq!(p.layer("conv_y1").unwrap().weights.len(), 1890);
    }

    #[test]
    fn config_arithmetic_is_checked() {
        let mut c = NetworkConfig::new(2);
        c.fusion_channels = 29;
        assert!(matches!(layer_specs(&c), Err(StsError::Config(_))));
        let mut c = NetworkConfig::new(2);
        c.multiscale_channels = 21;
        assert!(layer_specs(&c).is_err());
        let mut c = NetworkConfig::new(2);
        c.dilations.clear();
        assert!(layer_specs(&c).is_err());
        let mut c = NetworkConfig::new(2);
        c.dilations[2] = 0;
        assert!(layer_specs(&c).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network::<f64>(&tiny(), 5).unwrap();
        let b = build_network::<f64>(&tiny(), 5).unwrap();
        let c = build_network::<f64>(&tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetworkParams::<f64>::zeros(&tiny()).unwrap();
        let (y1, y2, m) = inputs(1, 10, 9);
        let r = forward(&p, &y1, &y2, &m).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_preserves_shape() {
        let p = build_network::<f64>(&tiny(), 1).unwrap();
        for (h, w) in [(1, 1), (5, 3), (17, 12)] {
            let (y1, y2, _) = inputs(1, h.max(4), w);
            let y1 = y1.crop(0, 0, h, w).unwrap();
            let y2 = y2.crop(0, 0, h, w).unwrap();
            let m = Mask::all_valid(h, w);
            assert_eq!(forward(&p, &y1, &y2, &m).unwrap().shape(), Shape::new(1, 1, h, w));
        }
    }

    #[test]
    fn junction_errors_are_named() {
        let p = build_network::<f64>(&tiny(), 1).unwrap();
        let (y1, y2, m) = inputs(1, 8, 8);
        let y2_bad = y2.crop(0, 0, 8, 7).unwrap();
        let err = forward(&p, &y1, &y2_bad, &m).unwrap_err();
        assert!(err.to_string().contains("y2"), "{err}");
        let err = forward(&p, &y1, &y2, &Mask::all_valid(8, 9)).unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");
    }

    #[test]
    fn loss_cases() {
        let s = Shape::new(1, 1, 1, 1);
        let y1 = Tensor4::new(s, vec![0.0]).unwrap();
        let x = Tensor4::new(s, vec![0.5]).unwrap();
        let exact = Tensor4::new(s, vec![-0.5]).unwrap();
        assert_eq!(loss_mse(&exact, &y1, &x).unwrap().total, 0.0);
        let off = Tensor4::new(s, vec![1.5]).unwrap();
        assert_eq!(loss_mse(&off, &y1, &x).unwrap().total, 2.0);
        let (y1, _, _) = inputs(2, 8, 8);
        let zero = Tensor4::zeros(y1.shape());
        assert_eq!(loss_mse(&zero, &y1, &y1).unwrap().total, 0.0);
    }

    #[test]
    fn loss_normalizations_differ_by_pixel_count() {
        let (y1, y2, m) = inputs(2, 6, 5);
        let x = gap_filled(&y1, &y2, &m).unwrap();
        let r = Tensor4::full(y1.shape(), 0.1);
        let (_, gs) = loss_with_gradient(&r, &y1, &x, LossNormalization::Sample).unwrap();
        let (_, gp) = loss_with_gradient(&r, &y1, &x, LossNormalization::Pixel).unwrap();
        for (a, b) in gs.data().iter().zip(gp.data()) {
            assert!((a / 60.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_output_bias_gradient() {
        // Zero network predicts r = 0, which is exact when nothing is missing.
        let p = NetworkParams::<f64>::zeros(&tiny()).unwrap();
        let (_, y2, _) = inputs(1, 8, 8);
        let x = y2.clone();
        let sample = TrainingSample::new(x, y2, Mask::all_valid(8, 8)).unwrap();
        let (loss, g) = loss_and_gradients(&p, &sample, LossNormalization::Sample).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.get("output_conv").unwrap().d_biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_scale_with_upstream() {
        let p = build_network::<f64>(&tiny(), 3).unwrap();
        let (y1, y2, m) = inputs(1, 8, 8);
        let cache = forward_cached(&p, &y1, &y2, &m).unwrap();
        let d = cache.output().map(|v| v - 0.3);
        let g1 = backward(&p, &cache, &d).unwrap().flatten();
        let g2 = backward(&p, &cache, &d.scale(2.0)).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn all_valid_reconstruction_is_identity() {
        let p = build_network::<f64>(&tiny(), 9).unwrap();
        let (_, y2, _) = inputs(1, 8, 8);
        let y1 = y2.map(|v| v * 3.0 - 0.7);
        let m = Mask::all_valid(8, 8);
        assert_eq!(reconstruct(&p, &y1, &y2, &m, DataRange::default()).unwrap(), y1);
    }

    #[test]
    fn untrained_zero_network_returns_fill() {
        let p = NetworkParams::<f64>::zeros(&tiny()).unwrap();
        let (y1, y2, m) = inputs(1, 8, 8);
        let xh = reconstruct(&p, &y1, &y2, &m, DataRange::default()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !m.is_valid(y, x) {
                    assert_eq!(xh.get(0, 0, y, x), 0.0);
                } else {
                    assert_eq!(xh.get(0, 0, y, x), y1.get(0, 0, y, x));
                }
            }
        }
    }

    #[test]
    fn ablation_layer_lists() {
        let mut c = tiny();
        c.multiscale_block = false;
        let p = NetworkParams::<f64>::zeros(&c).unwrap();
        assert!(p.layer("ms_single").is_some() && p.layer("ms3").is_none());
        let mut c = tiny();
        c.boosting_path = false;
        let p = NetworkParams::<f64>::zeros(&c).unwrap();
        assert!(p.layer("boost_conv").is_none());
        assert!(c.boost_junctions().is_empty());
        assert_eq!(tiny().boost_junctions(), vec![0, 3]);
    }
}
