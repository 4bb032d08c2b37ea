//! Patch extraction, the SGD training loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{Activation, ConvLayerParams};
use crate::error::{Result, StsError};
use crate::io::{read_tensor, write_tensor};
use crate::network::{
    build_network, loss_and_gradients, LossNormalization, NetworkConfig, NetworkParams, TrainingSample,
};
use crate::optim::sgd_step;
use crate::tensor::{DType, Real, Shape, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Factor applied to the learning rate every `decline_every` epochs.
    pub gamma: f64,
    pub decline_every: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub seed: u64,
    pub precision: DType,
    pub loss_normalization: LossNormalization,
    /// Epoch interval between checkpoints when a checkpoint directory is given.
    pub checkpoint_every: usize,
    /// Stop after this many parameter updates even if epochs remain.
    pub max_iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 0.01,
            gamma: 0.1,
            decline_every: 20,
            momentum: 0.9,
            batch_size: 8,
            patch_size: 40,
            patch_stride: 40,
            seed: 0,
            precision: DType::F64,
            loss_normalization: LossNormalization::Pixel,
            checkpoint_every: 10,
            max_iterations: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StsError::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.decline_every == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("decline_every, batch_size and checkpoint_every must be at least 1".into());
        }
        if self.patch_size == 0 || self.patch_stride == 0 {
            return bad("patch size and stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch: `base_lr · gamma^⌊epoch / decline_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(StsError::Argument(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if cfg.decline_every == 0 {
        return Err(StsError::Config("decline_every must be at least 1".into()));
    }
    Ok(cfg.base_lr * cfg.gamma.powi((epoch / cfg.decline_every) as i32))
}

/// Grid crops of a scene. Patches with no valid pixel are dropped; the second
/// value is how many were dropped.
pub fn extract_patches<T: Real>(
    scene: &TrainingSample<T>,
    size: usize,
    stride: usize,
) -> Result<(Vec<TrainingSample<T>>, usize)> {
    let s = scene.x.shape();
    if size == 0 || stride == 0 {
        return Err(StsError::Argument("patch size and stride must be positive".into()));
    }
    if size > s.h || size > s.w {
        return Err(StsError::Argument(format!(
            "patch size {size} exceeds scene {}×{}",
            s.h, s.w
        )));
    }
    let mut out = Vec::new();
    let mut dropped = 0;
    for y in (0..=s.h - size).step_by(stride) {
        for x in (0..=s.w - size).step_by(stride) {
            let p = scene.crop(y, x, size, size)?;
            if p.mask.is_all_missing() {
                dropped += 1;
            } else {
                out.push(p);
            }
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} fully missing patches");
    }
    Ok((out, dropped))
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches of the batch-averaged loss.
    pub mean_loss: f64,
}

pub fn write_loss_trace<W: Write>(out: W, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r).map_err(crate::metrics::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_trace<R: std::io::Read>(input: R) -> Result<Vec<EpochRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(crate::metrics::csv_error))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub params: NetworkParams<T>,
    pub trace: Vec<EpochRecord>,
    pub iterations: usize,
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Train a freshly initialised network (seeded by `cfg.seed`).
pub fn train<T: Real>(
    dataset: &[TrainingSample<T>],
    cfg: &TrainConfig,
    net: &NetworkConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let params = build_network::<T>(net, cfg.seed)?;
    train_from(params, dataset, cfg, checkpoint_dir)
}

/// Continue training `params`. Checkpoints go to `dir/epoch_NNNN` and
/// `dir/final`; on a non-finite loss the last written checkpoint is kept
/// and an error is returned.
pub fn train_from<T: Real>(
    mut params: NetworkParams<T>,
    dataset: &[TrainingSample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(StsError::Argument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f5a_3b1e);
    let mut velocity = params.zero_gradients();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iterations >= m) {
                break;
            }
            let mut acc = params.zero_gradients();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, g) = loss_and_gradients(&params, &dataset[i], cfg.loss_normalization)?;
                batch_loss += loss.total;
                acc.accumulate(&g)?;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(StsError::NonFinite(format!(
                    "training loss at epoch {epoch}, iteration {iterations}"
                )));
            }
            acc.scale(T::of(1.0 / batch.len() as f64));
            sgd_step(params.layers_mut(), &acc, lr, cfg.momentum, &mut velocity)?;
            loss_sum += batch_loss;
            batches += 1;
            iterations += 1;
        }
        if batches > 0 {
            let rec = EpochRecord {
                epoch,
                lr,
                mean_loss: loss_sum / batches as f64,
            };
            log::debug!("epoch {epoch} lr {lr:e} loss {:.6e}", rec.mean_loss);
            trace.push(rec);
        }
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&params, &dir.join(format!("epoch_{:04}", epoch + 1)))?;
            }
        }
        if cfg.max_iterations.is_some_and(|m| iterations >= m) {
            break 'epochs;
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&params, &dir.join("final"))?;
    }
    Ok(TrainOutcome {
        params,
        trace,
        iterations,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    dilation: usize,
    activation: Activation,
    weights: String,
    biases: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: DType,
    param_count: usize,
    config: NetworkConfig,
    layers: Vec<LayerEntry>,
}

/// Write `params` as a directory holding `manifest.json` and one tensor file
/// per weight and bias array. The directory is replaced atomically.
pub fn save_checkpoint<T: Real>(params: &NetworkParams<T>, dir: &Path) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut layers = Vec::new();
    for (k, (name, l)) in params.names().iter().zip(params.layers()).enumerate() {
        let w_file = format!("{k:02}_{name}.weights.stsr");
        let b_file = format!("{k:02}_{name}.biases.stsr");
        let ws = Shape::new(l.out_channels, l.in_channels, l.kernel_size, l.kernel_size);
        write_tensor(&staging.join(&w_file), &Tensor4::new(ws, l.weights.clone())?)?;
        let bs = Shape::new(1, l.out_channels, 1, 1);
        write_tensor(&staging.join(&b_file), &Tensor4::new(bs, l.biases.clone())?)?;
        layers.push(LayerEntry {
            name: name.clone(),
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            kernel_size: l.kernel_size,
            dilation: l.dilation,
            activation: l.activation,
            weights: w_file,
            biases: b_file,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        param_count: params.param_count(),
        config: params.config().clone(),
        layers,
    };
    fs::write(staging.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Load a checkpoint into precision `T` (bitwise when `T` matches the stored dtype).
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<NetworkParams<T>> {
    let text = fs::read(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| StsError::format("manifest", e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(StsError::format(
            "manifest.format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        let mut l = ConvLayerParams::<T>::new(e.in_channels, e.out_channels, e.kernel_size, e.dilation, e.activation)?;
        let w = read_tensor(&dir.join(&e.weights))?;
        let b = read_tensor(&dir.join(&e.biases))?;
        if w.dtype() != manifest.dtype || b.dtype() != manifest.dtype {
            return Err(StsError::format(
                format!("layer {}", e.name),
                "dtype differs from manifest",
            ));
        }
        let ws = Shape::new(e.out_channels, e.in_channels, e.kernel_size, e.kernel_size);
        w.shape().expect_eq(&ws, &format!("checkpoint weights of {}", e.name))?;
        b.shape().expect_eq(
            &Shape::new(1, e.out_channels, 1, 1),
            &format!("checkpoint biases of {}", e.name),
        )?;
        l.weights = w.into_real::<T>().into_data();
        l.biases = b.into_real::<T>().into_data();
        layers.push(l);
    }
    let params = NetworkParams::from_layers(&manifest.config, layers)?;
    let names: Vec<&str> = manifest.layers.iter().map(|e| e.name.as_str()).collect();
    if params.names().iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(StsError::format(
            "manifest.layers",
            "layer names do not match the configuration",
        ));
    }
    if params.param_count() != manifest.param_count {
        return Err(StsError::format(
            "manifest.param_count",
            format!("{} declared, {} loaded", manifest.param_count, params.param_count()),
        ));
    }
    Ok(params)
}
