//! Ablation and registration-error experiments on synthetic scenes.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{copy_fill, lf_reconstruct};
use crate::config::ExperimentConfig;
use crate::error::{Result, StsError};
use crate::masks::shift_image;
use crate::metrics::{evaluate, MetricsReport, MetricsRow, Scope};
use crate::network::{reconstruct, NetworkConfig, NetworkParams, TrainingSample};
use crate::synth::synth_scene;
use crate::tensor::DType;
use crate::trainer::{extract_patches, train, EpochRecord};

/// Training patches and a held-out evaluation scene for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub patches: Vec<TrainingSample<f64>>,
    pub heldout: TrainingSample<f64>,
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Build a scene and its degraded observation. Stream 0 is held out.
fn scene(cfg: &ExperimentConfig, seed: u64, stream: u64) -> Result<TrainingSample<f64>> {
    let d = &cfg.dataset;
    let s = mix(seed, stream);
    let sc = synth_scene(d.bands, d.height, d.width, s, d.relation)?;
    let mask = cfg.mask.generate(d.height, d.width, s ^ 0xA5A5)?;
    TrainingSample::new(sc.x, sc.aux, mask)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let mut patches = Vec::new();
    for k in 0..cfg.dataset.train_scenes {
        let s = scene(cfg, seed, k as u64 + 1)?;
        patches.extend(extract_patches(&s, cfg.train.patch_size, cfg.train.patch_stride)?.0);
    }
    Ok(SeedData {
        seed,
        patches,
        heldout: scene(cfg, seed, 0)?,
    })
}

/// Reconstruction methods compared in the reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    StsCnn,
    CopyFill,
    Lf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::StsCnn, Method::CopyFill, Method::Lf];

    pub fn label(self) -> &'static str {
        match self {
            Method::StsCnn => "sts_cnn",
            Method::CopyFill => "copy_fill",
            Method::Lf => "lf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Both-scope metrics of one method on one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub full: MetricsReport,
    pub gap_only: MetricsReport,
}

impl MethodReport {
    pub fn scoped(&self, scope: Scope) -> &MetricsReport {
        match scope {
            Scope::Full => &self.full,
            Scope::GapOnly => &self.gap_only,
        }
    }

    pub fn rows(&self, shift: i32, seed: u64) -> Vec<MetricsRow> {
        let mut rows = self.full.rows(self.method.label(), shift, seed);
        rows.extend(self.gap_only.rows(self.method.label(), shift, seed));
        rows
    }
}

/// Reconstruct `sample` with `method` and score it against `sample.x`.
pub fn evaluate_method(
    method: Method,
    params: Option<&NetworkParams<f64>>,
    sample: &TrainingSample<f64>,
    cfg: &ExperimentConfig,
) -> Result<MethodReport> {
    let range = cfg.dataset.data_range;
    let estimate = match method {
        Method::StsCnn => {
            let p = params.ok_or_else(|| StsError::Argument("sts_cnn evaluation needs a trained model".into()))?;
            reconstruct(p, &sample.y1, &sample.y2, &sample.mask, range)?
        }
        Method::CopyFill => copy_fill(&sample.y1, &sample.y2, &sample.mask)?,
        Method::Lf => lf_reconstruct(&sample.y1, &sample.y2, &sample.mask, cfg.lf_degree)?.0,
    };
    let peak = range.peak();
    Ok(MethodReport {
        method,
        full: evaluate(&sample.x, &estimate, &sample.mask, Scope::Full, peak)?,
        gap_only: evaluate(&sample.x, &estimate, &sample.mask, Scope::GapOnly, peak)?,
    })
}

/// Train on the seed's patches in the configured precision; the returned
/// parameters are widened to f64 for evaluation.
pub fn train_model(
    cfg: &ExperimentConfig,
    network: &NetworkConfig,
    data: &SeedData,
) -> Result<(NetworkParams<f64>, Vec<EpochRecord>)> {
    let mut tc = cfg.train.clone();
    tc.seed = mix(cfg.train.seed, data.seed);
    match cfg.train.precision {
        DType::F64 => {
            let out = train(&data.patches, &tc, network, None)?;
            Ok((out.params, out.trace))
        }
        DType::F32 => {
            let patches: Vec<TrainingSample<f32>> = data.patches.iter().map(|p| p.cast()).collect();
            let out = train(&patches, &tc, network, None)?;
            Ok((out.params.cast(), out.trace))
        }
    }
}

/// One trained model and its held-out scores.
#[derive(Debug, Clone)]
pub struct LearningRun {
    pub seed: u64,
    pub params: NetworkParams<f64>,
    pub trace: Vec<EpochRecord>,
    pub reports: Vec<MethodReport>,
    /// Wall-clock training time.
    pub train_seconds: f64,
}

impl LearningRun {
    pub fn report(&self, method: Method) -> &MethodReport {
        self.reports
            .iter()
            .find(|r| r.method == method)
            .expect("every method is evaluated")
    }
}

/// Train `network` on the seed's data and evaluate all methods on the held-out scene.
pub fn run_learning(cfg: &ExperimentConfig, network: &NetworkConfig, data: &SeedData) -> Result<LearningRun> {
    let started = Instant::now();
    let (params, trace) = train_model(cfg, network, data)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let reports = Method::ALL
        .iter()
        .map(|&m| evaluate_method(m, Some(&params), &data.heldout, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LearningRun {
        seed: data.seed,
        params,
        trace,
        reports,
        train_seconds,
    })
}

/// Component removed in an ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMultiscale,
    NoDilation,
    NoBoost,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMultiscale,
        Variant::NoDilation,
        Variant::NoBoost,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultiscale => "no_multiscale",
            Variant::NoDilation => "no_dilation",
            Variant::NoBoost => "no_boost",
        }
    }

    pub fn apply(self, base: &NetworkConfig) -> NetworkConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoMultiscale => c.multiscale_block = false,
            Variant::NoDilation => c.dilations.iter_mut().for_each(|d| *d = 1),
            Variant::NoBoost => c.boosting_path = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub param_count: usize,
    pub receptive_field: usize,
    /// Held-out mPSNR in the configured scope.
    pub mpsnr: f64,
    pub mssim: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// Full-model runs, one per seed, with baseline scores attached.
    pub full_runs: Vec<LearningRun>,
}

impl AblationOutcome {
    /// Mean held-out mPSNR of a variant across seeds.
    pub fn mean_mpsnr(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.mpsnr)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train every variant on identical data for every seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut full_runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare(cfg, seed)?;
        for v in Variant::ALL {
            let net = v.apply(&cfg.network);
            let run = run_learning(cfg, &net, &data)?;
            let rep = run.report(Method::StsCnn).scoped(cfg.scope);
            log::info!("ablation seed {seed} {}: mpsnr {:.3}", v.label(), rep.mpsnr);
            rows.push(AblationRow {
                variant: v,
                seed,
                param_count: run.params.param_count(),
                receptive_field: net.receptive_field(),
                mpsnr: rep.mpsnr,
                mssim: rep.mssim,
            });
            if v == Variant::Full {
                full_runs.push(run);
            }
        }
    }
    Ok(AblationOutcome { rows, full_runs })
}

pub fn write_ablation_csv<W: std::io::Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::metrics::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Score all methods with the auxiliary image misregistered by each configured shift.
pub fn run_regsweep(
    cfg: &ExperimentConfig,
    params: &NetworkParams<f64>,
    sample: &TrainingSample<f64>,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let [ux, uy] = cfg.shift_direction;
    let mut rows = Vec::new();
    for &k in &cfg.shifts {
        let shifted = TrainingSample {
            y2: shift_image(&sample.y2, ux * k, uy * k),
            ..sample.clone()
        };
        for m in Method::ALL {
            rows.extend(evaluate_method(m, Some(params), &shifted, cfg)?.rows(k, seed));
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ys` against `xs`.
pub fn trend_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Scene-level value of `method` per shift, in shift order.
pub fn sweep_series(rows: &[MetricsRow], method: Method, scope: Scope) -> Vec<(i32, f64)> {
    rows.iter()
        .filter(|r| r.method == method.label() && r.scope == scope && r.band == "all")
        .map(|r| (r.shift, r.psnr))
        .collect()
}
