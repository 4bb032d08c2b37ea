use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stscnn::baselines::{copy_fill, lf_reconstruct};
use stscnn::config::ExperimentConfig;
use stscnn::experiments::{self, prepare, run_ablation, run_regsweep, train_model, write_ablation_csv, Method};
use stscnn::io::{export_image, read_mask, read_tensor, write_mask, write_tensor, ImageBands};
use stscnn::masks::{apply_mask, MaskSpec, SlcOffGeometry};
use stscnn::metrics::{evaluate, write_metrics_csv, MetricsReport, Scope};
use stscnn::network::{reconstruct, DataRange, NetworkParams, TrainingSample};
use stscnn::synth::{synth_scene, Relation};
use stscnn::tensor::DType;
use stscnn::trainer::{load_checkpoint, save_checkpoint, train, write_loss_trace};
use stscnn::{gradcheck, StsError, Tensor4};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "stscnn",
    version,
    about = "Missing-data reconstruction for multi-band rasters"
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its auxiliary image.
    Synth(SynthArgs),
    /// Generate a degradation mask.
    Mask(MaskArgs),
    /// Blank the masked pixels of an image.
    Apply(ApplyArgs),
    /// Train a network on synthetic data or on supplied rasters.
    Train(TrainArgs),
    /// Fill the gaps of an image with a trained network.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against the truth.
    Evaluate(EvaluateArgs),
    /// Run a classical gap filler.
    Baseline(BaselineArgs),
    /// Finite-difference check of the network gradients.
    Gradcheck,
    /// Train the four ablation variants.
    Ablate,
    /// Evaluate under registration errors of the auxiliary image.
    Regsweep(RegsweepArgs),
    /// Render bands of a tensor file as PGM or PPM.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    bands: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, value_enum, default_value_t = RelationArg::Nonlinear)]
    relation: RelationArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RelationArg {
    Affine,
    Nonlinear,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MaskKind {
    ModisStripes,
    SlcOff,
    Cloud,
    CloudPlusSlc,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// Pattern; defaults to the configuration's mask, else stripes.
    #[arg(long, value_enum)]
    kind: Option<MaskKind>,
    #[arg(long, default_value_t = 0.2)]
    coverage: f64,
    #[arg(long, default_value_t = 6.0)]
    smoothness: f64,
}

#[derive(Args, Debug)]
struct ApplyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    fill: f64,
}

#[derive(Args, Debug)]
struct SceneFiles {
    /// Ground truth tensor.
    #[arg(long, requires_all = ["aux", "mask"])]
    truth: Option<PathBuf>,
    /// Auxiliary image tensor.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Mask tensor (1 = valid).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    files: SceneFiles,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corrupted image (gaps zero-filled).
    #[arg(long)]
    y1: PathBuf,
    #[arg(long)]
    aux: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Label written in the method column.
    #[arg(long, default_value = "estimate")]
    method: String,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaselineKind {
    CopyFill,
    Lf,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineKind,
    #[arg(long)]
    y1: PathBuf,
    #[arg(long)]
    aux: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Polynomial degree of the band fit.
    #[arg(long, default_value_t = 1)]
    degree: usize,
}

#[derive(Args, Debug)]
struct RegsweepArgs {
    /// Trained model; trained from the configuration when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Band rendered as greyscale.
    #[arg(long, conflicts_with = "rgb")]
    band: Option<usize>,
    /// Three comma-separated bands rendered as colour.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    rgb: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(StsError),
    Numeric(String),
}

impl From<StsError> for Failure {
    fn from(e: StsError) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(StsError::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Ctx {
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> std::result::Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Usage("this command needs --out".into()))
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn range(&self) -> DataRange {
        self.cfg.dataset.data_range
    }
}

fn load_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn read_f64(path: &Path) -> std::result::Result<Tensor4<f64>, Failure> {
    Ok(read_tensor(path)?.into_real())
}

fn ensure_dir(p: &Path) -> std::io::Result<()> {
    fs::create_dir_all(p)
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Outcome {
    let relation = match a.relation {
        RelationArg::Affine => Relation::Affine,
        RelationArg::Nonlinear => Relation::Nonlinear,
    };
    let s = synth_scene(a.bands, a.height, a.width, ctx.seed(), relation)?;
    let dir = ctx.out()?;
    ensure_dir(dir)?;
    write_tensor(&dir.join("truth.stsr"), &s.x)?;
    write_tensor(&dir.join("aux.stsr"), &s.aux)?;
    eprintln!("wrote {}×{}×{} scene to {}", a.bands, a.height, a.width, dir.display());
    Ok(())
}

fn cmd_mask(ctx: &Ctx, a: &MaskArgs, from_config: bool) -> Outcome {
    let spec = match a.kind {
        None if from_config => ctx.cfg.mask.clone(),
        None | Some(MaskKind::ModisStripes) => MaskSpec::default(),
        Some(MaskKind::SlcOff) => MaskSpec::SlcOff {
            geometry: SlcOffGeometry::default(),
        },
        Some(MaskKind::Cloud) => MaskSpec::Cloud {
            coverage: a.coverage,
            smoothness: a.smoothness,
        },
        Some(MaskKind::CloudPlusSlc) => MaskSpec::CloudPlusSlc {
            coverage: a.coverage,
            smoothness: a.smoothness,
            geometry: SlcOffGeometry::default(),
        },
    };
    let m = spec.generate(a.height, a.width, ctx.seed())?;
    write_mask(ctx.out()?, &m)?;
    eprintln!("mask coverage {:.4}", m.coverage());
    Ok(())
}

fn cmd_apply(ctx: &Ctx, a: &ApplyArgs) -> Outcome {
    let x = read_f64(&a.input)?;
    let m = read_mask(&a.mask)?;
    write_tensor(ctx.out()?, &apply_mask(&x, &m, a.fill)?)?;
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let dir = ctx.out()?;
    ensure_dir(dir)?;
    let cfg = &ctx.cfg;
    let ck = dir.join("checkpoints");
    let trace = match &a.files.truth {
        Some(truth) => {
            let x = read_f64(truth)?;
            let aux = read_f64(a.files.aux.as_ref().expect("clap requires aux"))?;
            let mask = read_mask(a.files.mask.as_ref().expect("clap requires mask"))?;
            let scene = TrainingSample::new(x, aux, mask)?;
            let (patches, _) = stscnn::trainer::extract_patches(&scene, cfg.train.patch_size, cfg.train.patch_stride)?;
            match cfg.train.precision {
                DType::F64 => train(&patches, &cfg.train, &cfg.network, Some(&ck))?.trace,
                DType::F32 => {
                    let p: Vec<TrainingSample<f32>> = patches.iter().map(|s| s.cast()).collect();
                    train(&p, &cfg.train, &cfg.network, Some(&ck))?.trace
                }
            }
        }
        None => {
            let data = prepare(cfg, ctx.seed())?;
            let (params, trace) = train_model(cfg, &cfg.network, &data)?;
            save_checkpoint(&params, &ck.join("final"))?;
            let run = experiments::evaluate_method(Method::StsCnn, Some(&params), &data.heldout, cfg)?;
            eprintln!("held-out gap mPSNR {:.3} dB", run.gap_only.mpsnr);
            trace
        }
    };
    write_loss_trace(BufWriter::new(File::create(dir.join("loss_trace.csv"))?), &trace)?;
    if let Some(last) = trace.last() {
        eprintln!("trained {} epochs, final loss {:.6e}", trace.len(), last.mean_loss);
    }
    Ok(())
}

fn cmd_reconstruct(ctx: &Ctx, a: &ReconstructArgs) -> Outcome {
    let params: NetworkParams<f64> = load_checkpoint(&a.checkpoint)?;
    let y1 = read_f64(&a.y1)?;
    let aux = read_f64(&a.aux)?;
    let m = read_mask(&a.mask)?;
    let xh = reconstruct(&params, &y1, &aux, &m, ctx.range())?;
    if !xh.all_finite() {
        return Err(Failure::Numeric("reconstruction contains non-finite values".into()));
    }
    write_tensor(ctx.out()?, &xh)?;
    Ok(())
}

fn write_reports(out: &Path, method: &str, reports: &[MetricsReport], shift: i32, seed: u64) -> Outcome {
    let rows: Vec<_> = reports.iter().flat_map(|r| r.rows(method, shift, seed)).collect();
    write_metrics_csv(BufWriter::new(File::create(out)?), &rows)?;
    let json = out.with_extension("json");
    fs::write(json, serde_json::to_vec_pretty(reports).map_err(StsError::from)?)?;
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Outcome {
    let x = read_f64(&a.truth)?;
    let e = read_f64(&a.estimate)?;
    let m = read_mask(&a.mask)?;
    let peak = ctx.range().peak();
    let reports = [
        evaluate(&x, &e, &m, Scope::Full, peak)?,
        evaluate(&x, &e, &m, Scope::GapOnly, peak)?,
    ];
    write_reports(ctx.out()?, &a.method, &reports, 0, ctx.seed())?;
    eprintln!(
        "mPSNR full {:.3} dB, gap_only {:.3} dB",
        reports[0].mpsnr, reports[1].mpsnr
    );
    Ok(())
}

fn cmd_baseline(ctx: &Ctx, a: &BaselineArgs) -> Outcome {
    let y1 = read_f64(&a.y1)?;
    let aux = read_f64(&a.aux)?;
    let m = read_mask(&a.mask)?;
    let xh = match a.method {
        BaselineKind::CopyFill => copy_fill(&y1, &aux, &m)?,
        BaselineKind::Lf => {
            let (xh, fits) = lf_reconstruct(&y1, &aux, &m, a.degree)?;
            for (b, f) in fits.iter().enumerate() {
                eprintln!("band {b}: coefficients {:?}, rms {:.4e}", f.coeffs, f.rms);
            }
            xh
        }
    };
    write_tensor(ctx.out()?, &xh)?;
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> Outcome {
    let r = gradcheck::run_default(ctx.seed())?;
    eprintln!(
        "checked {} parameters, max relative error {:.3e} ({}[{}])",
        r.checked, r.max_rel_error, r.worst_layer, r.worst_index
    );
    if let Some(out) = &ctx.out {
        let doc = serde_json::json!({
            "checked": r.checked,
            "max_rel_error": r.max_rel_error,
            "worst_layer": r.worst_layer,
            "worst_index": r.worst_index,
        });
        fs::write(out, serde_json::to_vec_pretty(&doc).map_err(StsError::from)?)?;
    }
    if r.max_rel_error < 1e-5 {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: {:.3e}",
            r.max_rel_error
        )))
    }
}

fn cmd_ablate(ctx: &Ctx) -> Outcome {
    let dir = ctx.out()?;
    ensure_dir(dir)?;
    let outcome = run_ablation(&ctx.cfg)?;
    write_ablation_csv(BufWriter::new(File::create(dir.join("ablation.csv"))?), &outcome.rows)?;
    for v in experiments::Variant::ALL {
        eprintln!("{:>14}: mean mPSNR {:.3} dB", v.label(), outcome.mean_mpsnr(v));
    }
    Ok(())
}

fn cmd_regsweep(ctx: &Ctx, a: &RegsweepArgs) -> Outcome {
    let dir = ctx.out()?;
    ensure_dir(dir)?;
    let cfg = &ctx.cfg;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare(cfg, seed)?;
        let params = match &a.checkpoint {
            Some(p) => load_checkpoint::<f64>(p)?,
            None => train_model(cfg, &cfg.network, &data)?.0,
        };
        rows.extend(run_regsweep(cfg, &params, &data.heldout, seed)?);
    }
    write_metrics_csv(BufWriter::new(File::create(dir.join("regsweep.csv"))?), &rows)?;
    for m in Method::ALL {
        let series = experiments::sweep_series(&rows, m, cfg.scope);
        let text: Vec<String> = series.iter().map(|(s, p)| format!("{s}:{p:.2}")).collect();
        eprintln!("{:>9}: {}", m.label(), text.join(" "));
    }
    Ok(())
}

fn cmd_export(ctx: &Ctx, a: &ExportArgs) -> Outcome {
    let x = read_f64(&a.input)?;
    let bands = match (&a.rgb, a.band) {
        (Some(v), _) => ImageBands::Rgb([v[0], v[1], v[2]]),
        (None, b) => ImageBands::Gray(b.unwrap_or(0)),
    };
    export_image(&x, bands, ctx.range(), ctx.out()?)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    let ctx = Ctx {
        cfg: load_config(cli)?,
        out: cli.out.clone(),
    };
    if cli.deterministic {
        log::info!("deterministic mode: single-threaded execution");
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Mask(a) => cmd_mask(&ctx, a, cli.config.is_some()),
        Command::Apply(a) => cmd_apply(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Reconstruct(a) => cmd_reconstruct(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Baseline(a) => cmd_baseline(&ctx, a),
        Command::Gradcheck => cmd_gradcheck(&ctx),
        Command::Ablate => cmd_ablate(&ctx),
        Command::Regsweep(a) => cmd_regsweep(&ctx, a),
        Command::Export(a) => cmd_export(&ctx, a),
    }
}

fn exit_code(e: &StsError) -> u8 {
    match e {
        StsError::NonFinite(_) | StsError::Internal(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
