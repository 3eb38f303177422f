mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use fbi_core::bsn::{self, BlindSpotNet, NetConfig};
use fbi_core::config::RunConfig;
use fbi_core::data::{self, ImageStyle};
use fbi_core::denoiser::{self, ParamSource};
use fbi_core::io::{self, BitDepth, Checkpoint};
use fbi_core::pge::{self, PgeNet};
use fbi_core::rng::{self, stage};
use fbi_core::{metrics, noise, var_est, NoiseParams, SynthesisMode};

#[derive(Parser)]
#[command(name = "fbi", version, about = "Blind Poisson-Gaussian image denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add Poisson-Gaussian noise to clean images, or to generated ones.
    Synth(SynthArgs),
    /// Estimate noise: eigenvalue variance of the raw image, or (alpha, sigma).
    Estimate(EstimateArgs),
    /// Train the noise-parameter estimator on noisy images.
    TrainPge(TrainPgeArgs),
    /// Train the blind-spot denoiser on noisy images.
    TrainDenoiser(TrainDenoiserArgs),
    /// Denoise images with trained checkpoints.
    Denoise(DenoiseArgs),
    /// PSNR and SSIM of predictions against clean references.
    Eval(EvalArgs),
    /// Offset set, receptive field, parameter count and blind-spot verdict.
    AnalyzeNet(AnalyzeArgs),
    /// Grid of (alpha, sigma) whose transform stabilizes a patch to unit variance.
    Locus(LocusArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Args)]
struct NoiseArgs {
    /// Fixed alpha; with --sigma, replaces the estimator checkpoint.
    #[arg(long, requires = "sigma")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    sigma: Option<f64>,
}

impl NoiseArgs {
    fn fixed(&self) -> Result<Option<NoiseParams>> {
        match (self.alpha, self.sigma) {
            (Some(a), Some(s)) => Ok(Some(NoiseParams::new(a, s)?)),
            _ => Ok(None),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Clean image or directory of images.
    #[arg(long = "in", conflicts_with = "generate")]
    input: Option<PathBuf>,
    /// Generate this many textured clean images instead of reading --in.
    #[arg(long)]
    generate: Option<usize>,
    /// Side of generated images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Directory for the generated clean images.
    #[arg(long)]
    clean_out: Option<PathBuf>,
    #[command(flatten)]
    noise: NoiseArgs,
    /// literal or mean-preserving; defaults to the config value.
    #[arg(long)]
    mode: Option<SynthesisMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Supplies seed, mode and the per-image parameter ranges.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "16")]
    depth: Depth,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Eta,
    Pge,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "eta")]
    method: Method,
    /// Estimator checkpoint, required for --method pge.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPgeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDenoiserArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["alpha", "sigma"])]
    pge_ckpt: Option<PathBuf>,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, conflicts_with_all = ["alpha", "sigma"])]
    pge_ckpt: Option<PathBuf>,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    net_ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "16")]
    depth: Depth,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    /// Also write one JSON record per image here.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Builtin network name or network description file.
    #[arg(long, default_value = "fbi-safe-17")]
    config: String,
    /// Print every reachable offset.
    #[arg(long)]
    offsets: bool,
}

#[derive(Args)]
struct LocusArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Crop `top,left,size` of the image to use as the patch.
    #[arg(long)]
    crop: Option<String>,
    /// lo:hi:n
    #[arg(long, default_value = "0.001:0.05:50")]
    alpha_grid: String,
    /// lo:hi:n
    #[arg(long, default_value = "0:0.05:51")]
    sigma_grid: String,
    #[arg(long, default_value_t = 0.03)]
    tol: f64,
    /// Write the full grid of estimates as a tensor file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log::info!("resolved config:\n{cfg}");
    Ok(cfg)
}

fn resolve_net(spec: &str) -> Result<NetConfig> {
    if let Some(cfg) = NetConfig::builtin(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "{spec} is neither a builtin network ({}) nor a file",
            bsn::BUILTIN_NAMES.join(", ")
        );
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    NetConfig::parse(&text).with_context(|| format!("parsing {spec}"))
}

fn required<'a>(v: &'a Option<PathBuf>, cfg: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    v.as_deref()
        .or(cfg.as_deref())
        .with_context(|| format!("--{what} not given and not set in the config"))
}

fn load_pge(path: &Path) -> Result<PgeNet> {
    Checkpoint::read(path)
        .and_then(|c| c.to_pge())
        .with_context(|| format!("loading estimator checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let (names, clean) = match (&a.input, a.generate) {
        (Some(input), _) => {
            let paths = files::list_pgm(input)?;
            let clean = files::read_all(&paths)?;
            (paths, clean)
        }
        (None, Some(n)) => {
            let clean = data::clean_corpus(n, a.size, a.size, &ImageStyle::default(), cfg.seed)?;
            let names: Vec<PathBuf> = (0..n).map(|i| PathBuf::from(format!("img_{i:04}.pgm"))).collect();
            if let Some(dir) = &a.clean_out {
                for (name, img) in names.iter().zip(&clean) {
                    io::write_pgm(&files::output_path(dir, name, true)?, img, a.depth.into())?;
                }
            }
            (names, clean)
        }
        (None, None) => bail!("give --in or --generate"),
    };
    let fixed = a.noise.fixed()?;
    let mut draw = rng::stage_stream(cfg.seed, stage::MIXTURE);
    let many = names.len() > 1 || a.generate.is_some();
    for (i, (name, x)) in names.iter().zip(&clean).enumerate() {
        let p = match fixed {
            Some(p) => p,
            None => NoiseParams::new(
                draw.random_range(cfg.alpha_range.0..=cfg.alpha_range.1),
                draw.random_range(cfg.sigma_range.0..=cfg.sigma_range.1),
            )?,
        };
        let y = noise::synthesize(x, p, cfg.mode, rng::stage_seed(cfg.seed, i as u64))?;
        let out = files::output_path(&a.out, name, many)?;
        io::write_pgm(&out, &y, a.depth.into())?;
        println!("{}\talpha={}\tsigma={}", out.display(), p.alpha, p.sigma);
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let paths = files::list_pgm(&a.input)?;
    let net = match a.method {
        Method::Pge => Some(load_pge(a.ckpt.as_deref().context("--method pge needs --ckpt")?)?),
        Method::Eta => None,
    };
    for path in &paths {
        let y = io::read_pgm(path)?;
        match &net {
            None => {
                let v = var_est::eta(&y, &cfg.estimator)?;
                println!("{}\tvariance={v:.6e}\tstd={:.6}", path.display(), v.sqrt());
            }
            Some(net) => {
                let p = ParamSource::Estimator(net).params_for(&y)?;
                println!("{}\talpha={:.6}\tsigma={:.6}", path.display(), p.alpha, p.sigma);
            }
        }
    }
    Ok(())
}

fn train_pge(a: TrainPgeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let images = files::read_all(&files::list_pgm(required(&a.data, &cfg.data, "data")?)?)?;
    let out = required(&a.out, &cfg.out, "out")?;
    let patches = data::random_patches(&images, cfg.pge_patches, cfg.pge_patch_size, cfg.seed)?;
    let mut net = PgeNet::new(cfg.pge(), cfg.seed)?;
    log::info!("estimator: {} parameters, {} patches", net.num_params(), patches.len());
    let history = pge::train_pge(&mut net, &patches, &cfg.pge_train())?;
    if history.floor_warnings > 0 {
        log::warn!("alpha estimate hit its floor {} times", history.floor_warnings);
    }
    Checkpoint::from_pge(&net).write(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train_denoiser(a: TrainDenoiserArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let images = files::read_all(&files::list_pgm(required(&a.data, &cfg.data, "data")?)?)?;
    let out = required(&a.out, &cfg.out, "out")?;
    let pge_net = a.pge_ckpt.as_deref().map(load_pge).transpose()?;
    let source = match (a.noise.fixed()?, &pge_net) {
        (Some(p), _) => ParamSource::Fixed(p),
        (None, Some(net)) => ParamSource::Estimator(net),
        (None, None) => bail!("give --pge-ckpt or --alpha and --sigma"),
    };
    let mut net = BlindSpotNet::build(&resolve_net(&cfg.net)?, cfg.seed)?;
    log::info!("denoiser {}: {} parameters", net.config().name, net.num_params());
    let prepared = images
        .iter()
        .map(|y| denoiser::prepare(y, source))
        .collect::<fbi_core::Result<Vec<_>>>()?;
    denoiser::train_prepared(&mut net, &prepared, &cfg.denoiser_train(), |e, loss| {
        log::info!("epoch {}: loss {loss:.6}", e + 1);
    })?;
    Checkpoint::from_denoiser(&net, cfg.mode).write(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let (net, mode) = Checkpoint::read(&a.net_ckpt)
        .and_then(|c| c.to_denoiser())
        .with_context(|| format!("loading denoiser checkpoint {}", a.net_ckpt.display()))?;
    let pge_net = a.pge_ckpt.as_deref().map(load_pge).transpose()?;
    let source = match (a.noise.fixed()?, &pge_net) {
        (Some(p), _) => ParamSource::Fixed(p),
        (None, Some(net)) => ParamSource::Estimator(net),
        (None, None) => bail!("give --pge-ckpt or --alpha and --sigma"),
    };
    let paths = files::list_pgm(&a.input)?;
    for path in &paths {
        let y = io::read_pgm(path)?;
        let d = denoiser::denoise(&y, source, &net, mode)?;
        let out = files::output_path(&a.out, path, paths.len() > 1)?;
        io::write_pgm(&out, &d.image, a.depth.into())?;
        println!(
            "{}\talpha={:.6}\tsigma={:.6}\t{:.3}s",
            out.display(),
            d.params.alpha,
            d.params.sigma,
            d.elapsed.as_secs_f64()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = files::list_pgm(&a.pred)?;
    let single_clean = a.clean.is_file();
    let mut lines = Vec::new();
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    println!("{:<40} {:>9} {:>7}", "image", "PSNR(dB)", "SSIM");
    for pred_path in &preds {
        let clean_path = if single_clean {
            a.clean.clone()
        } else {
            a.clean.join(pred_path.file_name().context("prediction has no file name")?)
        };
        let pred = io::read_pgm(pred_path)?;
        let clean = io::read_pgm(&clean_path).with_context(|| format!("reading {}", clean_path.display()))?;
        let p = metrics::psnr(&pred, &clean)?;
        let s = metrics::ssim(&pred, &clean)?;
        sum_p += p;
        sum_s += s;
        println!("{:<40} {p:>9.2} {s:>7.4}", pred_path.display().to_string());
        lines.push(serde_json::json!({ "path": pred_path.display().to_string(), "psnr": p, "ssim": s }).to_string());
    }
    let n = preds.len() as f64;
    println!("{:<40} {:>9.2} {:>7.4}", "mean", sum_p / n, sum_s / n);
    if let Some(path) = &a.jsonl {
        io::write_atomic(path, (lines.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<bool> {
    let cfg = resolve_net(&a.config)?;
    let set = bsn::displacement_set(&cfg)?;
    let (h, w) = set.receptive_field();
    println!("network: {}", cfg.name);
    println!("spatial layers: {}", cfg.layers.len());
    println!("parameters: {}", cfg.count_parameters());
    println!("displacement set: {} offsets, {} holes in the {h}x{w} box", set.len(), set.holes());
    if a.offsets {
        for (y, x) in set.offsets() {
            println!("  ({y},{x})");
        }
    }
    match bsn::check_blind_spot(&set) {
        Ok(()) => {
            println!("blind-spot: PASS, RF {h}×{w}");
            Ok(true)
        }
        Err(fbi_core::Error::BlindSpotViolation { path }) => {
            println!("blind-spot: FAIL, centre reachable via {path}");
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn locus(a: LocusArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let img = io::read_pgm(&a.input)?;
    let patch = match &a.crop {
        Some(spec) => {
            let v: Vec<usize> = spec
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("bad --crop {spec:?}"))?;
            let [top, left, size] = v.as_slice() else {
                bail!("--crop takes top,left,size");
            };
            img.crop(*top, *left, *size, *size)?
        }
        None => img,
    };
    let alphas = files::parse_grid(&a.alpha_grid)?;
    let sigmas = files::parse_grid(&a.sigma_grid)?;
    let locus = pge::stabilization_locus(&patch, &alphas, &sigmas, a.tol, &cfg.estimator)?;
    let points = locus.points();
    println!("alpha\tsigma\teta");
    for (ia, &al) in alphas.iter().enumerate() {
        for (is, &s) in sigmas.iter().enumerate() {
            let e = locus.eta_at(ia, is);
            if (e - 1.0).abs() <= a.tol {
                println!("{al:.6}\t{s:.6}\t{e:.4}");
            }
        }
    }
    log::info!("{} of {} grid points on the locus", points.len(), locus.eta.len());
    if let Some(out) = &a.out {
        let grid = fbi_core::tensor::Tensor::new(&[alphas.len(), sigmas.len()], locus.eta.clone())?;
        io::write_tensor(out, &grid)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Estimate(a) => estimate(a)?,
        Command::TrainPge(a) => train_pge(a)?,
        Command::TrainDenoiser(a) => train_denoiser(a)?,
        Command::Denoise(a) => denoise(a)?,
        Command::Eval(a) => eval(a)?,
        Command::AnalyzeNet(a) => return analyze(a),
        Command::Locus(a) => locus(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
