use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use patch_ep::config::build_config;
use patch_ep::forward::{simulate, DegradationOperator, Kernel, NoiseModel, OperatorSpec};
use patch_ep::gmm::{extract_patches, load_gmm, save_gmm, train_em, EmOptions};
use patch_ep::image::Image;
use patch_ep::metrics::{coverage, coverage_curve, psnr, CoverageReport};
use patch_ep::pipeline::{run_pipeline, Problem};
use patch_ep::verify::run_verify;
use patch_ep::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Patch-based expectation propagation for image restoration with uncertainty maps.
#[derive(Parser)]
#[command(name = "patch-ep", version, about)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an observation y = Hx + noise and record how it was made in a JSON sidecar.
    Degrade(DegradeArgs),
    /// Restore an observation; writes the posterior mean, variance map and reports.
    Restore(RestoreArgs),
    /// PSNR and credible-interval coverage of a restoration against a reference.
    Evaluate(EvaluateArgs),
    /// Fit a zero-mean patch GMM to training images.
    TrainGmm(TrainArgs),
    /// Print the effective restoration configuration with all defaults filled in.
    Config(ConfigArgs),
    /// Run the oracle comparisons and print a pass/fail JSON report.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DegradeArgs {
    /// Clean image (PGM, scaled to [0, 1], or PEPF float raster).
    #[arg(long)]
    input: PathBuf,
    /// Observation path; `.pgm` writes a clipped 8-bit image, anything else a float raster.
    #[arg(long)]
    output: PathBuf,
    /// `identity`, `mask:<missing fraction>`, `mask-file:<pgm>`, `uniform:<size>`,
    /// `gaussian:<size>:<sigma>` or `kernel:<file>`.
    #[arg(long, default_value = "identity")]
    operator: String,
    /// `gaussian:<sigma>` or `poisson`.
    #[arg(long)]
    noise: String,
    /// Intensity multiplier applied to the clean image before degradation (the peak for Poisson noise).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Seed for the noise draw and random masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sidecar path (defaults to the observation path with `.json` appended).
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    /// Observation written by `degrade` (or any raster matching the sidecar).
    #[arg(long)]
    observed: PathBuf,
    /// Sidecar written by `degrade` (defaults to the observation path with `.json` appended).
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Patch GMM written by `train-gmm`.
    #[arg(long)]
    gmm: PathBuf,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ep.damping=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run only the unshifted partition.
    #[arg(long)]
    single_partition: bool,
    /// Ground truth in the clean image's units; adds PSNRs to the report.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory for mean, variance, report, timing, configuration and trace files.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth image.
    #[arg(long)]
    reference: PathBuf,
    /// Posterior mean raster from `restore`.
    #[arg(long)]
    mean: PathBuf,
    /// Posterior variance raster from `restore`.
    #[arg(long)]
    variance: PathBuf,
    /// Multiplier applied to the reference to bring it into the restoration's units.
    #[arg(long, default_value_t = 1.0)]
    reference_scale: f64,
    /// Credible levels, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])]
    levels: Vec<f64>,
    /// Level of the binary coverage map.
    #[arg(long, default_value_t = 0.95)]
    map_level: f64,
    /// Writes the coverage map as a PGM (255 = truth outside the interval).
    #[arg(long)]
    coverage_map: Option<PathBuf>,
    /// Write the JSON result to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training images (PGM or PEPF).
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Number of mixture components.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Step between extracted patches.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// EM iteration limit.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Seed for the EM initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixture output file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ep.damping=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Shorter Monte Carlo chains.
    #[arg(long)]
    quick: bool,
    /// Write the JSON report to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    operator: OperatorSpec,
    noise: NoiseModel,
    scale: f64,
    seed: u64,
    input: PathBuf,
}

#[derive(Serialize)]
struct Evaluation {
    psnr: Option<f64>,
    coverage_level: f64,
    fraction_inside: f64,
    levels: Vec<f64>,
    coverage_curve: Vec<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NotPositiveDefinite(_) | Error::IndexOutOfRange { .. } => EXIT_INTERNAL,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult<()> {
    match paths.into_iter().find(|p| !p.is_file()) {
        Some(p) => Err(input_error(format!("input file not found: {}", p.display()))),
        None => Ok(()),
    }
}

fn parse_operator(text: &str, width: usize, height: usize, seed: u64) -> CliResult<DegradationOperator> {
    let parts: Vec<&str> = text.splitn(3, ':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| input_error(format!("bad number {s:?} in operator {text:?}")));
    let size = |s: &str| s.parse::<usize>().map_err(|_| input_error(format!("bad kernel size {s:?}")));
    let op = match parts.as_slice() {
        ["identity"] => DegradationOperator::identity(width, height),
        ["mask", f] => DegradationOperator::random_mask(width, height, num(f)?, seed ^ 0x6d61_736b)?,
        ["mask-file", p] => {
            let op = DegradationOperator::read_mask(p)?;
            if op.width() != width || op.height() != height {
                return Err(input_error("mask size differs from the image"));
            }
            op
        }
        ["uniform", s] => DegradationOperator::conv2d(width, height, Kernel::uniform(size(s)?)?)?,
        ["gaussian", s, sd] => DegradationOperator::conv2d(width, height, Kernel::gaussian(size(s)?, num(sd)?)?)?,
        ["kernel", p] => DegradationOperator::conv2d(width, height, Kernel::read(p)?)?,
        _ => return Err(input_error(format!("unknown operator {text:?}"))),
    };
    Ok(op)
}

fn parse_noise(text: &str) -> CliResult<NoiseModel> {
    let noise = match text.split_once(':') {
        None if text == "poisson" => NoiseModel::Poisson,
        Some(("gaussian", s)) => {
            let sigma: f64 = s.parse().map_err(|_| input_error(format!("bad noise level {s:?}")))?;
            NoiseModel::Gaussian { variance: sigma * sigma }
        }
        _ => return Err(input_error(format!("unknown noise model {text:?}"))),
    };
    noise.validate()?;
    Ok(noise)
}

fn default_sidecar(observed: &Path) -> PathBuf {
    let mut s = observed.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// 8-bit preview stretched to the raster's maximum.
fn write_preview(img: &Image, path: &Path) -> CliResult<()> {
    let top = img.max();
    let scale = if top > 0.0 { 255.0 / top } else { 1.0 };
    img.write_pgm(path, 255, scale)?;
    Ok(())
}

fn degrade(args: DegradeArgs) -> CliResult<()> {
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(input_error("scale must be positive"));
    }
    require([&args.input])?;
    let clean = Image::read_any(&args.input)?.map(|v| v * args.scale)?;
    let (w, h) = (clean.width(), clean.height());
    let op = parse_operator(&args.operator, w, h, args.seed)?;
    let noise = parse_noise(&args.noise)?;
    let y = clean.with_data(simulate(&op, clean.data(), noise, args.seed)?)?;
    if args.output.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        y.write_pgm(&args.output, 255, 255.0 / args.scale)?;
    } else {
        y.write_pepf(&args.output)?;
    }
    let sidecar = Sidecar {
        width: w,
        height: h,
        operator: op.spec().clone(),
        noise,
        scale: args.scale,
        seed: args.seed,
        input: args.input,
    };
    write_json(&args.sidecar.unwrap_or_else(|| default_sidecar(&args.output)), &sidecar)
}

fn restore(args: RestoreArgs) -> CliResult<()> {
    let sidecar_path = args.sidecar.clone().unwrap_or_else(|| default_sidecar(&args.observed));
    require([&args.observed, &sidecar_path, &args.gmm].into_iter().chain(&args.config).chain(&args.reference))?;
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    let mut observed = Image::read_any(&args.observed)?;
    if args.observed.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        observed = observed.map(|v| v * sidecar.scale)?;
    }
    if observed.width() != sidecar.width || observed.height() != sidecar.height {
        return Err(input_error("observation size differs from the sidecar"));
    }
    let op = DegradationOperator::from_spec(sidecar.width, sidecar.height, sidecar.operator.clone())?;
    let base = load_gmm(&args.gmm)?;
    let mut overrides = args.overrides.clone();
    if args.single_partition {
        overrides.push("experts=[0]".into());
    }
    let cfg = build_config(args.config.as_deref(), &overrides)?;
    let problem = Problem {
        y: observed.data(),
        op: &op,
        noise: sidecar.noise,
        base: &base,
    };
    let mut out = run_pipeline(&problem, &cfg)?;
    if let Some(r) = &args.reference {
        let reference = Image::read_any(r)?.map(|v| v * sidecar.scale)?;
        out.report.fused_psnr = Some(psnr(reference.data(), &out.fused.mean)?);
        out.report.observed_psnr = Some(psnr(reference.data(), observed.data())?);
    }

    let dir = &args.output_dir;
    fs::create_dir_all(dir)?;
    let mean = observed.with_data(out.fused.mean.clone())?;
    let var = observed.with_data(out.fused.variances.clone())?;
    mean.write_pepf(dir.join("mean.pepf"))?;
    mean.write_pgm(dir.join("mean.pgm"), 255, 255.0 / sidecar.scale)?;
    var.write_pepf(dir.join("variance.pepf"))?;
    write_preview(&var, &dir.join("variance.pgm"))?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join("timing.json"), &out.timing)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let mut trace = std::io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?);
    for entry in &out.trace {
        serde_json::to_writer(&mut trace, entry)?;
        trace.write_all(b"\n")?;
    }
    trace.flush()?;
    if !out.report.converged {
        log::warn!("not every expert converged; see report.json");
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    if args.levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(input_error("levels must be ascending"));
    }
    if args.levels.iter().chain([&args.map_level]).any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(input_error("levels must lie in (0, 1)"));
    }
    require([&args.reference, &args.mean, &args.variance])?;
    let reference = Image::read_any(&args.reference)?.map(|v| v * args.reference_scale)?;
    let mean = Image::read_any(&args.mean)?;
    let var = Image::read_any(&args.variance)?;
    if reference.width() != mean.width() || reference.height() != mean.height() || mean.len() != var.len() {
        return Err(input_error("reference, mean and variance sizes differ"));
    }
    let p = psnr(reference.data(), mean.data())?;
    let CoverageReport {
        outside,
        fraction_inside,
        ..
    } = coverage(reference.data(), mean.data(), var.data(), args.map_level)?;
    let curve = coverage_curve(reference.data(), mean.data(), var.data(), &args.levels)?;
    if let Some(path) = &args.coverage_map {
        let map = reference.with_data(outside.iter().map(|&b| b as f64).collect())?;
        map.write_pgm(path, 255, 255.0)?;
    }
    let eval = Evaluation {
        // JSON has no infinity; a perfect match is reported as null
        psnr: p.is_finite().then_some(p),
        coverage_level: args.map_level,
        fraction_inside,
        levels: args.levels,
        coverage_curve: curve,
    };
    match &args.output {
        Some(path) => write_json(path, &eval),
        None => {
            println!("{}", serde_json::to_string_pretty(&eval)?);
            Ok(())
        }
    }
}

fn train_gmm(args: TrainArgs) -> CliResult<()> {
    require(&args.images)?;
    let mut samples = Vec::new();
    for path in &args.images {
        let img = Image::read_any(path)?;
        samples.extend(extract_patches(img.data(), img.width(), img.height(), args.patch, args.stride, true)?);
    }
    let fit = train_em(
        &samples,
        &EmOptions {
            k: args.k,
            max_iters: args.max_iters,
            seed: args.seed,
            ..EmOptions::default()
        },
    )?;
    log::info!(
        "{} patches, {} EM iterations, final log-likelihood {:.6e}",
        samples.len(),
        fit.iterations,
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    save_gmm(&args.output, &fit.gmm)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Restore(a) => restore(a),
        Command::Evaluate(a) => evaluate(a),
        Command::TrainGmm(a) => train_gmm(a),
        Command::Config(a) => {
            let cfg = build_config(a.config.as_deref(), &a.overrides)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Verify(a) => {
            let report = run_verify(a.quick);
            let text = serde_json::to_string_pretty(&report)?;
            match &a.output {
                Some(p) => fs::write(p, text + "\n")?,
                None => println!("{text}"),
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_INTERNAL,
                    message: "oracle verification failed".into(),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
