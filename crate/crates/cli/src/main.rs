use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use tiny_ssd::audit::{self, Reference, Tolerances};
use tiny_ssd::detect::{self, DetectParams};
use tiny_ssd::eval;
use tiny_ssd::graph::{self, ArchSpec};
use tiny_ssd::image::{preprocess_image, Preprocess, RgbImage};
use tiny_ssd::model_io::{self, Dtype};
use tiny_ssd::priors::{generate_priors, PriorConfig};
use tiny_ssd::{tiny_ssd_spec, Tensor};

/// Tiny SSD inference, resource audit and VOC evaluation.
#[derive(Debug, Parser)]
#[command(name = "tinyssd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the architecture as a layer table or as a loadable JSON dump.
    Describe(DescribeArgs),
    /// Count parameters, MACs and model size, optionally checking them against reference figures.
    Audit(AuditArgs),
    /// Run the detector on PPM images or TNSR tensors.
    Detect(DetectArgs),
    /// Score detection lines against VOC annotations.
    Eval(EvalArgs),
    /// Convert a model file to half precision.
    Quantize(QuantizeArgs),
    /// Write a model file with seeded random weights.
    InitRandom(InitRandomArgs),
}

#[derive(Debug, Args)]
struct SpecArg {
    /// Architecture JSON (as written by `describe --format struct`); defaults to Tiny SSD.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DescribeFormat {
    Text,
    Struct,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long, value_enum, default_value = "text")]
    format: DescribeFormat,
    #[command(flatten)]
    spec: SpecArg,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Exit with status 3 when any metric is outside its tolerance.
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = 1.13e6)]
    ref_params: f64,
    #[arg(long, default_value_t = 571.09e6)]
    ref_macs: f64,
    #[arg(long, default_value_t = 2.3)]
    ref_size_mb: f64,
    #[arg(long, default_value_t = 0.06)]
    tol_params: f64,
    #[arg(long, default_value_t = 0.10)]
    tol_macs: f64,
    #[arg(long, default_value_t = 0.06)]
    tol_size: f64,
    #[command(flatten)]
    spec: SpecArg,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum DetectOutput {
    Lines,
    AnnotatedPpm,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Input image (.ppm) or preprocessed tensor (.tnsr); repeatable.
    #[arg(long, value_name = "FILE", required = true)]
    image: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    conf: f32,
    #[arg(long, default_value_t = 0.45)]
    iou: f32,
    #[arg(long, default_value_t = 200)]
    top_k: usize,
    /// `annotated-ppm` also writes each image with box outlines into --ppm-out.
    #[arg(long, value_enum, default_value = "lines")]
    out: DetectOutput,
    #[arg(long, value_name = "DIR")]
    ppm_out: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Detection lines: `image_id class score xmin ymin xmax ymax`.
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    /// Directory of VOC annotation XML files named `<image_id>.xml`.
    #[arg(long, value_name = "DIR")]
    annotations: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Also write per-class precision/recall points as CSV.
    #[arg(long, value_name = "FILE")]
    pr_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitRandomArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value = "f32")]
    dtype: Dtype,
    #[command(flatten)]
    spec: SpecArg,
}

enum Failure {
    Usage(String),
    Run(String),
    CheckFailed,
}

impl From<tiny_ssd::Error> for Failure {
    fn from(e: tiny_ssd::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(tiny_ssd::Error::from(e).to_string())
    }
}

fn in_file(path: &Path) -> impl Fn(tiny_ssd::Error) -> Failure + '_ {
    move |e| Failure::Run(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| in_file(path)(e.into()))
}

type CmdResult = Result<String, (String, Failure)>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let (stdout, failure) = match run(cli.command) {
        Ok(out) => (out, None),
        Err((out, f)) => (out, Some(f)),
    };
    let mut lock = io::stdout().lock();
    if lock
        .write_all(stdout.as_bytes())
        .and_then(|_| lock.flush())
        .is_err()
    {
        return ExitCode::from(2);
    }
    match failure {
        None => ExitCode::SUCCESS,
        Some(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Some(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Some(Failure::CheckFailed) => {
            eprintln!("audit check failed");
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("TINYSSD_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("TINYSSD_THREADS must be a non-negative integer, got `{value}`"))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(command: Command) -> CmdResult {
    let no_output = |f: Failure| (String::new(), f);
    match command {
        Command::Describe(args) => describe(&args).map_err(no_output),
        Command::Audit(args) => run_audit(&args),
        Command::Detect(args) => run_detect(&args).map_err(no_output),
        Command::Eval(args) => run_eval(&args).map_err(no_output),
        Command::Quantize(args) => quantize(&args).map_err(no_output),
        Command::InitRandom(args) => init_random(&args).map_err(no_output),
    }
}

fn load_spec(arg: &SpecArg) -> Result<ArchSpec, Failure> {
    let Some(path) = &arg.spec else {
        return Ok(tiny_ssd_spec());
    };
    let text = read_text(path)?;
    let spec = ArchSpec::from_json(&text).map_err(|e| match e {
        tiny_ssd::Error::Parse { line, detail, .. } => tiny_ssd::Error::Parse {
            source_name: path.display().to_string(),
            line,
            detail,
        },
        other => other,
    })?;
    spec.validate()?;
    Ok(spec)
}

fn describe(args: &DescribeArgs) -> Result<String, Failure> {
    let spec = load_spec(&args.spec)?;
    Ok(match args.format {
        DescribeFormat::Text => graph::describe_table(&spec)?,
        DescribeFormat::Struct => spec.to_json() + "\n",
    })
}

fn run_audit(args: &AuditArgs) -> CmdResult {
    let spec = load_spec(&args.spec).map_err(|f| (String::new(), f))?;
    let report = audit::audit(&spec).map_err(|e| (String::new(), e.into()))?;
    let reference = Reference {
        params: args.ref_params,
        macs: args.ref_macs,
        fp16_mb: args.ref_size_mb,
    };
    let tol = Tolerances {
        params: args.tol_params,
        macs: args.tol_macs,
        size: args.tol_size,
    };
    let cmp = audit::compare(&report, &reference, &tol);
    let out = format!(
        "{}\n{}",
        audit::format_table(&report),
        audit::format_summary(&report, Some(&cmp))
    );
    if args.check && !cmp.pass() {
        Err((out, Failure::CheckFailed))
    } else {
        Ok(out)
    }
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn is_tnsr(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tnsr"))
}

/// Image id, its detections, and the decoded source image when the input was a PPM.
type ImageResult = (String, Vec<detect::Detection>, Option<RgbImage>);

fn run_detect(args: &DetectArgs) -> Result<String, Failure> {
    if !(0.0..=1.0).contains(&args.conf) || !(0.0..=1.0).contains(&args.iou) {
        return Err(Failure::Usage("--conf and --iou must lie in [0, 1]".into()));
    }
    let ppm_dir = match (args.out, &args.ppm_out) {
        (DetectOutput::AnnotatedPpm, None) => {
            return Err(Failure::Usage(
                "--out annotated-ppm needs --ppm-out DIR".into(),
            ));
        }
        (DetectOutput::AnnotatedPpm, Some(dir)) => {
            if let Some(p) = args.image.iter().find(|p| is_tnsr(p)) {
                return Err(Failure::Usage(format!(
                    "annotated output needs PPM input, `{}` is a tensor",
                    p.display()
                )));
            }
            Some(dir)
        }
        (DetectOutput::Lines, _) => None,
    };

    let spec = load_spec(&args.spec)?;
    let cfg = PriorConfig::tiny_ssd();
    cfg.check_against(&spec)?;
    let priors = generate_priors(&cfg)?;
    let manifest = spec.parameter_manifest()?;
    let store = model_io::load(&args.model, Some(&manifest)).map_err(in_file(&args.model))?;
    let params = DetectParams {
        conf_threshold: args.conf,
        iou_threshold: args.iou,
        top_k: args.top_k,
        ..DetectParams::default()
    };
    let preprocess = Preprocess {
        size: spec.input_size,
        ..Preprocess::default()
    };

    let results: Vec<tiny_ssd::Result<ImageResult>> = args
        .image
        .par_iter()
        .map(|path| {
            let (input, source) = if is_tnsr(path) {
                (Tensor::read_tnsr(path)?, None)
            } else {
                let img = RgbImage::read_ppm(path)?;
                (preprocess_image(&img, &preprocess), Some(img))
            };
            let head = graph::forward(&spec, &store, &input)?;
            let dets = detect::detect(&head, &priors, &params)?.concat();
            Ok((image_id(path), dets, source))
        })
        .collect();

    let mut out = String::new();
    for (path, result) in args.image.iter().zip(results) {
        let (id, dets, source) =
            result.map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
        for d in &dets {
            writeln!(out, "{}", detect::format_detection(&id, d)).unwrap();
        }
        if let (Some(dir), Some(mut img)) = (ppm_dir, source) {
            for d in &dets {
                img.draw_box(&d.bbox, [255, 0, 0], 2);
            }
            let target = dir.join(format!("{id}.ppm"));
            img.write_ppm(&target).map_err(in_file(&target))?;
        }
    }
    Ok(out)
}

fn run_eval(args: &EvalArgs) -> Result<String, Failure> {
    if !(0.0..=1.0).contains(&args.iou) {
        return Err(Failure::Usage("--iou must lie in [0, 1]".into()));
    }
    let text = read_text(&args.detections)?;
    let dets = eval::parse_detections(&text, &args.detections.display().to_string())?;
    let truths =
        eval::parse_annotation_dir(&args.annotations).map_err(in_file(&args.annotations))?;
    let result = eval::evaluate(&dets, &truths, args.iou);
    if let Some(path) = &args.pr_csv {
        fs::write(path, result.pr_csv()).map_err(|e| in_file(path)(e.into()))?;
    }
    Ok(result.report())
}

fn quantize(args: &QuantizeArgs) -> Result<String, Failure> {
    let store = model_io::load(&args.input, None).map_err(in_file(&args.input))?;
    let (quantized, stats) = model_io::quantize_fp16(&store);
    model_io::save(&quantized, &args.out, Dtype::F16).map_err(in_file(&args.out))?;
    Ok(format!(
        "values: {}\nclamped: {}\nmax_abs_error: {:e}\nmean_abs_error: {:e}\n",
        store.element_count(),
        stats.clamped,
        stats.max_abs_error,
        stats.mean_abs_error
    ))
}

fn init_random(args: &InitRandomArgs) -> Result<String, Failure> {
    let spec = load_spec(&args.spec)?;
    let store = model_io::init_random(&spec, args.seed)?;
    model_io::save(&store, &args.out, args.dtype).map_err(in_file(&args.out))?;
    let bytes = fs::metadata(&args.out)?.len();
    Ok(format!(
        "blobs: {}\nvalues: {}\ndtype: {}\nbytes: {bytes}\n",
        store.len(),
        store.element_count(),
        args.dtype
    ))
}
