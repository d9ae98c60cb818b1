//! Command-line front end.
//!
//! Every command accepts `--config FILE`, a `key=value` file (one pair per
//! line, `#` comments) whose keys are long flag names. Flags given on the
//! command line take precedence over the file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::attention::{StyleMask, DEFAULT_LAMBDA};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind, COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::image::{gray_to_rgb, read_image, write_image};
use crate::numerics::Tensor;
use crate::pipeline::{diagnostics_csv, stylize, InjectionConfig, SainMode};
use crate::sain::DEFAULT_BINS;
use crate::toy::{load_weights, make_texture_dataset, save_weights, train, TextureKind, ToyConfig, ToyDenoiser, TrainConfig};
use crate::video::{stylize_video, GuidanceConfig, DEFAULT_GUIDANCE_WEIGHT};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "zstyle", version, about = "Zero-shot style transfer with dual-path DDIM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy denoiser on procedural textures and save its weights.
    TrainToyDenoiser(TrainArgs),
    /// Stylize one content image with one or more style images.
    Stylize(StylizeArgs),
    /// Stylize a directory of numbered frames.
    StylizeVideo(VideoArgs),
    /// Write per-step style distances as CSV.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleName {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SainArg {
    Off,
    Printed,
    Prose,
}

impl From<SainArg> for SainMode {
    fn from(s: SainArg) -> Self {
        match s {
            SainArg::Off => SainMode::Off,
            SainArg::Printed => SainMode::Printed,
            SainArg::Prose => SainMode::Prose,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Number of diffusion steps T.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..=10_000))]
    pub steps: u64,
    #[arg(long, value_enum, default_value_t = ScheduleName::Linear)]
    pub schedule: ScheduleName,
    /// Smallest cumulative alpha at t = T.
    #[arg(long, default_value_t = 0.01, value_parser = unit_interval)]
    pub alpha_min: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    /// Epochs used when training a model on the fly or with train-toy-denoiser.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    pub lr: f64,
    /// Number of procedural training textures.
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..))]
    pub corpus: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Texture side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InjectionArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA, value_parser = positive)]
    pub lambda: f64,
    /// Reverse-step window `start:end`.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(usize, usize)>,
    /// Comma-separated attention block indices.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3])]
    pub blocks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SainArg::Prose)]
    pub sain: SainArg,
    #[arg(long, default_value_t = DEFAULT_BINS, value_parser = at_least_two)]
    pub sain_bins: usize,
    /// Grayscale mask over the style image: 255 inside, 0 outside.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Ramp width in tokens; 0 keeps the mask's own gray levels as the ramp.
    #[arg(long, default_value_t = 0)]
    pub ramp: usize,
    /// Toy weights file; a model is trained from `--seed` when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub content: PathBuf,
    /// Style image; repeat for multi-style fusion.
    #[arg(long = "style", required = true)]
    pub styles: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub injection: InjectionArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub diag: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VideoArgs {
    /// Directory of zero-padded numbered PPM/PGM frames.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE_WEIGHT, value_parser = non_negative)]
    pub guidance_weight: f64,
    /// Reverse-step range for guidance; defaults to the injection window.
    #[arg(long, value_parser = parse_window)]
    pub guidance_steps: Option<(usize, usize)>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub injection: InjectionArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long = "style", required = true)]
    pub styles: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub injection: InjectionArgs,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("window {s:?} is not start:end"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad window start {a:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad window end {b:?}"))?;
    if a > b {
        return Err(format!("window start {a} exceeds end {b}"));
    }
    Ok((a, b))
}

fn at_least_two(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        _ => Err(format!("{s:?} is not an integer >= 2")),
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is not a positive number"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is not a finite non-negative number"))
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Single-line, prefix-tagged message.
    pub fn line(&self) -> String {
        let (tag, msg) = match self {
            CliError::Usage(m) => ("usage-error", m),
            CliError::Io(m) => ("io-error", m),
            CliError::Runtime(m) => ("runtime-error", m),
        };
        format!("{tag}: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } => CliError::Io(e.to_string()),
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// Splits `--config FILE` out of `argv` and appends the file's pairs as
/// flags, skipping any key already given on the command line.
fn merge_config_file(argv: &[String]) -> std::result::Result<Vec<String>, CliError> {
    let mut out = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it.next().ok_or_else(|| CliError::Usage("--config needs a file path".into()))?;
            config = Some(PathBuf::from(path));
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            out.push(a.clone());
        }
    }
    let Some(path) = config else {
        return Ok(out);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let given: BTreeSet<String> = out
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = key.trim().trim_start_matches("--");
        if given.contains(key) {
            continue;
        }
        out.push(format!("--{key}"));
        out.push(value.trim().to_string());
    }
    Ok(out)
}

pub fn parse_args(argv: &[String]) -> std::result::Result<Cli, clap::Error> {
    Cli::try_parse_from(argv)
}

pub fn usage() -> String {
    Cli::command().render_long_help().to_string()
}

fn schedule(m: &ModelArgs) -> Result<NoiseSchedule> {
    let kind = match m.schedule {
        ScheduleName::Linear => ScheduleKind::LinearAlphaBar { alpha_min: m.alpha_min },
        ScheduleName::Cosine => ScheduleKind::Cosine { offset: COSINE_OFFSET, alpha_min: m.alpha_min },
    };
    make_schedule(m.steps as usize, kind)
}

/// Trains the default toy architecture on `corpus` procedural textures.
pub fn train_default(
    s: &NoiseSchedule,
    size: usize,
    channels: usize,
    t: &TrainingArgs,
    seed: u64,
) -> Result<(ToyDenoiser, Vec<f64>)> {
    let kinds = [TextureKind::Stripes, TextureKind::Dots, TextureKind::GaussianBlobs];
    let mut data: Vec<Tensor> = make_texture_dataset(&kinds, t.corpus as usize, size, seed)
        .into_iter()
        .map(|tex| tex.image)
        .collect();
    if channels == 1 {
        data = data
            .into_iter()
            .map(|img| {
                let px = img.data().chunks(3).map(|c| c.iter().sum::<f64>() / 3.0).collect();
                Tensor::new(vec![size, size, 1], px)
            })
            .collect::<Result<_>>()?;
    }
    let config = ToyConfig { channels, steps: s.steps(), ..ToyConfig::default() };
    let opts = TrainConfig { epochs: t.epochs, lr: t.lr, seed };
    let (model, report) = train(&data, s, config, &opts)?;
    Ok((model, report.epoch_losses))
}

fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    if img.shape()[2] == 1 {
        gray_to_rgb(&img)
    } else {
        Ok(img)
    }
}

fn model_for(inj: &InjectionArgs, m: &ModelArgs, s: &NoiseSchedule, shape: &[usize]) -> Result<ToyDenoiser> {
    match &inj.weights {
        Some(p) => load_weights(p),
        None => {
            if shape[0] != shape[1] {
                return Err(Error::Config("on-the-fly training needs square images; pass --weights".into()));
            }
            Ok(train_default(s, shape[0], shape[2], &inj.training, m.seed)?.0)
        }
    }
}

/// Mask image averaged over each token's patch.
fn load_mask(path: &Path, d: &ToyDenoiser, shape: &[usize], ramp: usize) -> Result<StyleMask> {
    let img = read_image(path)?;
    if img.shape()[..2] != shape[..2] {
        return Err(Error::Config(format!(
            "mask is {}x{}, images are {}x{}",
            img.shape()[1],
            img.shape()[0],
            shape[1],
            shape[0]
        )));
    }
    let (gh, gw) = (shape[0] / d.config.patch, shape[1] / d.config.patch);
    let p = d.config.patch;
    let (w, c) = (img.shape()[1], img.shape()[2]);
    let mut coverage = vec![0.0; gh * gw];
    for (k, cov) in coverage.iter_mut().enumerate() {
        let (gy, gx) = (k / gw, k % gw);
        let mut sum = 0.0;
        for y in gy * p..(gy + 1) * p {
            for x in gx * p..(gx + 1) * p {
                sum += (0..c).map(|ch| img.data()[(y * w + x) * c + ch]).sum::<f64>() / c as f64;
            }
        }
        *cov = sum / (p * p) as f64;
    }
    if ramp == 0 {
        StyleMask::from_coverage(&coverage)
    } else {
        let inside: Vec<bool> = coverage.iter().map(|&v| v >= 0.5).collect();
        StyleMask::from_region(gh, gw, &inside, ramp)
    }
}

fn injection_config(
    inj: &InjectionArgs,
    d: &ToyDenoiser,
    s: &NoiseSchedule,
    shape: &[usize],
) -> Result<InjectionConfig> {
    let base = InjectionConfig::for_steps(s.steps());
    let mask = match &inj.mask {
        Some(p) => Some(load_mask(p, d, shape, inj.ramp)?),
        None => None,
    };
    Ok(InjectionConfig {
        lambda: inj.lambda,
        step_window: inj.window.unwrap_or(base.step_window),
        blocks: inj.blocks.clone(),
        sain: inj.sain.into(),
        sain_bins: inj.sain_bins,
        mask,
        cosine_diagnostics: false,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ppm or .pgm frames in {}", dir.display())));
    }
    Ok(paths)
}

fn run_stylize(a: &StylizeArgs) -> Result<()> {
    let content = load_rgb(&a.content)?;
    let styles = a.styles.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
    let s = schedule(&a.model)?;
    let d = model_for(&a.injection, &a.model, &s, content.shape())?;
    let cfg = injection_config(&a.injection, &d, &s, content.shape())?;
    let out = stylize(&content, &styles, &d, &s, &cfg)?;
    write_image(&a.out, &out.image)?;
    if let Some(p) = &a.diag {
        write_text(p, &diagnostics_csv(&out.diagnostics))?;
    }
    Ok(())
}

fn run_video(a: &VideoArgs) -> Result<()> {
    let frames = frame_paths(&a.frames)?
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    let style = load_rgb(&a.style)?;
    let s = schedule(&a.model)?;
    let d = model_for(&a.injection, &a.model, &s, style.shape())?;
    let cfg = injection_config(&a.injection, &d, &s, style.shape())?;
    let g = GuidanceConfig { weight: a.guidance_weight, steps: a.guidance_steps };
    let out = stylize_video(&frames, &style, &d, &s, &cfg, &g)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, f) in out.frames.iter().enumerate() {
        write_image(a.out.join(format!("{i:04}.ppm")), &f.image)?;
    }
    if let Some(p) = &a.report {
        write_text(p, &out.report.to_csv())?;
    }
    Ok(())
}

fn run_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let content = load_rgb(&a.content)?;
    let styles = a.styles.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
    let s = schedule(&a.model)?;
    let d = model_for(&a.injection, &a.model, &s, content.shape())?;
    let cfg = injection_config(&a.injection, &d, &s, content.shape())?;
    let csv = diagnostics_csv(&stylize(&content, &styles, &d, &s, &cfg)?.diagnostics);
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let s = schedule(&a.model)?;
    let (model, losses) = train_default(&s, a.size, 3, &a.training, a.model.seed)?;
    save_weights(&a.out, &model)?;
    if let Some(p) = &a.log {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_text(p, &csv)?;
    }
    if let Some(last) = losses.last() {
        println!("trained {} epochs, final loss {last:.6}", losses.len());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainToyDenoiser(a) => run_train(a),
        Command::Stylize(a) => run_stylize(a),
        Command::StylizeVideo(a) => run_video(a),
        Command::Diagnose(a) => run_diagnose(a),
    }
}

/// Parses, runs and maps the outcome to a process exit code.
pub fn main_with_args(argv: &[String]) -> i32 {
    if argv.len() <= 1 {
        eprintln!("{}", usage());
        return EXIT_USAGE;
    }
    let result = merge_config_file(argv).and_then(|args| {
        let cli = match parse_args(&args) {
            Ok(cli) => cli,
            Err(e) if !e.use_stderr() => {
                // --help and --version
                print!("{e}");
                return Ok(());
            }
            Err(e) => {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
            }
        };
        run(&cli).map_err(CliError::from)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
