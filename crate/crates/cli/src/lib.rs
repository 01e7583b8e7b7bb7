//! `logoprompt` command line: pretrain the surrogate encoders, run benchmark
//! protocols, render prompts and aggregate result CSVs.

pub mod config;

use clap::{Args, Parser, Subcommand};
use config::{default_checkpoint, load_file, output_root, Protocol, RunConfig, OUTPUT_ROOT_ENV};
use logoprompt_core::bench::{
    aggregate, format_aggregates, generate_dataset, read_csv, run_protocol, Method, MetricsReport, SplitRule,
};
use logoprompt_core::dualenc::{pretrain_surrogate, DualEncoder, PretrainConfig, PretrainCorpus};
use logoprompt_core::error::{Error, Result};
use logoprompt_core::glyph::{self, Placement};
use logoprompt_core::prompts::ContextInit;
use logoprompt_core::rng::{derive, tag};
use logoprompt_core::synth::{self, CLASS_NAMES};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "logoprompt", version, about = "Synthetic text-image visual prompts for a frozen dual encoder")]
#[command(after_help = "Outputs go under $LOGOPROMPT_OUTPUT_ROOT (default ./runs) unless --output-dir is given.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Pretrain the surrogate encoders; writes a checkpoint and corpus manifest.
    Pretrain(PretrainArgs),
    /// Tune prompts under a protocol and write per-seed CSV plus a JSON summary.
    Run(RunArgs),
    /// Render a class-name prompt and an example class-conditional image.
    Render(RenderArgs),
    /// Aggregate result CSVs into mean ± std per protocol and method.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML or JSON file with pretraining fields (seed, steps, per_class, adam, image, text, eval_per_class).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Corpus exemplars per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Held-out exemplars per class for the post-training check.
    #[arg(long)]
    pub eval_per_class: Option<usize>,
    /// Directory for encoder.json and corpus_manifest.json [default: <output root>/checkpoint].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

/// Every field of a run config; flags override the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// TOML or JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// few_shot, base_to_new or domain_shift.
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// Training images per class: 1, 2, 4, 8 or 16.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Base/new split for base_to_new: even_odd or first_half.
    #[arg(long)]
    pub split_rule: Option<SplitRule>,
    /// Test-time shift for domain_shift: gaussian_noise(σ), hue_shift(Δ) or contrast(γ).
    #[arg(long)]
    pub corruption: Option<String>,
    /// zeroshot, coop_baseline, logoprompt or logoprompt_tunable_vp.
    #[arg(long)]
    pub method: Option<Method>,
    /// Context length M [default: 16 for few_shot, 4 otherwise].
    #[arg(long)]
    pub m: Option<usize>,
    /// Context initialization: random or template.
    #[arg(long)]
    pub ctx_init: Option<ContextInit>,
    /// Hard negatives during training and inference candidates.
    #[arg(long)]
    pub k: Option<usize>,
    /// Visual prompt edge over image edge.
    #[arg(long)]
    pub prompt_ratio: Option<f64>,
    /// Visual prompt placement: top, bottom or rand.
    #[arg(long)]
    pub placement: Option<Placement>,
    /// Learn visual prompts as pixels (logoprompt only).
    #[arg(long)]
    pub tunable_vp: Option<bool>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Share of steps spent on stage 1 of two-stage prompts.
    #[arg(long)]
    pub stage1_fraction: Option<f64>,
    /// Dataset classes (2 to 16).
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Training pool per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub dataset_seed: Option<u64>,
    /// Encoder checkpoint [default: <output root>/checkpoint/encoder.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for the CSV and JSON outputs [default: <output root>].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Catalog class name.
    #[arg(long, default_value = "apple")]
    pub class: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 56)]
    pub image_size: usize,
    #[arg(long, default_value_t = glyph::DEFAULT_PROMPT_RATIO)]
    pub prompt_ratio: f64,
    #[arg(long, default_value = "rand")]
    pub placement: Placement,
    /// png or ppm.
    #[arg(long, default_value = "png")]
    pub format: ImageFormat,
    /// Integer upscaling of the written images.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// [default: <output root>/render]
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Result CSVs, or directories searched for *.csv.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Also write the aggregates as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Render(a) => cmd_render(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Usage errors (bad configuration) exit 1; everything else exits 2.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn pretrain_config(args: &PretrainArgs) -> Result<PretrainConfig> {
    let mut cfg: PretrainConfig = match &args.config {
        Some(path) => load_file(path)?,
        None => PretrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.per_class {
        cfg.per_class = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = args.eval_per_class {
        cfg.eval_per_class = v;
    }
    if cfg.steps == 0 {
        return Err(Error::config("steps", "must be positive"));
    }
    if cfg.per_class < 2 {
        return Err(Error::config("per_class", format!("need at least 2 exemplars per class, got {}", cfg.per_class)));
    }
    if !(cfg.adam.lr.is_finite() && cfg.adam.lr > 0.0) {
        return Err(Error::config("lr", format!("must be positive, got {}", cfg.adam.lr)));
    }
    Ok(cfg)
}

pub fn cmd_pretrain(args: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = pretrain_config(args)?;
    let dir = args.output_dir.clone().unwrap_or_else(|| output_root().join("checkpoint"));
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let corpus = PretrainCorpus::synthetic(&names, cfg.image.image_size, cfg.per_class, derive(cfg.seed, &[tag("corpus")]))?;
    let (encoder, report) = pretrain_surrogate(&corpus, &cfg)?;
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join("encoder.json");
    encoder.save(&ckpt)?;
    write_json(&dir.join("corpus_manifest.json"), &corpus.manifest())?;
    write_json(&dir.join("pretrain_config.json"), &cfg)?;
    write_json(&dir.join("pretrain_report.json"), &report)?;
    let w = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(out, "checkpoint: {}", ckpt.display()).map_err(w)?;
    writeln!(out, "checksum: {}", report.checksum).map_err(w)?;
    writeln!(out, "zero-shot accuracy (natural): {:.2}", 100.0 * report.natural_accuracy).map_err(w)?;
    writeln!(out, "zero-shot accuracy (text-rendered): {:.2}", 100.0 * report.text_accuracy).map_err(w)?;
    writeln!(out, "temperature: {:.4}", report.temperature).map_err(w)?;
    writeln!(out, "final loss: {:.4}", report.final_loss).map_err(w)?;
    Ok(())
}

/// Config file values with flag overrides applied.
pub fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => load_file(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = &args.$flag {
                cfg.$($field).+ = v.clone().into();
            })*
        };
    }
    set!(
        protocol => protocol,
        shots => shots,
        split_rule => split_rule,
        corruption => corruption,
        method => method,
        m => m,
        ctx_init => ctx_init,
        k => k,
        prompt_ratio => prompt_ratio,
        placement => placement,
        tunable_vp => tunable_vp,
        seeds => seeds,
        steps => budget.steps,
        batch_size => budget.batch_size,
        lr => budget.lr,
        stage1_fraction => budget.stage1_fraction,
        num_classes => dataset.num_classes,
        image_size => dataset.image_size,
        train_per_class => dataset.train_per_class,
        test_per_class => dataset.test_per_class,
        dataset_seed => dataset.seed,
        checkpoint => checkpoint,
        output_dir => output_dir,
    );
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint, turning a missing file into an actionable error.
pub fn load_checkpoint(path: &Path) -> Result<DualEncoder> {
    if !path.exists() {
        return Err(Error::State(format!(
            "no encoder checkpoint at {}; run `logoprompt pretrain` first (it writes <output root>/checkpoint/encoder.json), \
             or pass --checkpoint, or set {OUTPUT_ROOT_ENV}",
            path.display()
        )));
    }
    DualEncoder::load(path)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(args)?;
    let plan = cfg.plan()?;
    let method = cfg.method_config()?;
    let encoder = load_checkpoint(&cfg.checkpoint())?;
    let dataset = generate_dataset(&cfg.dataset.spec(), cfg.dataset.seed)?;
    let report = run_protocol(Some(&encoder), &dataset, &plan, &method, &cfg.seeds)?;
    let stem = format!("{}-{}-{}shot", report.protocol, report.method, plan.shots());
    let (csv, json) = report.save(&cfg.output_dir(), &stem)?;
    print_report(&report, out).map_err(|e| Error::Format(e.to_string()))?;
    let w = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(out, "csv: {}", csv.display()).map_err(w)?;
    writeln!(out, "json: {}", json.display()).map_err(w)?;
    Ok(())
}

fn print_report(r: &MetricsReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "protocol: {}  method: {}  seeds: {}", r.protocol, r.method, r.per_seed.len())?;
    writeln!(out, "steps: {}", r.per_seed.iter().map(|s| s.steps.to_string()).collect::<Vec<_>>().join(","))?;
    if let Some(s) = r.accuracy_source {
        writeln!(out, "Source: {s}")?;
    }
    if let Some(s) = r.accuracy {
        writeln!(out, "Accuracy: {s}")?;
    }
    if let (Some(b), Some(n), Some(h)) = (r.accuracy_base, r.accuracy_new, r.harmonic_mean) {
        writeln!(out, "Base: {b}")?;
        writeln!(out, "New: {n}")?;
        writeln!(out, "H: {h:.2}")?;
    }
    Ok(())
}

pub fn cmd_render(args: &RenderArgs, out: &mut dyn Write) -> Result<()> {
    let class_id = CLASS_NAMES
        .iter()
        .position(|n| *n == args.class)
        .ok_or_else(|| Error::config("class", format!("unknown class `{}`; choose one of {}", args.class, CLASS_NAMES.join(", "))))?;
    if args.scale == 0 {
        return Err(Error::config("scale", "must be positive"));
    }
    if !(args.prompt_ratio > 0.0 && args.prompt_ratio <= 1.0) {
        return Err(Error::config("prompt_ratio", "must be in (0, 1]"));
    }
    let size = glyph::prompt_size(args.image_size, args.prompt_ratio).max(1);
    let prompt = glyph::render_prompt(&args.class, size, size, derive(args.seed, &[tag("prompt")]))?;
    let scene = synth::render_scene(class_id, args.image_size, derive(args.seed, &[tag("scene")]));
    let cond = glyph::apply_prompt(&scene, &prompt, args.placement, derive(args.seed, &[tag("placement")]))?;
    let dir = args.output_dir.clone().unwrap_or_else(|| output_root().join("render"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ext = match args.format {
        ImageFormat::Png => "png",
        ImageFormat::Ppm => "ppm",
    };
    let w = |e: std::io::Error| Error::Format(e.to_string());
    for (name, image) in [("prompt", &prompt.pixels), ("conditional", &cond.pixels), ("original", &scene)] {
        let path = dir.join(format!("{name}.{ext}"));
        let image = upscale(image, args.scale);
        let bytes = match args.format {
            ImageFormat::Png => glyph::encode_png(&image)?,
            ImageFormat::Ppm => glyph::encode_ppm(&image),
        };
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        writeln!(out, "{name}: {}", path.display()).map_err(w)?;
    }
    writeln!(out, "shown text: {:?}", prompt.shown).map_err(w)?;
    writeln!(out, "block origin: {:?} size: {size}x{size}", cond.block_origin).map_err(w)?;
    Ok(())
}

fn upscale(image: &logoprompt_core::image::Image, k: usize) -> logoprompt_core::image::Image {
    if k == 1 {
        return image.clone();
    }
    let (h, w) = (image.height() * k, image.width() * k);
    let mut out = logoprompt_core::image::Image::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            out.set_pixel(r, c, image.pixel(r / k, c / k));
        }
    }
    out
}

fn collect_csvs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::config("inputs", format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::config("inputs", "no CSV files found"));
    }
    Ok(files)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut rows = Vec::new();
    for f in collect_csvs(&args.inputs)? {
        let text = std::fs::read_to_string(&f).map_err(io_err(&f))?;
        rows.extend(read_csv(&text).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?);
    }
    let aggs = aggregate(&rows);
    out.write_all(format_aggregates(&aggs).as_bytes())
        .map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = &args.json {
        write_json(path, &aggs)?;
    }
    Ok(())
}

/// Default checkpoint path under the current output root.
pub fn checkpoint_path() -> PathBuf {
    default_checkpoint(&output_root())
}
