//! Command-line surface: generate animations, run inversions, evaluate
//! frames, run benchmarks, inspect backbone hook topology.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use laser::backbone::{create_backbone, descriptor_for, Backbone};
use laser::benchmark::{
    build_entries, emit_table, load_benchmark, run_benchmark, validate_reference_split,
    AblationMode, BenchmarkSet, Category, TableFormat, SAMPLE_SET,
};
use laser::config::{RunConfig, Span};
use laser::controller::{create_backend, AnimationRequest, Planner};
use laser::ddim::DdimEngine;
use laser::error::{Error, Result};
use laser::generator::generate_animation;
use laser::image_io::ImageBuf;
use laser::injection::Strategy;
use laser::metrics::evaluate;
use laser::trace::write_latent;

#[derive(Parser)]
#[command(
    name = "laser",
    version,
    about = "Tuning-free text-conditioned image-to-animation with planned feature and attention injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an animation from a description and an optional input image.
    Generate(GenerateArgs),
    /// Run DDIM inversion on an image, storing the noise latent and trace.
    Invert(InvertArgs),
    /// Evaluate a directory of frames against an input image.
    Eval(EvalArgs),
    /// Print a backbone's hook topology and default injection schedules.
    Describe(DescribeArgs),
    /// Benchmark set operations.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    /// Path to external backbone weights (or LASER_WEIGHTS).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f32>,
    /// Frames per stage.
    #[arg(long)]
    nf: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// LLM backend: mock | openai-compatible.
    #[arg(long)]
    llm: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    /// DAI decay scale in (0, 1).
    #[arg(long)]
    w: Option<f32>,
    /// FAI sampling-step window, e.g. 1-25.
    #[arg(long, value_parser = parse_span)]
    fai_window: Option<Span>,
    /// KVAI/DAI sampling-step window, e.g. 6-50.
    #[arg(long, value_parser = parse_span)]
    kv_window: Option<Span>,
    /// KVAI/DAI decoder layers, e.g. 3-8.
    #[arg(long, value_parser = parse_span)]
    kv_layers: Option<Span>,
    #[arg(long)]
    feature_layer: Option<usize>,
    /// Replace alpha with beta = w * alpha in DAI embedding interpolation.
    #[arg(long)]
    use_beta_embedding: bool,
    #[arg(long)]
    gif_fps: Option<u32>,
    /// Worker count for independent benchmark entries.
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory for the inversion trace cache.
    #[arg(long)]
    trace_cache: Option<PathBuf>,
}

fn parse_span(s: &str) -> std::result::Result<Span, String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("expected start-end, got '{s}'"))?;
    let start = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let end = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    Ok(Span::new(start, end))
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.backbone {
            config.backbone = v.clone();
        }
        if let Some(v) = &self.weights {
            config.weights_path = Some(v.clone());
        } else if config.weights_path.is_none() {
            config.weights_path = std::env::var_os("LASER_WEIGHTS").map(PathBuf::from);
        }
        if let Some(v) = self.steps {
            config.steps = v;
        }
        if let Some(v) = self.cfg_scale {
            config.cfg_scale = v;
        }
        if let Some(v) = self.nf {
            config.n_f = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.llm {
            config.llm_backend = v.clone();
        }
        if let Some(v) = &self.llm_model {
            config.llm_model = Some(v.clone());
        }
        if let Some(v) = self.w {
            config.w = v;
        }
        if let Some(v) = self.fai_window {
            config.fai_window = Some(v);
        }
        if let Some(v) = self.kv_window {
            config.kv_window = Some(v);
        }
        if let Some(v) = self.kv_layers {
            config.kv_layers = v;
        }
        if let Some(v) = self.feature_layer {
            config.feature_layer = v;
        }
        if self.use_beta_embedding {
            config.use_beta_embedding = true;
        }
        if let Some(v) = self.gif_fps {
            config.gif_fps = v;
        }
        if let Some(v) = self.jobs {
            config.jobs = v;
        }
        if let Some(v) = &self.trace_cache {
            config.trace_cache = Some(v.clone());
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Animation description (the coarse request the agents decompose).
    #[arg(short, long)]
    description: String,
    /// Input image; generated from the enhanced prompt when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Number of transformation stages; backend decides when omitted.
    #[arg(long)]
    nt: Option<usize>,
    /// Bypass the classifier and force one strategy on every transition.
    #[arg(long)]
    strategy: Option<String>,
    /// Output run directory.
    #[arg(long, default_value = "laser-run")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Capture every declared hook site into the trace archive.
    #[arg(long)]
    capture_all: bool,
    #[arg(long, default_value = "laser-inversion")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of PNG frames (a run's `frames/` directory or any one
    /// holding NNNN.png files).
    #[arg(long)]
    frames: PathBuf,
    /// Input image; defaults to `input.png` next to the frames directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output metrics path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long, default_value = "tiny-test")]
    backbone: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a benchmark set and emit the aggregate results table.
    Run(BenchRunArgs),
    /// Validate a benchmark set file.
    Validate(BenchValidateArgs),
    /// Expand seed descriptions into a full set via the planning agents.
    Make(BenchMakeArgs),
    /// Write the bundled 12-entry sample set.
    Sample(BenchSampleArgs),
}

#[derive(Args)]
struct BenchRunArgs {
    #[arg(long)]
    set: PathBuf,
    /// Ablation mode: none, w/o-FAI, w/o-KVAI, w/o-DAI, w/o-ICA.
    #[arg(long, default_value = "none")]
    ablation: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table format: csv | markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchValidateArgs {
    #[arg(long)]
    set: PathBuf,
    /// Additionally require the reference 70/70/60 category split.
    #[arg(long)]
    expect_reference_split: bool,
}

#[derive(Args)]
struct BenchMakeArgs {
    /// Seed descriptions file: one `category: description` per line.
    #[arg(long)]
    descriptions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchSampleArgs {
    #[arg(long, default_value = "benchmark_sample.jsonl")]
    out: PathBuf,
}

fn load_engine(config: &RunConfig) -> Result<DdimEngine> {
    let backbone: Arc<dyn Backbone> =
        create_backbone(&config.backbone, config.weights_path.as_deref())?;
    config.validate(backbone.descriptor())?;
    Ok(DdimEngine::new(backbone))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let config = args.config.build()?;
    let engine = load_engine(&config)?;
    let backend = create_backend(
        &config.llm_backend,
        config.llm_model.as_deref(),
        config.llm_timeout_secs,
    )?;
    let input_image = match &args.image {
        Some(path) => Some(ImageBuf::load_png(path)?),
        None => None,
    };
    let request = AnimationRequest {
        description: args.description.clone(),
        input_image,
        n_t: args.nt,
        n_f: config.n_f,
        seed: config.seed,
    };
    let planner = Planner::new(backend.as_ref()).with_max_retries(config.llm_max_retries);
    let mut plan = planner.plan(&request)?;
    if let Some(strategy) = &args.strategy {
        let strategy: Strategy = strategy.parse()?;
        plan = plan.with_override(strategy);
    }
    let result = generate_animation(
        &engine,
        &request,
        &plan,
        &config,
        &planner.transcripts(),
        Some(&args.out),
    )?;
    println!(
        "generated {} frames over {} stage(s) in {:.1}s -> {}",
        result.frames.len(),
        plan.n_t(),
        result.timings.total_seconds,
        args.out.display()
    );
    println!(
        "metrics: pic={:.4} lpips_t={:.4} lpips_m={:.4} clip_frame={:.4} ppl={:.4}",
        result.metrics.pic,
        result.metrics.lpips_total,
        result.metrics.lpips_max_endpoint,
        result.metrics.clip_frame,
        result.metrics.ppl
    );
    Ok(())
}

fn cmd_invert(args: &InvertArgs) -> Result<()> {
    let config = args.config.build()?;
    let engine = load_engine(&config)?;
    let backbone = engine.backbone();
    let image = ImageBuf::load_png(&args.image)?;
    let z0 = backbone.encode_image(&image)?;
    let embedding = backbone.encode_prompt(&args.prompt)?;
    let grid = engine.grid(config.steps)?;
    let sites: BTreeSet<_> = if args.capture_all {
        backbone.descriptor().hook_sites().into_iter().collect()
    } else {
        BTreeSet::new()
    };
    let (z_t, trace) = engine.invert(&z0, &embedding, &grid, &sites, "cli-invert")?;
    std::fs::create_dir_all(&args.out)?;
    write_latent(&z_t, &args.out.join("z_t.laserlat"))?;
    if !trace.is_empty() {
        trace.write_archive(&args.out.join("trace.lasertrc"))?;
    }
    println!(
        "inverted over {} steps; captured {} activations -> {}",
        grid.num_steps(),
        trace.len(),
        args.out.display()
    );
    Ok(())
}

fn load_frames_dir(dir: &Path) -> Result<Vec<ImageBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no PNG frames found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| ImageBuf::load_png(p)).collect()
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let frames = load_frames_dir(&args.frames)?;
    let run_dir = args.frames.parent().map(Path::to_path_buf);
    let input_path = match &args.input {
        Some(p) => p.clone(),
        None => run_dir
            .as_ref()
            .map(|d| d.join("input.png"))
            .filter(|p| p.exists())
            .ok_or_else(|| {
                Error::config("no --input given and no input.png next to the frames directory")
            })?,
    };
    let input = ImageBuf::load_png(&input_path)?;

    // Prompts and per-frame alphas come from the run manifest when present;
    // otherwise fall back to a single anonymous stage.
    let manifest_path = run_dir.as_ref().map(|d| d.join("manifest.json"));
    let (prompts, frame_alphas) = match manifest_path.filter(|p| p.exists()) {
        Some(path) => {
            let manifest: laser::generator::RunManifest =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let alphas = manifest
                .frames
                .iter()
                .map(|f| (f.stage, f.alpha))
                .collect::<Vec<_>>();
            if alphas.len() == frames.len() {
                (manifest.plan.prompts.clone(), alphas)
            } else {
                fallback_alphas(frames.len())
            }
        }
        None => fallback_alphas(frames.len()),
    };

    let report = evaluate(&frames, &input, &prompts, &frame_alphas, 0.0)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.frames.join("metrics.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "evaluated {} frames: pic={:.4} lpips_t={:.4} lpips_m={:.4} ppl={:.4} -> {}",
        frames.len(),
        report.pic,
        report.lpips_total,
        report.lpips_max_endpoint,
        report.ppl,
        out.display()
    );
    Ok(())
}

fn fallback_alphas(n: usize) -> (Vec<String>, Vec<(usize, f32)>) {
    let prompts = vec!["source frame".to_string(), "target frame".to_string()];
    let alphas = (0..n)
        .map(|k| (0usize, if n > 1 { k as f32 / (n - 1) as f32 } else { 0.0 }))
        .collect();
    (prompts, alphas)
}

fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let descriptor = descriptor_for(&args.backbone)?;
    let config = RunConfig {
        steps: args.steps,
        ..RunConfig::default()
    };
    println!("backbone: {}", descriptor.name);
    println!("decoder layers: {}", descriptor.num_decoder_layers);
    println!(
        "latent: {}x{}x{} (images {}x{}, codec factor {})",
        descriptor.latent_channels,
        descriptor.latent_height,
        descriptor.latent_width,
        descriptor.image_height(),
        descriptor.image_width(),
        descriptor.codec_downsample_factor
    );
    println!(
        "embedding: {} tokens x {}",
        descriptor.num_tokens, descriptor.embed_dim
    );
    println!("hook sites (decoder_layer/slot):");
    for site in descriptor.hook_sites() {
        println!("  {site}");
    }
    let fai = config.effective_fai_window();
    let kv = config.effective_kv_window();
    println!("default injection schedules ({} steps):", args.steps);
    println!(
        "  FAI: steps {}-{}, layers 1-{} (all), feature layer {}",
        fai.start, fai.end, descriptor.num_decoder_layers, config.feature_layer
    );
    println!(
        "  KVAI/DAI: steps {}-{}, layers {}-{}",
        kv.start, kv.end, config.kv_layers.start, config.kv_layers.end
    );
    println!("gamma: t / max_timestep");
    Ok(())
}

fn load_set(path: &Path) -> Result<BenchmarkSet> {
    load_benchmark(path)
}

fn cmd_bench_run(args: &BenchRunArgs) -> Result<()> {
    let config = args.config.build()?;
    let engine = load_engine(&config)?;
    let backend = create_backend(
        &config.llm_backend,
        config.llm_model.as_deref(),
        config.llm_timeout_secs,
    )?;
    let set = load_set(&args.set)?;
    let ablation: AblationMode = args.ablation.parse()?;
    let format: TableFormat = args.format.parse()?;
    let results = run_benchmark(
        &engine,
        backend.as_ref(),
        &set,
        &config,
        &ablation,
        args.out.as_deref(),
    )?;
    let failures = results.entries.iter().filter(|e| e.error.is_some()).count();
    let aggregate = emit_table(&results.aggregate_rows(), format)?;
    print!("{aggregate}");
    if failures > 0 {
        eprintln!("{failures} entries failed; see results.json");
    }
    if let Some(out) = &args.out {
        let ext = match format {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
        };
        std::fs::write(out.join(format!("aggregate.{ext}")), &aggregate)?;
        let per_entry = emit_table(&results.entry_rows(), format)?;
        std::fs::write(out.join(format!("entries.{ext}")), per_entry)?;
    }
    Ok(())
}

fn cmd_bench_validate(args: &BenchValidateArgs) -> Result<()> {
    let set = load_set(&args.set)?;
    if args.expect_reference_split {
        validate_reference_split(&set)?;
    }
    let counts: Vec<String> = set
        .declared_counts
        .iter()
        .map(|(c, n)| format!("{c}={n}"))
        .collect();
    println!(
        "valid: {} entries ({})",
        set.entries.len(),
        counts.join(", ")
    );
    Ok(())
}

fn cmd_bench_make(args: &BenchMakeArgs) -> Result<()> {
    let config = args.config.build()?;
    let backend = create_backend(
        &config.llm_backend,
        config.llm_model.as_deref(),
        config.llm_timeout_secs,
    )?;
    let text = std::fs::read_to_string(&args.descriptions)?;
    let mut descriptions = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (category, description) = line.split_once(':').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected 'category: description'",
                idx + 1
            ))
        })?;
        let category = match category.trim() {
            "material" => Category::Material,
            "non_rigid" => Category::NonRigid,
            "hybrid" => Category::Hybrid,
            other => {
                return Err(Error::config(format!(
                    "line {}: unknown category '{other}'",
                    idx + 1
                )))
            }
        };
        descriptions.push((category, description.trim().to_string()));
    }
    let entries = build_entries(
        &descriptions,
        backend.as_ref(),
        config.llm_max_retries,
        config.n_f,
    )?;
    laser::benchmark::write_jsonl(&entries, &args.out)?;
    println!("wrote {} entries -> {}", entries.len(), args.out.display());
    Ok(())
}

fn cmd_bench_sample(args: &BenchSampleArgs) -> Result<()> {
    std::fs::write(&args.out, SAMPLE_SET)?;
    println!("wrote bundled sample set -> {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Invert(args) => cmd_invert(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Describe(args) => cmd_describe(args),
        Command::Bench(BenchCommand::Run(args)) => cmd_bench_run(args),
        Command::Bench(BenchCommand::Validate(args)) => cmd_bench_validate(args),
        Command::Bench(BenchCommand::Make(args)) => cmd_bench_make(args),
        Command::Bench(BenchCommand::Sample(args)) => cmd_bench_sample(args),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
