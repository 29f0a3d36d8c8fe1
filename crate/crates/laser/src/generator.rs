//! Animation generation: per-stage chained DDIM inversion, embedding
//! interpolation over the alpha grid, endpoint-first frame generation under
//! the selected injection strategy, and run-directory output.
//!
//! Stage order of work: (1) invert the prior image capturing the strategy's
//! required sites; (2) generate the alpha=0 and alpha=1 frames with
//! inversion-trace injection only, capturing their endpoint traces;
//! (3) generate interior frames, batched when cross-frame attention applies;
//! (4) decode. The unconditional CFG branch of every frame is conditioned on
//! the stage's source prompt embedding (null-text replacement); the plain
//! DDIM baseline (strategy `None`) keeps the ordinary null-text embedding.
//!
//! Stages chain through their boundary frames: the last frame of stage `i`
//! is inverted as the prior image of stage `i+1` and emitted only once.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{HookSite, Latent, TextEmbedding};
use crate::config::RunConfig;
use crate::controller::{AnimationRequest, StagePlan, Transcript};
use crate::ddim::{CaptureSpec, DdimEngine, GuidanceConfig, SampleParams, Unconditional};
use crate::error::{Error, Result};
use crate::image_io::{save_gif, ImageBuf};
use crate::injection::{
    dai_hooks, endpoint_capture_sites, fai_hooks, inversion_capture_sites, kvai_hooks,
    BlendWeights, FrameHooks, InjectionSchedule, Strategy,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::schedule::TimestepGrid;
use crate::trace::{cache_path, read_latent, sha256_hex, write_latent, ActivationTrace, TraceOrigin};

/// Equidistant interpolation weights: `values[0] = 0`, `values[n_f-1] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    values: Vec<f32>,
}

impl AlphaGrid {
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn make_alpha_grid(n_f: usize) -> Result<AlphaGrid> {
    if n_f < 2 {
        return Err(Error::config(format!(
            "alpha grid needs at least 2 frames, got {n_f}"
        )));
    }
    let values = (0..n_f)
        .map(|k| k as f32 / (n_f - 1) as f32)
        .collect();
    Ok(AlphaGrid { values })
}

/// Linear text-embedding interpolation `(1 - a) * e_i + a * e_next`. With
/// `use_beta`, `a` is replaced by `beta = w * alpha` (DAI option).
pub fn interpolate_embeddings(
    e_i: &TextEmbedding,
    e_next: &TextEmbedding,
    alpha: f32,
    use_beta: bool,
    w: f32,
) -> Result<TextEmbedding> {
    if e_i.values.dim() != e_next.values.dim() {
        return Err(Error::shape(
            "interpolate_embeddings",
            format!("{:?}", e_i.values.dim()),
            format!("{:?}", e_next.values.dim()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = if use_beta { w * alpha } else { alpha };
    let values = &e_i.values * (1.0 - a) + &e_next.values * a;
    let source_prompt = if a == 0.0 {
        e_i.source_prompt.clone()
    } else if a == 1.0 {
        e_next.source_prompt.clone()
    } else {
        format!("[{}] -({a:.4})-> [{}]", e_i.source_prompt, e_next.source_prompt)
    };
    Ok(TextEmbedding {
        values,
        source_prompt,
    })
}

/// Total emitted frames once stage-boundary frames are deduplicated.
pub fn expected_frame_count(n_t: usize, n_f: usize) -> usize {
    n_t * n_f - (n_t - 1)
}

/// Hex hash of an image's raw sample values.
pub fn image_sha256(image: &ImageBuf) -> String {
    let mut bytes = Vec::with_capacity(image.values.len() * 4);
    for v in image.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// One denoising job, fully specified.
pub struct FrameJob {
    pub stage: usize,
    pub alpha: f32,
    pub conditional: TextEmbedding,
    pub initial_latent: Latent,
    pub hooks: FrameHooks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub stage: usize,
    pub alpha: f32,
    pub strategy: Strategy,
    pub source_prompt_sha256: String,
    pub target_prompt_sha256: String,
}

pub struct StageInput<'a> {
    pub stage_index: usize,
    pub prior_image: &'a ImageBuf,
    pub source_prompt: &'a str,
    pub target_prompt: &'a str,
    pub strategy: Strategy,
}

pub struct StageFrames {
    pub images: Vec<ImageBuf>,
    pub latents: Vec<Latent>,
    pub alphas: Vec<f32>,
    /// The shared initial noise all of the stage's jobs started from.
    pub initial_latent: Latent,
    /// Per frame, the fired-hook instrumentation (empty unless requested).
    pub fired: Vec<BTreeSet<(usize, HookSite)>>,
}

fn strategy_guidance(strategy: Strategy, source_embedding: &TextEmbedding, scale: f32) -> GuidanceConfig {
    match strategy {
        // Null-text replacement: unconditional branch conditioned on the
        // stage's source prompt.
        Strategy::Fai | Strategy::Kvai | Strategy::Dai => GuidanceConfig {
            scale,
            unconditional: Unconditional::ReplaceWithSource(source_embedding.clone()),
        },
        // The plain DDIM baseline keeps the ordinary null-text branch.
        Strategy::None => GuidanceConfig {
            scale,
            unconditional: Unconditional::NullText,
        },
    }
}

fn frame_hooks_for(
    strategy: Strategy,
    inversion: &std::sync::Arc<ActivationTrace>,
    endpoints: Option<(&std::sync::Arc<ActivationTrace>, &std::sync::Arc<ActivationTrace>)>,
    alpha: f32,
    w: f32,
    schedule: &InjectionSchedule,
    grid: &TimestepGrid,
) -> Result<FrameHooks> {
    let weights = BlendWeights::new(alpha, w)?;
    match strategy {
        Strategy::Fai => fai_hooks(inversion, endpoints, &weights, schedule, grid),
        Strategy::Kvai => kvai_hooks(inversion, endpoints, &weights, schedule, grid),
        Strategy::Dai => dai_hooks(inversion, &weights, schedule, grid),
        Strategy::None => Ok(FrameHooks::none()),
    }
}

/// Invert a prior image, reusing the on-disk trace cache when configured.
fn invert_with_cache(
    engine: &DdimEngine,
    prior_image: &ImageBuf,
    embedding: &TextEmbedding,
    grid: &TimestepGrid,
    sites: &BTreeSet<HookSite>,
    config: &RunConfig,
    source_id: &str,
) -> Result<(Latent, std::sync::Arc<ActivationTrace>)> {
    let z0 = engine.backbone().encode_image(prior_image)?;
    if let Some(cache_dir) = &config.trace_cache {
        std::fs::create_dir_all(cache_dir)?;
        let path = cache_path(
            cache_dir,
            &engine.backbone().descriptor().name,
            &image_sha256(prior_image),
            &sha256_hex(embedding.source_prompt.as_bytes()),
            grid.sampling_timesteps(),
            sites,
        );
        let latent_path = path.with_extension("laserlat");
        if path.exists() && latent_path.exists() {
            let trace = ActivationTrace::read_archive(&path)?;
            let z_t = read_latent(&latent_path)?;
            return Ok((z_t, std::sync::Arc::new(trace)));
        }
        let (z_t, trace) = engine.invert(&z0, embedding, grid, sites, source_id)?;
        trace.write_archive(&path)?;
        write_latent(&z_t, &latent_path)?;
        return Ok((z_t, std::sync::Arc::new(trace)));
    }
    let (z_t, trace) = engine.invert(&z0, embedding, grid, sites, source_id)?;
    Ok((z_t, std::sync::Arc::new(trace)))
}

/// Generate all `n_f` frames of one stage transition.
pub fn generate_stage(
    engine: &DdimEngine,
    input: &StageInput<'_>,
    config: &RunConfig,
    record_fired: bool,
) -> Result<StageFrames> {
    let backbone = engine.backbone();
    let descriptor = backbone.descriptor();
    let grid = engine.grid(config.steps)?;
    let schedule = config.schedule_for(input.strategy, descriptor);
    schedule.validate(config.steps, descriptor)?;

    let e_source = backbone.encode_prompt(input.source_prompt)?;
    let e_target = backbone.encode_prompt(input.target_prompt)?;
    let alpha_grid = make_alpha_grid(config.n_f)?;
    let alphas = alpha_grid.values();
    let guidance = strategy_guidance(input.strategy, &e_source, config.cfg_scale);
    let use_beta = config.use_beta_embedding && input.strategy == Strategy::Dai;

    // (1) Inversion with the strategy's capture sites.
    let capture = inversion_capture_sites(input.strategy, &schedule);
    let source_id = format!("stage-{}", input.stage_index);
    let (z_t, inversion_trace) = invert_with_cache(
        engine,
        input.prior_image,
        &e_source,
        &grid,
        &capture,
        config,
        &source_id,
    )?;

    let endpoint_sites = endpoint_capture_sites(input.strategy, &schedule);
    let mut images: Vec<Option<ImageBuf>> = vec![None; config.n_f];
    let mut latents: Vec<Option<Latent>> = vec![None; config.n_f];
    let mut fired: Vec<BTreeSet<(usize, HookSite)>> = vec![BTreeSet::new(); config.n_f];

    // (2) Endpoint frames first, capturing their traces when the strategy's
    // interior blend needs them.
    let mut endpoint_traces: Vec<Option<std::sync::Arc<ActivationTrace>>> = vec![None, None];
    for (slot, frame_idx) in [(0usize, 0usize), (1, config.n_f - 1)] {
        let alpha = alphas[frame_idx];
        let cond = interpolate_embeddings(&e_source, &e_target, alpha, use_beta, config.w)?;
        let hooks = frame_hooks_for(
            input.strategy,
            &inversion_trace,
            None,
            alpha,
            config.w,
            &schedule,
            &grid,
        )?;
        let capture_spec = if endpoint_sites.is_empty() {
            None
        } else {
            Some(CaptureSpec {
                sites: endpoint_sites.clone(),
                origin: if slot == 0 {
                    TraceOrigin::EndpointFirst
                } else {
                    TraceOrigin::EndpointLast
                },
                source_id: format!("{source_id}-endpoint-{slot}"),
            })
        };
        let outcome = engine.sample(
            &z_t,
            &cond,
            &hooks,
            SampleParams {
                guidance: &guidance,
                grid: &grid,
                capture: capture_spec,
                record_fired,
            },
        )?;
        let latent = outcome.latents.into_iter().next().expect("one frame");
        images[frame_idx] = Some(backbone.decode_latent(&latent)?);
        latents[frame_idx] = Some(latent);
        fired[frame_idx] = outcome.fired.into_iter().next().unwrap_or_default();
        endpoint_traces[slot] = outcome.trace.map(std::sync::Arc::new);
    }

    // (3) Interior frames.
    let interior: Vec<usize> = (1..config.n_f - 1).collect();
    if !interior.is_empty() {
        let endpoints = match (&endpoint_traces[0], &endpoint_traces[1]) {
            (Some(first), Some(last)) => Some((first, last)),
            _ => None,
        };
        if input.strategy.needs_endpoint_traces() && endpoints.is_none() {
            return Err(Error::config(format!(
                "strategy {} requires endpoint traces for interior frames",
                input.strategy
            )));
        }
        let jobs: Vec<FrameJob> = interior
            .iter()
            .map(|frame_idx| {
                let alpha = alphas[*frame_idx];
                Ok(FrameJob {
                    stage: input.stage_index,
                    alpha,
                    conditional: interpolate_embeddings(
                        &e_source, &e_target, alpha, use_beta, config.w,
                    )?,
                    initial_latent: z_t.clone(),
                    hooks: frame_hooks_for(
                        input.strategy,
                        &inversion_trace,
                        endpoints,
                        alpha,
                        config.w,
                        &schedule,
                        &grid,
                    )?,
                })
            })
            .collect::<Result<_>>()?;

        if input.strategy.uses_cross_frame() {
            // All interior frames advance in lockstep with cross-frame
            // attention over the batch.
            let z_init: Vec<Latent> = jobs.iter().map(|j| j.initial_latent.clone()).collect();
            let cond: Vec<TextEmbedding> = jobs.iter().map(|j| j.conditional.clone()).collect();
            let hooks: Vec<FrameHooks> = jobs.iter().map(|j| j.hooks.clone()).collect();
            let outcome = engine.sample_batch(
                &z_init,
                &cond,
                &hooks,
                SampleParams {
                    guidance: &guidance,
                    grid: &grid,
                    capture: None,
                    record_fired,
                },
            )?;
            for ((frame_idx, latent), frame_fired) in interior
                .iter()
                .zip(outcome.latents.into_iter())
                .zip(outcome.fired.into_iter())
            {
                images[*frame_idx] = Some(backbone.decode_latent(&latent)?);
                latents[*frame_idx] = Some(latent);
                fired[*frame_idx] = frame_fired;
            }
        } else {
            for (frame_idx, job) in interior.iter().zip(jobs.into_iter()) {
                let outcome = engine.sample(
                    &job.initial_latent,
                    &job.conditional,
                    &job.hooks,
                    SampleParams {
                        guidance: &guidance,
                        grid: &grid,
                        capture: None,
                        record_fired,
                    },
                )?;
                let latent = outcome.latents.into_iter().next().expect("one frame");
                images[*frame_idx] = Some(backbone.decode_latent(&latent)?);
                latents[*frame_idx] = Some(latent);
                fired[*frame_idx] = outcome.fired.into_iter().next().unwrap_or_default();
            }
        }
    }

    Ok(StageFrames {
        images: images.into_iter().map(|i| i.expect("all frames filled")).collect(),
        latents: latents.into_iter().map(|l| l.expect("all frames filled")).collect(),
        alphas: alphas.to_vec(),
        initial_latent: z_t,
        fired,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleEcho {
    pub fai: InjectionSchedule,
    pub kv: InjectionSchedule,
    pub w: f32,
    pub gamma_definition: String,
}

/// Reproducibility record for one run. Wall-clock timings live in a
/// separate file so the manifest is bit-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub backbone: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub description: String,
    pub seed: u64,
    pub n_t: usize,
    pub n_f: usize,
    /// Hash of the user-provided input image; `None` when it was generated.
    pub input_image_sha256: Option<String>,
    pub plan: StagePlan,
    pub schedules: ScheduleEcho,
    pub grid_timesteps: Vec<i64>,
    pub frames: Vec<FrameMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub initial_image_seconds: Option<f64>,
    pub per_stage_seconds: Vec<f64>,
    pub per_frame_mean_seconds: f64,
}

pub struct AnimationResult {
    pub input_image: ImageBuf,
    pub frames: Vec<ImageBuf>,
    pub frame_meta: Vec<FrameMeta>,
    pub manifest: RunManifest,
    pub timings: Timings,
    pub metrics: MetricsReport,
}

fn generate_initial_image(
    engine: &DdimEngine,
    prompt: &str,
    seed: u64,
    config: &RunConfig,
) -> Result<ImageBuf> {
    let backbone = engine.backbone();
    let descriptor = backbone.descriptor();
    let embedding = backbone.encode_prompt(prompt)?;
    let grid = engine.grid(config.steps)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z_t = Latent::new(Array3::from_shape_simple_fn(
        (
            descriptor.latent_channels,
            descriptor.latent_height,
            descriptor.latent_width,
        ),
        || StandardNormal.sample(&mut rng),
    ));
    let guidance = GuidanceConfig {
        scale: config.cfg_scale,
        unconditional: Unconditional::NullText,
    };
    let outcome = engine.sample(
        &z_t,
        &embedding,
        &FrameHooks::none(),
        SampleParams {
            guidance: &guidance,
            grid: &grid,
            capture: None,
            record_fired: false,
        },
    )?;
    backbone.decode_latent(&outcome.latents[0])
}

fn save_frames(dir: &Path, frames: &[ImageBuf], start_index: usize) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (offset, frame) in frames.iter().enumerate() {
        frame.save_png(&frames_dir.join(format!("{:04}.png", start_index + offset)))?;
    }
    Ok(())
}

fn save_transcripts(dir: &Path, transcripts: &[Transcript]) -> Result<()> {
    let tdir = dir.join("transcripts");
    std::fs::create_dir_all(&tdir)?;
    for (i, t) in transcripts.iter().enumerate() {
        let path = tdir.join(format!("{:02}_{}.json", i, t.agent));
        std::fs::write(path, serde_json::to_string_pretty(t)?)?;
    }
    Ok(())
}

/// Run the full animation pipeline for a validated plan. When `run_dir` is
/// given, frames are written as each stage completes so failures preserve
/// partial results on disk.
pub fn generate_animation(
    engine: &DdimEngine,
    request: &AnimationRequest,
    plan: &StagePlan,
    config: &RunConfig,
    transcripts: &[Transcript],
    run_dir: Option<&Path>,
) -> Result<AnimationResult> {
    request.validate()?;
    plan.validate()?;
    let descriptor = engine.backbone().descriptor().clone();
    config.validate(&descriptor)?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        save_transcripts(dir, transcripts)?;
    }

    let started = Instant::now();
    let (input_image, input_image_sha256, initial_image_seconds) = match &request.input_image {
        Some(image) => (image.clone(), Some(image_sha256(image)), None),
        None => {
            let prompt = plan.enhanced_initial_prompt.as_deref().ok_or_else(|| {
                Error::config(
                    "no input image and no enhanced initial prompt in the plan; \
                     the planning workflow must run PGA when the image is absent",
                )
            })?;
            let t0 = Instant::now();
            let image = generate_initial_image(engine, prompt, request.seed, config)?;
            (image, None, Some(t0.elapsed().as_secs_f64()))
        }
    };
    if let Some(dir) = run_dir {
        input_image.save_png(&dir.join("input.png"))?;
    }

    let n_t = plan.n_t();
    let mut frames: Vec<ImageBuf> = Vec::with_capacity(expected_frame_count(n_t, config.n_f));
    let mut frame_meta: Vec<FrameMeta> = Vec::new();
    let mut per_stage_seconds = Vec::with_capacity(n_t);

    let mut stage_result: Result<()> = Ok(());
    let mut prior_image = input_image.clone();
    for stage_index in 0..n_t {
        let stage_started = Instant::now();
        let transition = &plan.transitions[stage_index];
        let input = StageInput {
            stage_index,
            prior_image: &prior_image,
            source_prompt: &plan.prompts[stage_index],
            target_prompt: &plan.prompts[stage_index + 1],
            strategy: transition.strategy,
        };
        let stage = match generate_stage(engine, &input, config, false) {
            Ok(s) => s,
            Err(e) => {
                stage_result = Err(e);
                break;
            }
        };
        per_stage_seconds.push(stage_started.elapsed().as_secs_f64());

        // Boundary dedup: the alpha=0 frame of every stage after the first
        // re-renders the previous stage's final frame.
        let skip = usize::from(stage_index > 0);
        let emitted = &stage.images[skip..];
        if let Some(dir) = run_dir {
            save_frames(dir, emitted, frames.len())?;
        }
        for offset in 0..emitted.len() {
            let frame_idx_in_stage = skip + offset;
            frame_meta.push(FrameMeta {
                index: frames.len() + offset,
                stage: stage_index,
                alpha: stage.alphas[frame_idx_in_stage],
                strategy: transition.strategy,
                source_prompt_sha256: sha256_hex(plan.prompts[stage_index].as_bytes()),
                target_prompt_sha256: sha256_hex(plan.prompts[stage_index + 1].as_bytes()),
            });
        }
        frames.extend(emitted.iter().cloned());
        prior_image = stage.images.last().expect("n_f >= 2").clone();
    }

    let total_seconds = started.elapsed().as_secs_f64();
    let timings = Timings {
        total_seconds,
        initial_image_seconds,
        per_stage_seconds,
        per_frame_mean_seconds: if frames.is_empty() {
            0.0
        } else {
            total_seconds / frames.len() as f64
        },
    };

    if let Err(e) = stage_result {
        // Partial results stay on disk alongside a failure note.
        if let Some(dir) = run_dir {
            let note = serde_json::json!({
                "error": e.to_string(),
                "frames_completed": frames.len(),
            });
            let _ = std::fs::write(
                dir.join("failure.json"),
                serde_json::to_string_pretty(&note)?,
            );
        }
        return Err(e);
    }

    let manifest = RunManifest {
        backbone: descriptor.name.clone(),
        config: config.clone(),
        config_sha256: config.sha256(),
        description: request.description.clone(),
        seed: request.seed,
        n_t,
        n_f: config.n_f,
        input_image_sha256,
        plan: plan.clone(),
        schedules: ScheduleEcho {
            fai: config.fai_schedule(&descriptor),
            kv: config.kv_schedule(),
            w: config.w,
            gamma_definition: "t / max_timestep".to_string(),
        },
        grid_timesteps: engine.grid(config.steps)?.sampling_timesteps().to_vec(),
        frames: frame_meta.clone(),
    };

    let frame_alphas: Vec<(usize, f32)> =
        frame_meta.iter().map(|m| (m.stage, m.alpha)).collect();
    let metrics = evaluate(
        &frames,
        &input_image,
        &plan.prompts,
        &frame_alphas,
        total_seconds,
    )?;

    if let Some(dir) = run_dir {
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(
            dir.join("timings.json"),
            serde_json::to_string_pretty(&timings)?,
        )?;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)?,
        )?;
        save_gif(&frames, config.gif_fps, &dir.join("animation.gif"))?;
    }

    Ok(AnimationResult {
        input_image,
        frames,
        frame_meta,
        manifest,
        timings,
        metrics,
    })
}
