//! Deterministic DDIM sampling and inversion with classifier-free guidance,
//! null-text replacement, activation capture and injection hooks.
//!
//! Inversion always runs guidance-free (a single conditional branch), which
//! is also when activations are captured. Sampling runs two branches when
//! the guidance scale differs from 1: the unconditional branch uses either
//! the null-text embedding or, under null-text replacement, the stage's
//! source prompt embedding. Captures during sampling record the conditional
//! branch; injection transforms apply to both branches.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::backbone::{Backbone, HookSite, Latent, SiteCtx, SiteVisitor, TextEmbedding};
use crate::error::{Error, Result};
use crate::injection::FrameHooks;
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::trace::{ActivationTrace, TraceBuilder, TraceOrigin};

/// How the unconditional CFG branch is conditioned.
#[derive(Debug, Clone)]
pub enum Unconditional {
    /// Plain null-text embedding.
    NullText,
    /// Null-text replacement: condition the unconditional branch on the
    /// stage's source prompt embedding.
    ReplaceWithSource(TextEmbedding),
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub scale: f32,
    pub unconditional: Unconditional,
}

impl GuidanceConfig {
    pub fn new(scale: f32, unconditional: Unconditional) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::config(format!(
                "guidance scale {scale} must be finite and >= 0"
            )));
        }
        Ok(GuidanceConfig {
            scale,
            unconditional,
        })
    }

    /// Guidance-free sampling (scale 1, null text).
    pub fn off() -> Self {
        GuidanceConfig {
            scale: 1.0,
            unconditional: Unconditional::NullText,
        }
    }
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Latent, eps_cond: &Latent, scale: f32) -> Result<Latent> {
    if eps_uncond.values.shape() != eps_cond.values.shape() {
        return Err(Error::shape(
            "cfg_combine",
            format!("{:?}", eps_uncond.values.shape()),
            format!("{:?}", eps_cond.values.shape()),
        ));
    }
    let diff = &eps_cond.values - &eps_uncond.values;
    Ok(Latent {
        values: &eps_uncond.values + &(diff * scale),
        timestep_tag: eps_cond.timestep_tag,
    })
}

/// One deterministic DDIM update from level `t` to level `t_prev`; linear in
/// `(z_t, eps_hat)` and algebraically invertible by the reverse step with
/// the same noise estimate.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Latent,
    eps_hat: &Latent,
    t: i64,
    t_prev: i64,
) -> Result<Latent> {
    if z_t.values.shape() != eps_hat.values.shape() {
        return Err(Error::shape(
            "ddim_step",
            format!("{:?}", z_t.values.shape()),
            format!("{:?}", eps_hat.values.shape()),
        ));
    }
    if !z_t.is_finite() || !eps_hat.is_finite() {
        return Err(Error::numeric("ddim_step: non-finite input"));
    }
    let alpha_t = schedule.alpha_bar(t)?;
    let alpha_prev = schedule.alpha_bar(t_prev)?;
    let coef_z = (alpha_prev / alpha_t).sqrt();
    let coef_eps = (1.0 - alpha_prev).sqrt() - coef_z * (1.0 - alpha_t).sqrt();
    let values = &z_t.values * (coef_z as f32) + &eps_hat.values * (coef_eps as f32);
    Ok(Latent::with_tag(values, t_prev))
}

/// Capture request for a sampling run.
#[derive(Debug, Clone)]
pub struct CaptureSpec {
    pub sites: BTreeSet<HookSite>,
    pub origin: TraceOrigin,
    pub source_id: String,
}

/// Options shared by [`DdimEngine::sample`] and [`DdimEngine::sample_batch`].
pub struct SampleParams<'a> {
    pub guidance: &'a GuidanceConfig,
    pub grid: &'a TimestepGrid,
    pub capture: Option<CaptureSpec>,
    /// Record the set of `(sampling ordinal, site)` pairs at which a
    /// transform actually fired, per frame.
    pub record_fired: bool,
}

pub struct SampleOutcome {
    pub latents: Vec<Latent>,
    pub trace: Option<ActivationTrace>,
    /// Per frame, the fired-hook instrumentation (empty unless requested).
    pub fired: Vec<BTreeSet<(usize, HookSite)>>,
}

/// Visitor wiring captures and per-frame transforms into a backbone call.
struct EngineVisitor<'a> {
    timestep: i64,
    ordinal: usize,
    gamma: f32,
    hooks: &'a [FrameHooks],
    cross_frame: bool,
    capture: Option<&'a mut TraceBuilder>,
    fired: Option<&'a mut Vec<BTreeSet<(usize, HookSite)>>>,
}

impl SiteVisitor for EngineVisitor<'_> {
    fn visit(&mut self, ctx: SiteCtx, value: ArrayD<f32>) -> Result<ArrayD<f32>> {
        if let Some(builder) = self.capture.as_deref_mut() {
            if builder.sites().contains(&ctx.site) {
                builder.record(self.timestep, ctx.site, value.clone())?;
            }
        }
        let frame_hooks = &self.hooks[ctx.frame];
        if let Some(transform) = frame_hooks.transforms.get(&(self.timestep, ctx.site)) {
            let out = transform.apply(self.timestep, ctx.site, self.gamma, &value)?;
            if let Some(fired) = self.fired.as_deref_mut() {
                fired[ctx.frame].insert((self.ordinal, ctx.site));
            }
            return Ok(out);
        }
        Ok(value)
    }

    fn cross_frame(&self) -> bool {
        self.cross_frame
    }
}

pub struct DdimEngine {
    backbone: Arc<dyn Backbone>,
    schedule: NoiseSchedule,
}

impl DdimEngine {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        let schedule = backbone.descriptor().noise_schedule();
        DdimEngine { backbone, schedule }
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn grid(&self, num_steps: usize) -> Result<TimestepGrid> {
        TimestepGrid::new(&self.schedule, num_steps)
    }

    fn check_capture_sites(&self, sites: &BTreeSet<HookSite>) -> Result<()> {
        let descriptor = self.backbone.descriptor();
        for site in sites {
            if !descriptor.has_site(site) {
                return Err(Error::config(format!(
                    "capture site {site} is not declared by backbone '{}'",
                    descriptor.name
                )));
            }
        }
        Ok(())
    }

    fn check_hooks(&self, hooks: &[FrameHooks], grid: &TimestepGrid) -> Result<bool> {
        let descriptor = self.backbone.descriptor();
        let cross_frame = hooks.first().map(|h| h.cross_frame).unwrap_or(false);
        for frame_hooks in hooks {
            if frame_hooks.cross_frame != cross_frame {
                return Err(Error::config(
                    "all frames of a batch must share the cross-frame attention mode",
                ));
            }
            for (t, site) in frame_hooks.transforms.keys() {
                if !grid.contains(*t) {
                    return Err(Error::config(format!(
                        "injection hook at timestep {t} is outside the sampling grid"
                    )));
                }
                if !descriptor.has_site(site) {
                    return Err(Error::config(format!(
                        "injection hook at site {site} is not declared by backbone '{}'",
                        descriptor.name
                    )));
                }
            }
        }
        Ok(cross_frame)
    }

    /// DDIM inversion of a clean latent, capturing `capture_sites` at every
    /// grid timestep. Runs guidance-free.
    pub fn invert(
        &self,
        image_latent: &Latent,
        embedding: &TextEmbedding,
        grid: &TimestepGrid,
        capture_sites: &BTreeSet<HookSite>,
        source_id: &str,
    ) -> Result<(Latent, ActivationTrace)> {
        self.check_capture_sites(capture_sites)?;
        let mut builder = TraceBuilder::new(
            TraceOrigin::Inversion,
            source_id,
            grid.inversion_timesteps(),
            capture_sites.clone(),
        );
        let no_hooks = [FrameHooks::none()];
        let mut z = image_latent.clone();
        for (lo, hi) in grid.inversion_pairs() {
            let mut visitor = EngineVisitor {
                timestep: hi,
                ordinal: 0,
                gamma: self.schedule.decay_weight(hi),
                hooks: &no_hooks,
                cross_frame: false,
                capture: Some(&mut builder),
                fired: None,
            };
            let eps = self.backbone.predict_noise(&z, hi, embedding, &mut visitor)?;
            z = ddim_step(&self.schedule, &z, &eps, lo, hi)?;
        }
        Ok((z, builder.seal()?))
    }

    /// Single-frame sampling; see [`DdimEngine::sample_batch`].
    pub fn sample(
        &self,
        z_init: &Latent,
        cond: &TextEmbedding,
        hooks: &FrameHooks,
        params: SampleParams<'_>,
    ) -> Result<SampleOutcome> {
        self.sample_batch(
            std::slice::from_ref(z_init),
            std::slice::from_ref(cond),
            std::slice::from_ref(hooks),
            params,
        )
    }

    /// DDIM sampling of a batch of frames advancing in lockstep over the
    /// grid. With a guidance scale of exactly 1 only the conditional branch
    /// is evaluated; otherwise both branches run and injection transforms
    /// apply to both, while captures record the conditional branch.
    pub fn sample_batch(
        &self,
        z_init: &[Latent],
        cond: &[TextEmbedding],
        hooks: &[FrameHooks],
        params: SampleParams<'_>,
    ) -> Result<SampleOutcome> {
        let frames = z_init.len();
        if frames == 0 || cond.len() != frames || hooks.len() != frames {
            return Err(Error::shape(
                "sample_batch",
                "equal non-zero latent/embedding/hook counts",
                format!("{}/{}/{}", frames, cond.len(), hooks.len()),
            ));
        }
        let cross_frame = self.check_hooks(hooks, params.grid)?;
        let mut capture_builder = match &params.capture {
            Some(spec) => {
                if frames != 1 {
                    return Err(Error::config(
                        "activation capture is only supported for single-frame sampling runs",
                    ));
                }
                self.check_capture_sites(&spec.sites)?;
                Some(TraceBuilder::new(
                    spec.origin,
                    spec.source_id.clone(),
                    params.grid.sampling_timesteps().to_vec(),
                    spec.sites.clone(),
                ))
            }
            None => None,
        };
        let guidance = params.guidance;
        if !guidance.scale.is_finite() || guidance.scale < 0.0 {
            return Err(Error::config(format!(
                "guidance scale {} must be finite and >= 0",
                guidance.scale
            )));
        }
        let uncond_embeddings: Vec<TextEmbedding> = match &guidance.unconditional {
            Unconditional::NullText => vec![self.backbone.null_embedding(); frames],
            Unconditional::ReplaceWithSource(e) => vec![e.clone(); frames],
        };

        let mut fired: Vec<BTreeSet<(usize, HookSite)>> = vec![BTreeSet::new(); frames];
        let mut states: Vec<Latent> = z_init.to_vec();
        for (t, t_prev) in params.grid.sampling_pairs() {
            let ordinal = params
                .grid
                .ordinal_of(t)
                .expect("sampling pairs only contain grid timesteps");
            let gamma = self.schedule.decay_weight(t);

            let eps_uncond = if guidance.scale != 1.0 {
                let mut visitor = EngineVisitor {
                    timestep: t,
                    ordinal,
                    gamma,
                    hooks,
                    cross_frame,
                    capture: None,
                    fired: None,
                };
                Some(self.backbone.predict_noise_batch(
                    &states,
                    t,
                    &uncond_embeddings,
                    &mut visitor,
                )?)
            } else {
                None
            };

            let mut visitor = EngineVisitor {
                timestep: t,
                ordinal,
                gamma,
                hooks,
                cross_frame,
                capture: capture_builder.as_mut(),
                fired: if params.record_fired {
                    Some(&mut fired)
                } else {
                    None
                },
            };
            let eps_cond = self
                .backbone
                .predict_noise_batch(&states, t, cond, &mut visitor)?;

            for frame in 0..frames {
                let eps = match &eps_uncond {
                    Some(uncond) => cfg_combine(&uncond[frame], &eps_cond[frame], guidance.scale)?,
                    None => eps_cond[frame].clone(),
                };
                states[frame] = ddim_step(&self.schedule, &states[frame], &eps, t, t_prev)?;
            }
        }

        let trace = capture_builder.map(|b| b.seal()).transpose()?;
        Ok(SampleOutcome {
            latents: states,
            trace,
            fired,
        })
    }
}
