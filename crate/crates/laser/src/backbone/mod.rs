//! Abstract interface over a text-conditioned latent diffusion backbone.
//!
//! A backbone bundles a text encoder, a latent image codec and a noise
//! predictor, and exposes named hook sites on the denoiser's decoder layers
//! where activations can be captured or replaced. Only decoder-side residual
//! features and self-attention projections are hookable; cross-attention is
//! not exposed.

mod tiny;

pub use tiny::TinyBackbone;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageBuf;
use crate::schedule::NoiseSchedule;

/// What a hook site exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    ResidualFeature,
    SelfAttention,
}

/// Which value within the site. `F` exists only on residual-feature sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteSlot {
    F,
    Q,
    K,
    V,
}

impl fmt::Display for SiteSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SiteSlot::F => "f",
            SiteSlot::Q => "q",
            SiteSlot::K => "k",
            SiteSlot::V => "v",
        };
        write!(f, "{s}")
    }
}

/// Address of one hookable value. Decoder layers are 1-based, ordered from
/// the deepest (lowest-resolution) decoder block outward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub decoder_layer: usize,
    pub kind: SiteKind,
    pub slot: SiteSlot,
}

impl HookSite {
    pub fn feature(decoder_layer: usize) -> Self {
        HookSite {
            decoder_layer,
            kind: SiteKind::ResidualFeature,
            slot: SiteSlot::F,
        }
    }

    pub fn attention(decoder_layer: usize, slot: SiteSlot) -> Self {
        debug_assert!(slot != SiteSlot::F);
        HookSite {
            decoder_layer,
            kind: SiteKind::SelfAttention,
            slot,
        }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.decoder_layer, self.slot)
    }
}

/// Prompt embedding: `[num_tokens, embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub values: Array2<f32>,
    pub source_prompt: String,
}

impl TextEmbedding {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Latent image tensor: `[channels, h, w]`, optionally tagged with the
/// noise level it sits at.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f32>,
    pub timestep_tag: Option<i64>,
}

impl Latent {
    pub fn new(values: Array3<f32>) -> Self {
        Latent {
            values,
            timestep_tag: None,
        }
    }

    pub fn with_tag(values: Array3<f32>, timestep: i64) -> Self {
        Latent {
            values,
            timestep_tag: Some(timestep),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Relative L2 error against a reference latent.
    pub fn relative_error(&self, reference: &Latent) -> Result<f64> {
        if self.values.shape() != reference.values.shape() {
            return Err(Error::shape(
                "Latent::relative_error",
                format!("{:?}", reference.values.shape()),
                format!("{:?}", self.values.shape()),
            ));
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in self.values.iter().zip(reference.values.iter()) {
            let d = (*a - *b) as f64;
            num += d * d;
            den += (*b as f64) * (*b as f64);
        }
        if den == 0.0 {
            return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok((num / den).sqrt())
    }
}

/// Static description of a backbone: shapes, hook topology, scheduler
/// parameters, codec tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    pub num_decoder_layers: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub embed_dim: usize,
    pub num_tokens: usize,
    /// Spatial downsampling factor of the latent codec.
    pub codec_downsample_factor: usize,
    /// Declared per-pixel RMS reconstruction bound of the deterministic codec
    /// on in-range images.
    pub codec_rms_tolerance: f64,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl BackboneDescriptor {
    pub fn image_height(&self) -> usize {
        self.latent_height * self.codec_downsample_factor
    }

    pub fn image_width(&self) -> usize {
        self.latent_width * self.codec_downsample_factor
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::scaled_linear(self.train_timesteps, self.beta_start, self.beta_end)
    }

    /// Every hook site, in visitation order: layers ascending, and `f`, `q`,
    /// `k`, `v` within a layer.
    pub fn hook_sites(&self) -> Vec<HookSite> {
        let mut sites = Vec::with_capacity(self.num_decoder_layers * 4);
        for layer in 1..=self.num_decoder_layers {
            sites.push(HookSite::feature(layer));
            sites.push(HookSite::attention(layer, SiteSlot::Q));
            sites.push(HookSite::attention(layer, SiteSlot::K));
            sites.push(HookSite::attention(layer, SiteSlot::V));
        }
        sites
    }

    pub fn has_site(&self, site: &HookSite) -> bool {
        if site.decoder_layer < 1 || site.decoder_layer > self.num_decoder_layers {
            return false;
        }
        match site.kind {
            SiteKind::ResidualFeature => site.slot == SiteSlot::F,
            SiteKind::SelfAttention => site.slot != SiteSlot::F,
        }
    }
}

/// Call context handed to a [`SiteVisitor`].
#[derive(Debug, Clone, Copy)]
pub struct SiteCtx {
    pub site: HookSite,
    pub timestep: i64,
    /// Index within the frame batch of the current call.
    pub frame: usize,
}

/// Visitor invoked at every declared hook site, once per frame per
/// `predict_noise` call, in the fixed order documented on
/// [`BackboneDescriptor::hook_sites`]. The visitor may observe the value
/// (captures receive a copy by construction: the backbone hands over an
/// owned array) and may replace it; the returned array must keep the shape.
pub trait SiteVisitor {
    fn visit(&mut self, ctx: SiteCtx, value: ArrayD<f32>) -> Result<ArrayD<f32>>;

    /// When true, self-attention lets each frame's queries attend over the
    /// concatenated keys/values of the whole frame batch.
    fn cross_frame(&self) -> bool {
        false
    }
}

/// No-op visitor.
pub struct NoHooks;

impl SiteVisitor for NoHooks {
    fn visit(&mut self, _ctx: SiteCtx, value: ArrayD<f32>) -> Result<ArrayD<f32>> {
        Ok(value)
    }
}

/// Runs a visitor and enforces shape closure on its output.
pub(crate) fn visit_checked(
    hooks: &mut dyn SiteVisitor,
    ctx: SiteCtx,
    value: ArrayD<f32>,
) -> Result<ArrayD<f32>> {
    let shape = value.shape().to_vec();
    let out = hooks.visit(ctx, value)?;
    if out.shape() != shape.as_slice() {
        return Err(Error::shape(
            format!("injection at site {}", ctx.site),
            format!("{shape:?}"),
            format!("{:?}", out.shape()),
        ));
    }
    Ok(out)
}

/// A frozen text-conditioned latent diffusion backbone.
pub trait Backbone: Send + Sync {
    fn descriptor(&self) -> &BackboneDescriptor;

    /// Deterministic prompt encoding. Prompts longer than the token capacity
    /// are truncated with a warning; an empty prompt is an error.
    fn encode_prompt(&self, prompt: &str) -> Result<TextEmbedding>;

    /// The unconditional ("null text") embedding.
    fn null_embedding(&self) -> TextEmbedding;

    /// Deterministic latent encoding of an RGB image whose dimensions match
    /// the descriptor.
    fn encode_image(&self, image: &ImageBuf) -> Result<Latent>;

    /// Decode a latent to an RGB image clamped to `[0, 1]`.
    fn decode_latent(&self, latent: &Latent) -> Result<ImageBuf>;

    /// Predict noise for a batch of latents (one per frame) under per-frame
    /// embeddings. Every declared hook site is visited exactly once per
    /// frame, in the documented order; frames ascend within a site.
    fn predict_noise_batch(
        &self,
        latents: &[Latent],
        timestep: i64,
        embeddings: &[TextEmbedding],
        hooks: &mut dyn SiteVisitor,
    ) -> Result<Vec<Latent>>;

    /// Single-latent convenience wrapper over [`Backbone::predict_noise_batch`].
    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: i64,
        embedding: &TextEmbedding,
        hooks: &mut dyn SiteVisitor,
    ) -> Result<Latent> {
        let mut out = self.predict_noise_batch(
            std::slice::from_ref(latent),
            timestep,
            std::slice::from_ref(embedding),
            hooks,
        )?;
        Ok(out.remove(0))
    }
}

/// Descriptor of the test backbone: 8 decoder layers over a 4x8x8 latent.
pub fn tiny_descriptor() -> BackboneDescriptor {
    BackboneDescriptor {
        name: "tiny-test".to_string(),
        num_decoder_layers: 8,
        latent_channels: 4,
        latent_height: 8,
        latent_width: 8,
        embed_dim: 16,
        num_tokens: 8,
        codec_downsample_factor: 4,
        codec_rms_tolerance: 0.18,
        train_timesteps: 1000,
        beta_start: 0.00085,
        beta_end: 0.012,
    }
}

/// Descriptor data for a Stable-Diffusion-v1.5-class backbone: 512x512
/// images, factor-8 codec, 12 decoder layers counted res-block-wise from the
/// deepest block outward.
pub fn sd15_descriptor() -> BackboneDescriptor {
    BackboneDescriptor {
        name: "sd15-like".to_string(),
        num_decoder_layers: 12,
        latent_channels: 4,
        latent_height: 64,
        latent_width: 64,
        embed_dim: 768,
        num_tokens: 77,
        codec_downsample_factor: 8,
        codec_rms_tolerance: 0.05,
        train_timesteps: 1000,
        beta_start: 0.00085,
        beta_end: 0.012,
    }
}

/// Descriptor lookup by backbone name.
pub fn descriptor_for(name: &str) -> Result<BackboneDescriptor> {
    match name {
        "tiny-test" => Ok(tiny_descriptor()),
        "sd15-like" => Ok(sd15_descriptor()),
        other => Err(Error::config(format!(
            "unknown backbone '{other}' (known: tiny-test, sd15-like)"
        ))),
    }
}

/// Instantiate a backbone by name. The sd15-like backbone needs external
/// weights (config `weights_path` or `LASER_WEIGHTS`); only its descriptor
/// ships with this crate.
pub fn create_backbone(name: &str, weights_path: Option<&std::path::Path>) -> Result<Arc<dyn Backbone>> {
    match name {
        "tiny-test" => Ok(Arc::new(TinyBackbone::new())),
        "sd15-like" => {
            let hint = weights_path
                .map(|p| format!(" (configured weights path: {})", p.display()))
                .unwrap_or_else(|| {
                    " (set `weights_path` in the config or the LASER_WEIGHTS environment variable)"
                        .to_string()
                });
            Err(Error::config(format!(
                "backbone 'sd15-like' requires external pretrained weights and a runtime \
                 integration that is not bundled; use 'tiny-test' for self-contained runs{hint}"
            )))
        }
        other => Err(Error::config(format!(
            "unknown backbone '{other}' (known: tiny-test, sd15-like)"
        ))),
    }
}
