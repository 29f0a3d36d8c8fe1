//! Run configuration: reference defaults, file loading, validation.
//!
//! Defaults mirror the reference inference settings: 50 steps, guidance
//! scale 7.5, FAI on the first 25 sampling steps over every decoder layer
//! with feature injection on layer 4, KVAI/DAI on steps 6-50 over decoder
//! layers 3-8, w = 0.8, 12 frames per stage. Injection windows left unset
//! scale with a non-default step count (first half for FAI, after the first
//! tenth for KVAI/DAI).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneDescriptor;
use crate::error::{Error, Result};
use crate::injection::{InjectionSchedule, Strategy};
use crate::trace::sha256_hex;

/// Inclusive 1-based range of sampling-step ordinals or decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    fn to_set(self) -> std::collections::BTreeSet<usize> {
        (self.start..=self.end).collect()
    }
}

fn default_backbone() -> String {
    "sd15-like".to_string()
}
fn default_steps() -> usize {
    50
}
fn default_cfg_scale() -> f32 {
    7.5
}
fn default_feature_layer() -> usize {
    4
}
fn default_kv_layers() -> Span {
    Span::new(3, 8)
}
fn default_w() -> f32 {
    0.8
}
fn default_n_f() -> usize {
    12
}
fn default_llm_backend() -> String {
    "mock".to_string()
}
fn default_llm_timeout_secs() -> u64 {
    60
}
fn default_llm_max_retries() -> usize {
    2
}
fn default_gif_fps() -> u32 {
    8
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f32,
    /// FAI sampling-step window; `None` derives the first half of the grid.
    #[serde(default)]
    pub fai_window: Option<Span>,
    /// KVAI/DAI sampling-step window; `None` derives "after the first tenth".
    #[serde(default)]
    pub kv_window: Option<Span>,
    #[serde(default = "default_kv_layers")]
    pub kv_layers: Span,
    #[serde(default = "default_feature_layer")]
    pub feature_layer: usize,
    /// DAI decay scale; `beta = w * alpha`.
    #[serde(default = "default_w")]
    pub w: f32,
    #[serde(default = "default_n_f")]
    pub n_f: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_llm_backend")]
    pub llm_backend: String,
    #[serde(default)]
    pub llm_model: Option<String>,
    #[serde(default = "default_llm_timeout_secs")]
    pub llm_timeout_secs: u64,
    #[serde(default = "default_llm_max_retries")]
    pub llm_max_retries: usize,
    /// Replace alpha with `beta = w * alpha` in DAI text-embedding
    /// interpolation.
    #[serde(default)]
    pub use_beta_embedding: bool,
    #[serde(default = "default_gif_fps")]
    pub gif_fps: u32,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub trace_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes via defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    /// Effective FAI window: configured, or the first half of the grid.
    pub fn effective_fai_window(&self) -> Span {
        self.fai_window
            .unwrap_or_else(|| Span::new(1, (self.steps / 2).max(1)))
    }

    /// Effective KVAI/DAI window: configured, or after the first tenth.
    pub fn effective_kv_window(&self) -> Span {
        self.kv_window
            .unwrap_or_else(|| Span::new((self.steps / 10) + 1, self.steps))
    }

    pub fn fai_schedule(&self, descriptor: &BackboneDescriptor) -> InjectionSchedule {
        InjectionSchedule {
            active_steps: self.effective_fai_window().to_set(),
            decoder_layers: (1..=descriptor.num_decoder_layers).collect(),
            feature_layer: self.feature_layer,
        }
    }

    pub fn kv_schedule(&self) -> InjectionSchedule {
        InjectionSchedule {
            active_steps: self.effective_kv_window().to_set(),
            decoder_layers: self.kv_layers.to_set(),
            feature_layer: self.feature_layer,
        }
    }

    pub fn schedule_for(
        &self,
        strategy: Strategy,
        descriptor: &BackboneDescriptor,
    ) -> InjectionSchedule {
        match strategy {
            Strategy::Fai => self.fai_schedule(descriptor),
            _ => self.kv_schedule(),
        }
    }

    pub fn validate(&self, descriptor: &BackboneDescriptor) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::config("cfg_scale must be finite and >= 0"));
        }
        if self.n_f < 2 {
            return Err(Error::config("n_f must be at least 2"));
        }
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::config(format!("w = {} must lie in (0, 1)", self.w)));
        }
        for (name, window) in [
            ("fai_window", self.effective_fai_window()),
            ("kv_window", self.effective_kv_window()),
        ] {
            if window.start < 1 || window.end > self.steps || window.start > window.end {
                return Err(Error::config(format!(
                    "{name} {}..={} outside [1, {}]",
                    window.start, window.end, self.steps
                )));
            }
        }
        self.fai_schedule(descriptor)
            .validate(self.steps, descriptor)?;
        self.kv_schedule().validate(self.steps, descriptor)?;
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Stable hash of the effective configuration.
    pub fn sha256(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}
