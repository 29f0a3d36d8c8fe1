//! Injection strategies over activation traces.
//!
//! Three strategies turn a sealed inversion trace (plus, for the endpoint
//! blends, the traces captured from a stage's first and last frames) into
//! per-timestep site transforms:
//!
//! * FAI replaces residual features and self-attention q/k from the source
//!   trace and blends v across the stage endpoints; suited to texture
//!   transformations.
//! * KVAI replaces self-attention k/v from the source trace, blends k across
//!   the endpoints, never touches queries, and enables cross-frame
//!   attention; suited to non-rigid transformations.
//! * DAI convexly blends source and current k/v with weight `beta = w * alpha`
//!   so source influence decays along the animation; suited to hybrid
//!   transformations.
//!
//! Both endpoint blends share the same algebra:
//! `(1 - gamma) * ((1 - alpha) * first + alpha * last) + gamma * current`,
//! where `gamma` is the time-step decay weight `t / T`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneDescriptor, HookSite, SiteSlot};
use crate::error::{Error, Result};
use crate::schedule::TimestepGrid;
use crate::trace::{ActivationTrace, TraceOrigin};

pub use crate::attention::cross_frame_attention;

/// Strategy selected for one stage transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "FAI")]
    Fai,
    #[serde(rename = "KVAI")]
    Kvai,
    #[serde(rename = "DAI")]
    Dai,
    /// Plain DDIM with no injections; the ablation baseline.
    #[serde(rename = "None")]
    None,
}

impl Strategy {
    pub fn uses_cross_frame(&self) -> bool {
        matches!(self, Strategy::Kvai | Strategy::Dai)
    }

    /// Strategies needing endpoint traces for their interior-frame blends.
    pub fn needs_endpoint_traces(&self) -> bool {
        matches!(self, Strategy::Fai | Strategy::Kvai)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Fai => "FAI",
            Strategy::Kvai => "KVAI",
            Strategy::Dai => "DAI",
            Strategy::None => "None",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FAI" => Ok(Strategy::Fai),
            "KVAI" => Ok(Strategy::Kvai),
            "DAI" => Ok(Strategy::Dai),
            "NONE" => Ok(Strategy::None),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Which sampling-step ordinals and decoder layers a strategy touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    /// 1-based sampling-step ordinals (ordinal 1 is the noisiest step).
    pub active_steps: BTreeSet<usize>,
    pub decoder_layers: BTreeSet<usize>,
    /// Residual-feature layer; used by FAI only.
    pub feature_layer: usize,
}

impl InjectionSchedule {
    /// FAI default: the first half of the sampling steps on every decoder
    /// layer, feature injection on layer 4. At 50 steps this is steps 1-25.
    pub fn fai_default(num_steps: usize, num_decoder_layers: usize) -> Self {
        InjectionSchedule {
            active_steps: (1..=(num_steps / 2).max(1)).collect(),
            decoder_layers: (1..=num_decoder_layers).collect(),
            feature_layer: 4,
        }
    }

    /// KVAI/DAI default: after the first tenth of the sampling steps, on
    /// decoder layers 3-8. At 50 steps this is steps 6-50.
    pub fn kv_default(num_steps: usize) -> Self {
        InjectionSchedule {
            active_steps: ((num_steps / 10) + 1..=num_steps).collect(),
            decoder_layers: (3..=8).collect(),
            feature_layer: 4,
        }
    }

    pub fn validate(&self, num_steps: usize, descriptor: &BackboneDescriptor) -> Result<()> {
        if let Some(bad) = self
            .active_steps
            .iter()
            .find(|s| **s == 0 || **s > num_steps)
        {
            return Err(Error::config(format!(
                "injection step {bad} outside [1, {num_steps}]"
            )));
        }
        if let Some(bad) = self
            .decoder_layers
            .iter()
            .find(|l| **l == 0 || **l > descriptor.num_decoder_layers)
        {
            return Err(Error::config(format!(
                "injection layer {bad} outside [1, {}]",
                descriptor.num_decoder_layers
            )));
        }
        if self.feature_layer == 0 || self.feature_layer > descriptor.num_decoder_layers {
            return Err(Error::config(format!(
                "feature layer {} outside [1, {}]",
                self.feature_layer, descriptor.num_decoder_layers
            )));
        }
        Ok(())
    }
}

/// Per-frame blend weights. `alpha` is the frame position on the stage's
/// interpolation grid; `w` scales DAI's decay; `beta = w * alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights {
    pub alpha: f32,
    pub w: f32,
}

impl BlendWeights {
    pub fn new(alpha: f32, w: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(BlendWeights { alpha, w })
    }

    pub fn beta(&self) -> f32 {
        self.w * self.alpha
    }
}

fn check_same_shape(context: &str, arrays: &[&ArrayD<f32>]) -> Result<()> {
    let first = arrays[0].shape();
    for a in &arrays[1..] {
        if a.shape() != first {
            return Err(Error::shape(
                context,
                format!("{first:?}"),
                format!("{:?}", a.shape()),
            ));
        }
    }
    Ok(())
}

/// Two-step endpoint interpolation of a value component:
/// `(1 - gamma) * ((1 - alpha) * first + alpha * last) + gamma * current`.
pub fn blend_value(
    v_first: &ArrayD<f32>,
    v_last: &ArrayD<f32>,
    v_current: &ArrayD<f32>,
    alpha: f32,
    gamma: f32,
) -> Result<ArrayD<f32>> {
    check_same_shape("blend_value", &[v_first, v_last, v_current])?;
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!(
            "blend weights alpha={alpha}, gamma={gamma} outside [0, 1]"
        )));
    }
    let endpoint = v_first * (1.0 - alpha) + v_last * alpha;
    Ok(endpoint * (1.0 - gamma) + v_current * gamma)
}

/// Endpoint interpolation of the key component; same algebra as
/// [`blend_value`].
pub fn blend_key(
    k_first: &ArrayD<f32>,
    k_last: &ArrayD<f32>,
    k_current: &ArrayD<f32>,
    alpha: f32,
    gamma: f32,
) -> Result<ArrayD<f32>> {
    blend_value(k_first, k_last, k_current, alpha, gamma)
}

/// Decremental blend `(1 - beta) * source + beta * current`.
pub fn decremental_blend(
    x_source: &ArrayD<f32>,
    x_current: &ArrayD<f32>,
    beta: f32,
) -> Result<ArrayD<f32>> {
    check_same_shape("decremental_blend", &[x_source, x_current])?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0, 1]")));
    }
    Ok(x_source * (1.0 - beta) + x_current * beta)
}

/// Transform applied at one hooked site.
#[derive(Clone)]
pub enum SiteTransform {
    /// Replace the value with the trace entry at the same timestep and site.
    Replace { trace: Arc<ActivationTrace> },
    /// FAI value blend between the endpoint traces and the freshly computed
    /// value, decayed by `gamma`.
    EndpointValueBlend {
        first: Arc<ActivationTrace>,
        last: Arc<ActivationTrace>,
        alpha: f32,
    },
    /// KVAI key path: the inversion-trace key stands in as the current
    /// operand of the endpoint blend.
    EndpointKeyBlend {
        source: Arc<ActivationTrace>,
        first: Arc<ActivationTrace>,
        last: Arc<ActivationTrace>,
        alpha: f32,
    },
    /// DAI blend between the inversion trace and the freshly computed value.
    Decremental {
        source: Arc<ActivationTrace>,
        beta: f32,
    },
}

impl fmt::Debug for SiteTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteTransform::Replace { .. } => write!(f, "Replace"),
            SiteTransform::EndpointValueBlend { alpha, .. } => {
                write!(f, "EndpointValueBlend(alpha={alpha})")
            }
            SiteTransform::EndpointKeyBlend { alpha, .. } => {
                write!(f, "EndpointKeyBlend(alpha={alpha})")
            }
            SiteTransform::Decremental { beta, .. } => write!(f, "Decremental(beta={beta})"),
        }
    }
}

fn trace_value<'t>(
    trace: &'t ActivationTrace,
    timestep: i64,
    site: HookSite,
) -> Result<&'t ArrayD<f32>> {
    trace.value(timestep, site).ok_or_else(|| {
        Error::config(format!(
            "trace '{}' has no entry for timestep {timestep}, site {site}",
            trace.source_id()
        ))
    })
}

impl SiteTransform {
    /// Apply the transform to the freshly computed `current` value.
    /// `gamma` is the time-step decay weight of the call's timestep.
    pub fn apply(
        &self,
        timestep: i64,
        site: HookSite,
        gamma: f32,
        current: &ArrayD<f32>,
    ) -> Result<ArrayD<f32>> {
        match self {
            SiteTransform::Replace { trace } => {
                Ok(trace_value(trace, timestep, site)?.clone())
            }
            SiteTransform::EndpointValueBlend { first, last, alpha } => blend_value(
                trace_value(first, timestep, site)?,
                trace_value(last, timestep, site)?,
                current,
                *alpha,
                gamma,
            ),
            SiteTransform::EndpointKeyBlend {
                source,
                first,
                last,
                alpha,
            } => blend_key(
                trace_value(first, timestep, site)?,
                trace_value(last, timestep, site)?,
                trace_value(source, timestep, site)?,
                *alpha,
                gamma,
            ),
            SiteTransform::Decremental { source, beta } => {
                decremental_blend(trace_value(source, timestep, site)?, current, *beta)
            }
        }
    }
}

/// All transforms of one frame's sampling run, keyed by
/// `(timestep, site)`, plus the attention batching mode.
#[derive(Debug, Clone, Default)]
pub struct FrameHooks {
    pub transforms: BTreeMap<(i64, HookSite), SiteTransform>,
    pub cross_frame: bool,
}

impl FrameHooks {
    pub fn none() -> Self {
        FrameHooks::default()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

fn active_timesteps(schedule: &InjectionSchedule, grid: &TimestepGrid) -> Result<Vec<i64>> {
    schedule
        .active_steps
        .iter()
        .map(|ordinal| {
            grid.timestep_at_ordinal(*ordinal).ok_or_else(|| {
                Error::config(format!(
                    "injection step {ordinal} outside the {}-step grid",
                    grid.num_steps()
                ))
            })
        })
        .collect()
}

fn require_inversion(trace: &ActivationTrace) -> Result<()> {
    if trace.origin() != TraceOrigin::Inversion {
        return Err(Error::config(format!(
            "source trace '{}' has origin {:?}, expected an inversion trace",
            trace.source_id(),
            trace.origin()
        )));
    }
    Ok(())
}

fn require_endpoints<'a>(
    endpoints: Option<(&'a Arc<ActivationTrace>, &'a Arc<ActivationTrace>)>,
    alpha: f32,
) -> Result<Option<(&'a Arc<ActivationTrace>, &'a Arc<ActivationTrace>)>> {
    match endpoints {
        Some(pair) => Ok(Some(pair)),
        None if alpha > 0.0 && alpha < 1.0 => Err(Error::config(format!(
            "interior frame (alpha={alpha}) needs endpoint traces for its blend"
        ))),
        None => Ok(None),
    }
}

/// FAI hooks: on each active step, replace the residual feature at the
/// schedule's feature layer and self-attention q/k on the schedule's layers
/// from the inversion trace, and blend v across the endpoint traces.
/// Endpoint frames (`alpha` exactly 0 or 1, no endpoint traces yet) skip the
/// v blend.
pub fn fai_hooks(
    inversion: &Arc<ActivationTrace>,
    endpoints: Option<(&Arc<ActivationTrace>, &Arc<ActivationTrace>)>,
    weights: &BlendWeights,
    schedule: &InjectionSchedule,
    grid: &TimestepGrid,
) -> Result<FrameHooks> {
    require_inversion(inversion)?;
    let endpoints = require_endpoints(endpoints, weights.alpha)?;
    let mut transforms = BTreeMap::new();
    for t in active_timesteps(schedule, grid)? {
        transforms.insert(
            (t, HookSite::feature(schedule.feature_layer)),
            SiteTransform::Replace {
                trace: Arc::clone(inversion),
            },
        );
        for layer in &schedule.decoder_layers {
            for slot in [SiteSlot::Q, SiteSlot::K] {
                transforms.insert(
                    (t, HookSite::attention(*layer, slot)),
                    SiteTransform::Replace {
                        trace: Arc::clone(inversion),
                    },
                );
            }
            if let Some((first, last)) = endpoints {
                transforms.insert(
                    (t, HookSite::attention(*layer, SiteSlot::V)),
                    SiteTransform::EndpointValueBlend {
                        first: Arc::clone(first),
                        last: Arc::clone(last),
                        alpha: weights.alpha,
                    },
                );
            }
        }
    }
    Ok(FrameHooks {
        transforms,
        cross_frame: false,
    })
}

/// KVAI hooks: on each active step and scheduled layer, replace k and v from
/// the inversion trace, additionally blending k across the endpoint traces.
/// Queries are never replaced; cross-frame attention is enabled.
pub fn kvai_hooks(
    inversion: &Arc<ActivationTrace>,
    endpoints: Option<(&Arc<ActivationTrace>, &Arc<ActivationTrace>)>,
    weights: &BlendWeights,
    schedule: &InjectionSchedule,
    grid: &TimestepGrid,
) -> Result<FrameHooks> {
    require_inversion(inversion)?;
    let endpoints = require_endpoints(endpoints, weights.alpha)?;
    let mut transforms = BTreeMap::new();
    for t in active_timesteps(schedule, grid)? {
        for layer in &schedule.decoder_layers {
            let k_transform = match endpoints {
                Some((first, last)) => SiteTransform::EndpointKeyBlend {
                    source: Arc::clone(inversion),
                    first: Arc::clone(first),
                    last: Arc::clone(last),
                    alpha: weights.alpha,
                },
                None => SiteTransform::Replace {
                    trace: Arc::clone(inversion),
                },
            };
            transforms.insert((t, HookSite::attention(*layer, SiteSlot::K)), k_transform);
            transforms.insert(
                (t, HookSite::attention(*layer, SiteSlot::V)),
                SiteTransform::Replace {
                    trace: Arc::clone(inversion),
                },
            );
        }
    }
    Ok(FrameHooks {
        transforms,
        cross_frame: true,
    })
}

/// DAI hooks: on each active step and scheduled layer, form k and v as
/// `(1 - beta) * source + beta * current` with `beta = w * alpha`.
/// Cross-frame attention is enabled; no endpoint traces are needed.
pub fn dai_hooks(
    inversion: &Arc<ActivationTrace>,
    weights: &BlendWeights,
    schedule: &InjectionSchedule,
    grid: &TimestepGrid,
) -> Result<FrameHooks> {
    require_inversion(inversion)?;
    if !(weights.w > 0.0 && weights.w < 1.0) {
        return Err(Error::config(format!(
            "DAI weight w={} outside (0, 1)",
            weights.w
        )));
    }
    let beta = weights.beta();
    let mut transforms = BTreeMap::new();
    for t in active_timesteps(schedule, grid)? {
        for layer in &schedule.decoder_layers {
            for slot in [SiteSlot::K, SiteSlot::V] {
                transforms.insert(
                    (t, HookSite::attention(*layer, slot)),
                    SiteTransform::Decremental {
                        source: Arc::clone(inversion),
                        beta,
                    },
                );
            }
        }
    }
    Ok(FrameHooks {
        transforms,
        cross_frame: true,
    })
}

/// Sites a strategy needs captured during inversion.
pub fn inversion_capture_sites(
    strategy: Strategy,
    schedule: &InjectionSchedule,
) -> BTreeSet<HookSite> {
    let mut sites = BTreeSet::new();
    match strategy {
        Strategy::Fai => {
            sites.insert(HookSite::feature(schedule.feature_layer));
            for layer in &schedule.decoder_layers {
                sites.insert(HookSite::attention(*layer, SiteSlot::Q));
                sites.insert(HookSite::attention(*layer, SiteSlot::K));
            }
        }
        Strategy::Kvai | Strategy::Dai => {
            for layer in &schedule.decoder_layers {
                sites.insert(HookSite::attention(*layer, SiteSlot::K));
                sites.insert(HookSite::attention(*layer, SiteSlot::V));
            }
        }
        Strategy::None => {}
    }
    sites
}

/// Sites a strategy needs captured while generating its endpoint frames.
pub fn endpoint_capture_sites(
    strategy: Strategy,
    schedule: &InjectionSchedule,
) -> BTreeSet<HookSite> {
    let mut sites = BTreeSet::new();
    match strategy {
        Strategy::Fai => {
            for layer in &schedule.decoder_layers {
                sites.insert(HookSite::attention(*layer, SiteSlot::V));
            }
        }
        Strategy::Kvai => {
            for layer in &schedule.decoder_layers {
                sites.insert(HookSite::attention(*layer, SiteSlot::K));
            }
        }
        Strategy::Dai | Strategy::None => {}
    }
    sites
}
