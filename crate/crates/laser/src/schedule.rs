//! Noise schedule (ᾱ table) and the inference timestep grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel level for the clean latent, where ᾱ is exactly 1.
pub const CLEAN_LEVEL: i64 = -1;

/// Per-timestep cumulative ᾱ values for a scaled-linear beta schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    train_timesteps: usize,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn scaled_linear(train_timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alphas_cumprod = Vec::with_capacity(train_timesteps);
        let mut acc = 1.0f64;
        for t in 0..train_timesteps {
            let frac = if train_timesteps > 1 {
                t as f64 / (train_timesteps - 1) as f64
            } else {
                0.0
            };
            let beta_sqrt = beta_start.sqrt() + frac * (beta_end.sqrt() - beta_start.sqrt());
            let beta = beta_sqrt * beta_sqrt;
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        NoiseSchedule {
            train_timesteps,
            alphas_cumprod,
        }
    }

    pub fn train_timesteps(&self) -> usize {
        self.train_timesteps
    }

    /// Largest valid timestep value.
    pub fn max_timestep(&self) -> i64 {
        self.train_timesteps as i64 - 1
    }

    /// ᾱ at a timestep; the clean level reports exactly 1.
    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        if t == CLEAN_LEVEL {
            return Ok(1.0);
        }
        if t < 0 || t >= self.train_timesteps as i64 {
            return Err(Error::config(format!(
                "timestep {t} outside schedule range [0, {})",
                self.train_timesteps
            )));
        }
        Ok(self.alphas_cumprod[t as usize])
    }

    /// Time-step decay weight t/T used by the endpoint blends, where T is
    /// the schedule's maximum timestep value.
    pub fn decay_weight(&self, t: i64) -> f32 {
        if t <= 0 {
            return 0.0;
        }
        (t as f64 / self.max_timestep() as f64) as f32
    }
}

/// Inference grid: the sampling order is descending and the inversion order
/// is its exact reverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    num_steps: usize,
    /// Descending timesteps, as visited by sampling.
    timesteps: Vec<i64>,
}

impl TimestepGrid {
    pub fn new(schedule: &NoiseSchedule, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::config("timestep grid needs at least one step"));
        }
        if num_steps > schedule.train_timesteps() {
            return Err(Error::config(format!(
                "requested {num_steps} steps but the schedule has only {} train timesteps",
                schedule.train_timesteps()
            )));
        }
        let ratio = schedule.train_timesteps() / num_steps;
        let timesteps: Vec<i64> = (0..num_steps)
            .map(|s| (s * ratio) as i64 + 1)
            .rev()
            .collect();
        if timesteps[0] > schedule.max_timestep() {
            return Err(Error::config(format!(
                "grid endpoint {} outside schedule range",
                timesteps[0]
            )));
        }
        Ok(TimestepGrid {
            num_steps,
            timesteps,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Descending timesteps visited by sampling.
    pub fn sampling_timesteps(&self) -> &[i64] {
        &self.timesteps
    }

    /// Ascending timesteps visited by inversion.
    pub fn inversion_timesteps(&self) -> Vec<i64> {
        self.timesteps.iter().rev().copied().collect()
    }

    /// `(from, to)` level pairs for sampling, ending at the clean level.
    pub fn sampling_pairs(&self) -> Vec<(i64, i64)> {
        let mut pairs = Vec::with_capacity(self.num_steps);
        for w in self.timesteps.windows(2) {
            pairs.push((w[0], w[1]));
        }
        pairs.push((self.timesteps[self.num_steps - 1], CLEAN_LEVEL));
        pairs
    }

    /// `(from, to)` level pairs for inversion: the sampling pairs reversed
    /// with the direction flipped.
    pub fn inversion_pairs(&self) -> Vec<(i64, i64)> {
        self.sampling_pairs()
            .into_iter()
            .rev()
            .map(|(a, b)| (b, a))
            .collect()
    }

    pub fn contains(&self, timestep: i64) -> bool {
        self.timesteps.contains(&timestep)
    }

    /// 1-based sampling-step ordinal of a grid timestep (ordinal 1 is the
    /// noisiest step).
    pub fn ordinal_of(&self, timestep: i64) -> Option<usize> {
        self.timesteps.iter().position(|t| *t == timestep).map(|p| p + 1)
    }

    /// Grid timestep at a 1-based sampling ordinal.
    pub fn timestep_at_ordinal(&self, ordinal: usize) -> Option<i64> {
        if ordinal == 0 {
            return None;
        }
        self.timesteps.get(ordinal - 1).copied()
    }
}
