use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::field::Field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub rotation_prob: f64,
    /// Exclusive upper bound of the shift in columns; `None` means the width.
    pub rotation_max: Option<usize>,
    pub noise: bool,
    /// Variance of the additive noise in normalized units.
    pub noise_variance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            rotation_prob: 0.5,
            rotation_max: None,
            noise: true,
            noise_variance: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_variance.sqrt()
    }

    pub fn with_noise_std(mut self, std: f64) -> Self {
        self.noise_variance = std * std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rotation_prob) {
            return arg_err(format!("rotation probability {} outside [0, 1]", self.rotation_prob));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return arg_err(format!("noise variance {} must be non-negative", self.noise_variance));
        }
        if self.rotation_max == Some(0) {
            return arg_err("rotation_max must be positive");
        }
        Ok(())
    }

    /// Draws a longitude shift: zero with probability `1 - rotation_prob`,
    /// otherwise uniform in `[0, rotation_max)` rounded down to a multiple
    /// of the patch width. Exactly two draws are consumed per call.
    pub fn draw_shift(&self, width: usize, patch_w: usize, rng: &mut impl Rng) -> usize {
        let coin: f64 = rng.random();
        let max = self.rotation_max.unwrap_or(width).max(1);
        let s = rng.random_range(0..max);
        if !self.rotate || coin >= self.rotation_prob {
            return 0;
        }
        (s / patch_w.max(1)) * patch_w.max(1) % width.max(1)
    }
}

/// Rolls the input window `(T, H, W, C)` and its targets `(H, W, C_dyn)`
/// together along longitude.
pub fn earth_rotation(x: &Field, ys: &[Field], shift: usize) -> (Field, Vec<Field>) {
    let s = shift as isize;
    (x.roll(2, s), ys.iter().map(|y| y.roll(1, s)).collect())
}

/// Adds i.i.d. `N(0, variance)` noise to the first `dyn_channels` channels.
pub fn noise_augment(x: &Field, variance: f64, dyn_channels: usize, rng: &mut impl Rng) -> Result<Field> {
    if variance == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| crate::Error::Argument(e.to_string()))?;
    let c = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if i % c < dyn_channels {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}
