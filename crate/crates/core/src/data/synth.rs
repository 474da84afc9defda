//! Toy atmosphere: Gaussian blobs advected zonally with a latitude-dependent
//! speed and damped by spectral diffusion.
//!
//! Row `j` evolves by a circular convolution along longitude,
//! `x'[k] = sum_m K_j[m] x[(k - m) mod W]`, whose kernel is the inverse real
//! transform of `exp(-2 pi i n v_j / W) exp(-nu n^2)`. Because the kernel
//! never depends on longitude, and the sum runs in the same order at every
//! column, rolling the initial state rolls the whole trajectory bitwise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Splits};
use crate::error::{arg_err, Result};
use crate::field::{ComplexField, Field};
use crate::rng::{stream, Stream};
use crate::spectral::{half_len, irdft};

/// Zonal speed in columns per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedProfile {
    Uniform { speed: f64 },
    /// `base + amplitude * cos^2(lat)`
    Jet { base: f64, amplitude: f64 },
    PerRow { speeds: Vec<f64> },
}

impl SpeedProfile {
    pub fn speeds(&self, lats: &[f64]) -> Vec<f64> {
        match self {
            SpeedProfile::Uniform { speed } => vec![*speed; lats.len()],
            SpeedProfile::Jet { base, amplitude } => lats
                .iter()
                .map(|l| {
                    let c = l.to_radians().cos();
                    base + amplitude * c * c
                })
                .collect(),
            SpeedProfile::PerRow { speeds } => speeds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub dyn_channels: usize,
    pub seed: u64,
    pub speed: SpeedProfile,
    /// Per-channel damping `nu`; a single value applies to every channel.
    pub diffusion: Vec<f64>,
    pub blobs: usize,
    /// Blob standard deviation in grid cells.
    pub blob_width: f64,
    pub step_hours: f64,
    pub static_ridge: bool,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 32,
            steps: 400,
            dyn_channels: 2,
            seed: 7,
            speed: SpeedProfile::Jet {
                base: 0.75,
                amplitude: 0.5,
            },
            diffusion: vec![5e-5, 2e-4],
            blobs: 8,
            blob_width: 2.5,
            step_hours: 6.0,
            static_ridge: true,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height * self.width < 4 {
            return arg_err(format!("grid {}x{} must hold at least 4 points", self.height, self.width));
        }
        if self.steps < 3 {
            return arg_err(format!("{} steps is too short to form a window", self.steps));
        }
        if self.dyn_channels == 0 {
            return arg_err("at least one dynamic channel is required");
        }
        if self.blobs == 0 || !(self.blob_width > 0.0) {
            return arg_err("initial conditions need at least one blob of positive width");
        }
        if self.diffusion.len() != 1 && self.diffusion.len() != self.dyn_channels {
            return arg_err(format!(
                "{} diffusion values for {} channels",
                self.diffusion.len(),
                self.dyn_channels
            ));
        }
        if self.diffusion.iter().any(|&n| !(n >= 0.0) || !n.is_finite()) {
            return arg_err("diffusion must be finite and non-negative");
        }
        let v = self.speed.speeds(&latitudes(self.height));
        if v.len() != self.height || v.iter().any(|s| !s.is_finite()) {
            return arg_err(format!("speed profile must give {} finite speeds", self.height));
        }
        Splits::fractions(self.steps, self.train_frac, self.val_frac)?;
        Ok(())
    }

    pub fn nu(&self, channel: usize) -> f64 {
        if self.diffusion.len() == 1 {
            self.diffusion[0]
        } else {
            self.diffusion[channel]
        }
    }
}

/// Cell-centre latitudes, south to north, poles excluded.
pub fn latitudes(h: usize) -> Vec<f64> {
    (0..h).map(|j| -90.0 + (j as f64 + 0.5) * 180.0 / h as f64).collect()
}

/// Latitude-only static field.
pub fn ridge(lat: f64) -> f64 {
    let z = (lat - 20.0) / 25.0;
    (-z * z).exp()
}

/// Longitude kernel of one step for speed `v` and damping `nu`.
pub fn row_kernel(w: usize, v: f64, nu: f64) -> Vec<f64> {
    let whole = v.floor();
    let frac = v - whole;
    let n = (whole as i64).rem_euclid(w as i64) as usize;
    let base = if frac == 0.0 && nu == 0.0 {
        let mut k = vec![0.0; w];
        k[0] = 1.0;
        k
    } else {
        let bins = half_len(w);
        let mut spec = ComplexField::zeros(&[bins]);
        for k in 0..bins {
            let kf = k as f64;
            let phase = -2.0 * std::f64::consts::PI * kf * frac / w as f64;
            let damp = (-nu * kf * kf).exp();
            spec.put(k, num_complex::Complex64::from_polar(damp, phase));
        }
        irdft(&spec, &[0], &[w]).expect("1-D kernel").into_data()
    };
    (0..w).map(|m| base[(m + w - n) % w]).collect()
}

/// Seeded Gaussian-blob initial state `(H, W, C_dyn)`.
pub fn initial_state(cfg: &GenConfig) -> Result<Field> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.dyn_channels);
    let mut rng = stream(cfg.seed, Stream::Data);
    let mut out = Field::zeros(&[h, w, c]);
    for ch in 0..c {
        for _ in 0..cfg.blobs {
            let amp: f64 = rng.sample(StandardNormal);
            let ci = rng.random_range(0.0..h as f64);
            let cj = rng.random_range(0.0..w as f64);
            let sigma = cfg.blob_width * rng.random_range(0.6..1.4);
            for i in 0..h {
                for j in 0..w {
                    let di = i as f64 - ci;
                    let dj = (j as f64 - cj + 1.5 * w as f64).rem_euclid(w as f64) - 0.5 * w as f64;
                    let v = amp * (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                    let at = (i * w + j) * c + ch;
                    out.data_mut()[at] += v;
                }
            }
        }
    }
    Ok(out)
}

/// Double-precision trajectory `(steps, H, W, C_dyn)` from `initial`.
pub fn simulate(cfg: &GenConfig, initial: &Field) -> Result<Field> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.dyn_channels);
    if initial.shape() != [h, w, c] {
        return arg_err(format!("initial state {:?}, expected {:?}", initial.shape(), [h, w, c]));
    }
    let speeds = cfg.speed.speeds(&latitudes(h));
    let kernels: Vec<Vec<f64>> = (0..h)
        .flat_map(|j| (0..c).map(move |ch| (j, ch)))
        .map(|(j, ch)| row_kernel(w, speeds[j], cfg.nu(ch)))
        .collect();
    let plane = h * w * c;
    let mut data = Vec::with_capacity(cfg.steps * plane);
    data.extend_from_slice(initial.data());
    for t in 1..cfg.steps {
        let prev = (t - 1) * plane;
        for j in 0..h {
            for k in 0..w {
                for ch in 0..c {
                    let kern = &kernels[j * c + ch];
                    let mut s = 0.0;
                    for (m, &km) in kern.iter().enumerate() {
                        let src = (k + w - m) % w;
                        s += km * data[prev + (j * w + src) * c + ch];
                    }
                    data.push(s);
                }
            }
        }
    }
    Field::new(vec![cfg.steps, h, w, c], data)
}

/// Full bundle: dynamic trajectory plus the optional static ridge channel.
pub fn generate(cfg: &GenConfig) -> Result<DatasetBundle> {
    let traj = simulate(cfg, &initial_state(cfg)?)?;
    let (n, h, w, cd) = (cfg.steps, cfg.height, cfg.width, cfg.dyn_channels);
    let lats = latitudes(h);
    let cs = usize::from(cfg.static_ridge);
    let c = cd + cs;
    let mut data = Vec::with_capacity(n * h * w * c);
    for px in traj.data().chunks_exact(cd).enumerate() {
        data.extend_from_slice(px.1);
        if cfg.static_ridge {
            let row = (px.0 / w) % h;
            data.push(ridge(lats[row]));
        }
    }
    let mut channels: Vec<(String, bool)> = (0..cd).map(|i| (format!("field{i}"), false)).collect();
    if cfg.static_ridge {
        channels.push(("ridge".into(), true));
    }
    let splits = Splits::fractions(n, cfg.train_frac, cfg.val_frac)?;
    DatasetBundle::new(Field::new(vec![n, h, w, c], data)?, lats, channels, cfg.step_hours, splits)
}
