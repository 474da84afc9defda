//! Frequency-domain token mixing: FNO, AFNO and the position-aware AFNO.
//!
//! Every mixer transforms tokens over the grid axes, filters each retained
//! frequency bin and transforms back:
//!
//! * `Fno`:   `z_n -> W_n z_n` with an independent complex matrix per bin;
//! * `Afno`:  `z_n -> MLP(z_n)` with one shared block-diagonal complex MLP;
//! * `Pafno`: `z_n -> lambda_n * MLP(z_n)` where `lambda_n` is a learnable real
//!   coefficient per retained bin.
//!
//! `MLP(z) = W2 sigma(W1 z + b1) + b2`; `sigma` acts on real and imaginary
//! parts independently. With an identity `sigma` and zero biases the PAFNO
//! filter is linear, and the whole mixer is a per-channel circular
//! convolution with the kernel returned by [`effective_kernel`].

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{arg_err, shape_err, Result};
use crate::field::{for_each_index, ComplexField, Field};
use crate::spectral::{half_spectrum_shape, irdft};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerMode {
    Afno,
    Pafno,
    Fno,
}

impl std::str::FromStr for MixerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "afno" => Ok(Self::Afno),
            "pafno" => Ok(Self::Pafno),
            "fno" => Ok(Self::Fno),
            other => Err(format!("unknown mixer mode {other:?} (afno|pafno|fno)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    ReluSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerDomain {
    /// Two-dimensional mixing over the `(h, w)` token grid.
    Spatial,
    /// One-dimensional mixing over the temporal token axis.
    Temporal,
}

impl MixerDomain {
    pub fn grid_rank(self) -> usize {
        match self {
            MixerDomain::Spatial => 2,
            MixerDomain::Temporal => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub domain: MixerDomain,
    pub embed_dim: usize,
    pub blocks: usize,
    pub mode: MixerMode,
    pub nonlinearity: Nonlinearity,
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return arg_err("embedding dimension must be positive");
        }
        if self.blocks == 0 || self.embed_dim % self.blocks != 0 {
            return arg_err(format!(
                "embedding dimension {} is not divisible into {} blocks",
                self.embed_dim, self.blocks
            ));
        }
        Ok(())
    }
}

/// Retained half-spectrum bin grid for token grid extents.
pub fn bin_shape(grid: &[usize]) -> Vec<usize> {
    let axes: Vec<usize> = (0..grid.len()).collect();
    half_spectrum_shape(grid, &axes).expect("grid has at least one axis")
}

pub fn bin_count(grid: &[usize]) -> usize {
    bin_shape(grid).iter().product()
}

/// The shared two-layer complex MLP, block diagonal with `blocks` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMlp {
    /// `(k, D/k, D/k, 2)`
    pub w1: Field,
    /// `(D, 2)`
    pub b1: Field,
    pub w2: Field,
    pub b2: Field,
}

impl ComplexMlp {
    pub fn identity(embed_dim: usize, blocks: usize) -> Self {
        let m = embed_dim / blocks;
        let eye = Field::from_fn(&[blocks, m, m, 2], |i| {
            if i[1] == i[2] && i[3] == 0 {
                1.0
            } else {
                0.0
            }
        });
        Self {
            w1: eye.clone(),
            b1: Field::zeros(&[embed_dim, 2]),
            w2: eye,
            b2: Field::zeros(&[embed_dim, 2]),
        }
    }

    pub fn random(embed_dim: usize, blocks: usize, std: f64, rng: &mut impl Rng) -> Self {
        let m = embed_dim / blocks;
        let mut w = || Field::from_fn(&[blocks, m, m, 2], |_| std * rng.sample::<f64, _>(StandardNormal));
        let (w1, w2) = (w(), w());
        Self {
            w1,
            b1: Field::zeros(&[embed_dim, 2]),
            w2,
            b2: Field::zeros(&[embed_dim, 2]),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Learnable state of one Fourier mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilter {
    pub mode: MixerMode,
    pub nonlinearity: Nonlinearity,
    pub blocks: usize,
    /// Shared MLP (AFNO and PAFNO).
    pub mlp: Option<ComplexMlp>,
    /// One real coefficient per retained bin, shaped like the bin grid (PAFNO).
    pub lambda: Option<Field>,
    /// `(bins, D, D, 2)` complex matrices (FNO).
    pub per_freq: Option<Field>,
}

impl SpectralFilter {
    /// The filter that leaves tokens unchanged: identity MLP, unit `lambda`,
    /// identity per-bin matrices.
    pub fn identity(cfg: &MixerConfig, grid: &[usize]) -> Result<Self> {
        cfg.validate()?;
        check_grid(cfg, grid)?;
        let d = cfg.embed_dim;
        let bins = bin_shape(grid);
        let mut f = Self {
            mode: cfg.mode,
            nonlinearity: cfg.nonlinearity,
            blocks: cfg.blocks,
            mlp: None,
            lambda: None,
            per_freq: None,
        };
        match cfg.mode {
            MixerMode::Afno => f.mlp = Some(ComplexMlp::identity(d, cfg.blocks)),
            MixerMode::Pafno => {
                f.mlp = Some(ComplexMlp::identity(d, cfg.blocks));
                f.lambda = Some(Field::full(&bins, 1.0));
            }
            MixerMode::Fno => {
                let nb: usize = bins.iter().product();
                f.per_freq = Some(Field::from_fn(&[nb, d, d, 2], |i| {
                    if i[1] == i[2] && i[3] == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
        }
        Ok(f)
    }

    /// Training initialization: small complex Gaussian weights, zero biases
    /// and `lambda = 1`, so a fresh PAFNO filter equals the AFNO filter
    /// drawn from the same stream.
    pub fn init(cfg: &MixerConfig, grid: &[usize], std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut f = Self::identity(cfg, grid)?;
        match cfg.mode {
            MixerMode::Afno | MixerMode::Pafno => {
                f.mlp = Some(ComplexMlp::random(cfg.embed_dim, cfg.blocks, std, rng));
            }
            MixerMode::Fno => {
                let w = f.per_freq.as_mut().unwrap();
                for v in w.data_mut() {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(f)
    }

    /// Exact learnable scalar count (complex entries count twice).
    pub fn param_count(&self) -> usize {
        self.mlp.as_ref().map_or(0, ComplexMlp::scalar_count)
            + self.lambda.as_ref().map_or(0, Field::len)
            + self.per_freq.as_ref().map_or(0, Field::len)
    }
}

/// Closed-form scalar count of a mixer over `grid`.
pub fn param_count_for(cfg: &MixerConfig, grid: &[usize]) -> usize {
    let d = cfg.embed_dim;
    let mlp = 2 * (2 * d * d / cfg.blocks + 2 * d);
    match cfg.mode {
        MixerMode::Afno => mlp,
        MixerMode::Pafno => mlp + bin_count(grid),
        MixerMode::Fno => bin_count(grid) * 2 * d * d,
    }
}

pub fn param_count(filter: &SpectralFilter) -> usize {
    filter.param_count()
}

fn check_grid(cfg: &MixerConfig, grid: &[usize]) -> Result<()> {
    if grid.len() != cfg.domain.grid_rank() {
        return shape_err(format!(
            "{:?} mixer needs a rank-{} grid, got {grid:?}",
            cfg.domain,
            cfg.domain.grid_rank()
        ));
    }
    if grid.iter().any(|&n| n == 0) {
        return shape_err(format!("empty token grid {grid:?}"));
    }
    Ok(())
}

/// Graph handles for a filter's learnable tensors.
#[derive(Debug, Clone)]
pub(crate) struct FilterNodes {
    pub mode: MixerMode,
    pub nonlinearity: Nonlinearity,
    pub blocks: usize,
    pub w1: Option<NodeId>,
    pub b1: Option<NodeId>,
    pub w2: Option<NodeId>,
    pub b2: Option<NodeId>,
    pub lambda: Option<NodeId>,
    pub per_freq: Option<NodeId>,
}

impl FilterNodes {
    pub fn constants(g: &mut Graph, f: &SpectralFilter) -> Self {
        let mut c = |v: Option<&Field>| v.map(|v| g.fixed(v.clone()));
        let mlp = f.mlp.as_ref();
        Self {
            mode: f.mode,
            nonlinearity: f.nonlinearity,
            blocks: f.blocks,
            w1: c(mlp.map(|m| &m.w1)),
            b1: c(mlp.map(|m| &m.b1)),
            w2: c(mlp.map(|m| &m.w2)),
            b2: c(mlp.map(|m| &m.b2)),
            lambda: c(f.lambda.as_ref()),
            per_freq: c(f.per_freq.as_ref()),
        }
    }
}

/// Maps every site of a half spectrum of shape `spec_shape` (channel axis
/// excluded) to its bin index, where bins enumerate the transformed axes in
/// row-major order.
fn site_bins(spec_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(spec_shape.iter().product());
    for_each_index(spec_shape, |idx| {
        let mut b = 0;
        for &a in axes {
            b = b * spec_shape[a] + idx[a];
        }
        out.push(b);
    });
    out
}

/// Records the mixer on `g`. `x` has shape `(..., D)` and `axes` selects the
/// grid axes (all strictly before the channel axis).
pub(crate) fn mix_graph(g: &mut Graph, x: NodeId, f: &FilterNodes, axes: &[usize]) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 || axes.iter().any(|&a| a + 1 >= rank) {
        return shape_err(format!("mixer axes {axes:?} on token shape {shape:?}"));
    }
    let d = shape[rank - 1];
    let spec_full = half_spectrum_shape(&shape, axes)?;
    let spec_sites = &spec_full[..rank - 1];
    let nbins: usize = axes.iter().map(|&a| spec_full[a]).product();
    let sites = site_bins(spec_sites, axes);

    let z = g.rdft(x, axes)?;
    let y = match f.mode {
        MixerMode::Fno => {
            let w = f.per_freq.ok_or_else(|| crate::Error::State("FNO filter without weights".into()))?;
            let ws = g.shape(w);
            if ws != [nbins, d, d, 2] {
                return shape_err(format!("per-bin weights {ws:?} for {nbins} bins and D={d}"));
            }
            g.per_bin_matmul(z, w, sites)?
        }
        MixerMode::Afno | MixerMode::Pafno => {
            let (Some(w1), Some(w2)) = (f.w1, f.w2) else {
                return Err(crate::Error::State("shared-MLP filter without weights".into()));
            };
            let h = g.complex_block_linear(z, w1, f.b1, f.blocks)?;
            let h = match f.nonlinearity {
                Nonlinearity::Identity => h,
                Nonlinearity::ReluSplit => g.relu(h),
            };
            let y = g.complex_block_linear(h, w2, f.b2, f.blocks)?;
            if f.mode == MixerMode::Pafno {
                let lam = f
                    .lambda
                    .ok_or_else(|| crate::Error::State("PAFNO filter without coefficients".into()))?;
                if g.value(lam).len() != nbins {
                    return shape_err(format!(
                        "{} coefficients for {nbins} retained bins",
                        g.value(lam).len()
                    ));
                }
                g.scale_bins(y, lam, sites)?
            } else {
                y
            }
        }
    };
    g.irdft(y, axes, &shape)
}

/// Applies `filter` to `tokens`. Spatial mixers treat the two axes before
/// the channel axis as the `(h, w)` grid, temporal mixers the single axis
/// before it. Leading axes are batch axes.
pub fn mix(tokens: &Field, filter: &SpectralFilter, cfg: &MixerConfig) -> Result<Field> {
    cfg.validate()?;
    let rank = tokens.rank();
    let gr = cfg.domain.grid_rank();
    if rank < gr + 1 {
        return shape_err(format!("tokens {:?} too small for a {:?} mixer", tokens.shape(), cfg.domain));
    }
    if tokens.shape()[rank - 1] != cfg.embed_dim {
        return shape_err(format!(
            "tokens carry {} channels, mixer expects {}",
            tokens.shape()[rank - 1],
            cfg.embed_dim
        ));
    }
    if filter.mode != cfg.mode {
        return arg_err(format!("filter is {:?}, config says {:?}", filter.mode, cfg.mode));
    }
    let axes: Vec<usize> = (rank - 1 - gr..rank - 1).collect();
    let mut g = Graph::new(0);
    let x = g.fixed(tokens.clone());
    let nodes = FilterNodes::constants(&mut g, filter);
    let y = mix_graph(&mut g, x, &nodes, &axes)?;
    Ok(g.value(y).clone())
}

/// Real grid-shaped kernel whose circular convolution realizes the linear
/// part of a PAFNO filter: the inverse transform of `lambda` taken as a
/// real half spectrum.
pub fn effective_kernel(lambda: &Field, grid: &[usize]) -> Result<Field> {
    if grid.is_empty() {
        return arg_err("kernel grid needs at least one axis");
    }
    let bins = bin_shape(grid);
    if lambda.len() != bins.iter().product::<usize>() {
        return arg_err(format!(
            "{} coefficients for grid {grid:?} (expected {} retained bins)",
            lambda.len(),
            bins.iter().product::<usize>()
        ));
    }
    let mut spec = ComplexField::zeros(&bins);
    for (i, &l) in lambda.data().iter().enumerate() {
        spec.raw_mut()[2 * i] = l;
    }
    let axes: Vec<usize> = (0..grid.len()).collect();
    irdft(&spec, &axes, grid)
}

/// CSV with one row per grid index: the index on every axis, the signed
/// circular offset from the pivot token at index 0, and the kernel value.
pub fn kernel_csv(kernel: &Field) -> String {
    let rank = kernel.rank();
    let mut s = String::new();
    let cols: Vec<String> = (0..rank)
        .map(|a| format!("i{a}"))
        .chain((0..rank).map(|a| format!("offset{a}")))
        .chain(["distance".to_string(), "value".to_string()])
        .collect();
    s.push_str(&cols.join(","));
    s.push('\n');
    let shape = kernel.shape().to_vec();
    for_each_index(&shape, |idx| {
        let offs: Vec<i64> = idx
            .iter()
            .zip(&shape)
            .map(|(&i, &n)| if 2 * i <= n { i as i64 } else { i as i64 - n as i64 })
            .collect();
        let dist = offs.iter().map(|&o| (o * o) as f64).sum::<f64>().sqrt();
        for i in idx {
            let _ = write!(s, "{i},");
        }
        for o in &offs {
            let _ = write!(s, "{o},");
        }
        let _ = writeln!(s, "{dist},{:e}", kernel.get(idx));
    });
    s
}
