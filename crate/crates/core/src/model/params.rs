use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{arg_err, Result};
use crate::field::Field;
use crate::pafno::{bin_shape, ComplexMlp, MixerConfig, MixerDomain, MixerMode, SpectralFilter};

/// Coarse parameter families, used for gradient-check coverage and for
/// deciding which tensors receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Norm,
    Lambda,
    SpectralMlp,
    PerFrequency,
    ChannelMlp,
    Decoder,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Norm => "norm",
            ParamGroup::Lambda => "lambda",
            ParamGroup::SpectralMlp => "spectral_mlp",
            ParamGroup::PerFrequency => "per_frequency",
            ParamGroup::ChannelMlp => "channel_mlp",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Matrices decay; biases, norms and frequency coefficients do not.
    pub decay: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered enumeration of every learnable tensor of a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let d = cfg.embed_dim;
        b.push("embed.w", ParamGroup::Embedding, &[cfg.patch_len(), d], true);
        b.push("embed.b", ParamGroup::Embedding, &[d], false);
        for l in 0..cfg.layers {
            let p = format!("block{l}");
            if cfg.use_norm {
                b.norm(&format!("{p}.norm1"), d);
            }
            b.mixer(&format!("{p}.spatial"), &cfg.spatial_mixer(), &cfg.spatial_grid());
            if let Some(t) = cfg.temporal_mixer() {
                if cfg.use_norm {
                    b.norm(&format!("{p}.norm2"), d);
                }
                b.mixer(&format!("{p}.temporal"), &t, &cfg.temporal_grid());
            }
            if cfg.use_norm {
                b.norm(&format!("{p}.norm3"), d);
            }
            let h = cfg.mlp_ratio * d;
            b.push(&format!("{p}.mlp.w1"), ParamGroup::ChannelMlp, &[d, h], true);
            b.push(&format!("{p}.mlp.b1"), ParamGroup::ChannelMlp, &[h], false);
            b.push(&format!("{p}.mlp.w2"), ParamGroup::ChannelMlp, &[h, d], true);
            b.push(&format!("{p}.mlp.b2"), ParamGroup::ChannelMlp, &[d], false);
        }
        for c in 0..cfg.head_depth {
            b.push(&format!("decoder.conv{c}.w"), ParamGroup::Decoder, &[9 * d, d], true);
            b.push(&format!("decoder.conv{c}.b"), ParamGroup::Decoder, &[d], false);
        }
        b.push("decoder.head.w", ParamGroup::Decoder, &[d, cfg.head_len()], true);
        b.push("decoder.head.b", ParamGroup::Decoder, &[cfg.head_len()], false);
        ParamLayout {
            entries: b.entries,
            total: b.total,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<(usize, &ParamEntry)> {
        self.entries.iter().enumerate().find(|(_, e)| e.name == name)
    }

    /// Entry owning flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&ParamEntry> {
        let pos = self.entries.partition_point(|e| e.offset + e.len() <= i);
        self.entries.get(pos).filter(|e| e.range().contains(&i))
    }
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, group: ParamGroup, shape: &[usize], decay: bool) {
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            offset: self.total,
            decay,
        });
        self.total += len;
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(&format!("{prefix}.gain"), ParamGroup::Norm, &[d], false);
        self.push(&format!("{prefix}.bias"), ParamGroup::Norm, &[d], false);
    }

    fn mixer(&mut self, prefix: &str, cfg: &MixerConfig, grid: &[usize]) {
        let d = cfg.embed_dim;
        match cfg.mode {
            MixerMode::Afno | MixerMode::Pafno => {
                let m = d / cfg.blocks;
                let g = ParamGroup::SpectralMlp;
                self.push(&format!("{prefix}.w1"), g, &[cfg.blocks, m, m, 2], true);
                self.push(&format!("{prefix}.b1"), g, &[d, 2], false);
                self.push(&format!("{prefix}.w2"), g, &[cfg.blocks, m, m, 2], true);
                self.push(&format!("{prefix}.b2"), g, &[d, 2], false);
                if cfg.mode == MixerMode::Pafno {
                    self.push(&format!("{prefix}.lambda"), ParamGroup::Lambda, &bin_shape(grid), false);
                }
            }
            MixerMode::Fno => {
                let bins: usize = bin_shape(grid).iter().product();
                self.push(&format!("{prefix}.per_freq"), ParamGroup::PerFrequency, &[bins, d, d, 2], true);
            }
        }
    }
}

/// Full learnable state of a model: configuration, layout and flat values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

const SPECTRAL_STD: f64 = 0.02;
const CHANNEL_MLP_STD: f64 = 0.02;

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let values = vec![0.0; layout.total()];
        Ok(Self {
            config: cfg.clone(),
            layout,
            values,
        })
    }

    pub fn from_values(cfg: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if values.len() != p.values.len() {
            return arg_err(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                p.values.len()
            ));
        }
        p.values = values;
        Ok(p)
    }

    /// Seeded training initialization.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let entries = p.layout.entries().to_vec();
        for e in &entries {
            let fan_in = e.shape.first().copied().unwrap_or(1).max(1) as f64;
            let leaf = e.name.rsplit('.').next().unwrap_or("");
            let std = match (e.group, leaf) {
                (ParamGroup::Norm, "gain") => {
                    p.values[e.range()].fill(1.0);
                    continue;
                }
                (ParamGroup::Lambda, _) => {
                    p.values[e.range()].fill(1.0);
                    continue;
                }
                (_, _) if !e.decay => continue,
                (ParamGroup::SpectralMlp | ParamGroup::PerFrequency, _) => SPECTRAL_STD,
                (ParamGroup::ChannelMlp, _) => CHANNEL_MLP_STD,
                _ => 1.0 / fan_in.sqrt(),
            };
            for v in &mut p.values[e.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(p)
    }

    /// Hand-wired weights whose forecast is the last input frame rolled by
    /// `shift` in {-1, 0, 1} columns. Needs `layers = 0`, unit patches,
    /// `head_depth = 1` and `embed_dim` equal to the channel count.
    pub fn shift_oracle(cfg: &ModelConfig, shift: isize) -> Result<Self> {
        let c = cfg.channels();
        let unit = cfg.patch.volume() == 1;
        if cfg.layers != 0 || !unit || cfg.head_depth != 1 || cfg.embed_dim != c || shift.abs() > 1 {
            return arg_err("shift oracle needs L=0, unit patches, one conv and D=C, |shift|<=1");
        }
        let mut p = Self::zeros(cfg)?;
        let eye = |r: usize, k: usize| Field::from_fn(&[r, k], |i| (i[0] == i[1]) as u8 as f64);
        p.set_tensor("embed.w", &eye(c, c))?;
        // Tap (0, -shift) reads column j - shift.
        let tap = (3 + (1 - shift)) as usize;
        let conv = Field::from_fn(&[9 * c, c], |i| (i[0] == tap * c + i[1]) as u8 as f64);
        p.set_tensor("decoder.conv0.w", &conv)?;
        p.set_tensor("decoder.head.w", &eye(c, cfg.dyn_channels))?;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn entry(&self, name: &str) -> Result<&ParamEntry> {
        match self.layout.find(name) {
            Some((_, e)) => Ok(e),
            None => arg_err(format!("no parameter named {name:?}")),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.layout.find(name).is_some()
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let r = self.entry(name)?.range();
        Ok(&self.values[r])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.entry(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn tensor(&self, name: &str) -> Result<Field> {
        let e = self.entry(name)?;
        Field::new(e.shape.clone(), self.values[e.range()].to_vec())
    }

    pub fn set_tensor(&mut self, name: &str, value: &Field) -> Result<()> {
        let e = self.entry(name)?.clone();
        if value.shape() != e.shape.as_slice() {
            return arg_err(format!("{name} has shape {:?}, got {:?}", e.shape, value.shape()));
        }
        self.values[e.range()].copy_from_slice(value.data());
        Ok(())
    }

    /// Copy of one mixer's filter as a standalone [`SpectralFilter`].
    pub fn filter(&self, block: usize, domain: MixerDomain) -> Result<SpectralFilter> {
        let (mcfg, tag) = match domain {
            MixerDomain::Spatial => (self.config.spatial_mixer(), "spatial"),
            MixerDomain::Temporal => match self.config.temporal_mixer() {
                Some(t) => (t, "temporal"),
                None => return arg_err("configuration has no temporal mixer"),
            },
        };
        if block >= self.config.layers {
            return arg_err(format!("block {block} of {}", self.config.layers));
        }
        let p = format!("block{block}.{tag}");
        let mut f = SpectralFilter {
            mode: mcfg.mode,
            nonlinearity: mcfg.nonlinearity,
            blocks: mcfg.blocks,
            mlp: None,
            lambda: None,
            per_freq: None,
        };
        match mcfg.mode {
            MixerMode::Afno | MixerMode::Pafno => {
                f.mlp = Some(ComplexMlp {
                    w1: self.tensor(&format!("{p}.w1"))?,
                    b1: self.tensor(&format!("{p}.b1"))?,
                    w2: self.tensor(&format!("{p}.w2"))?,
                    b2: self.tensor(&format!("{p}.b2"))?,
                });
                if mcfg.mode == MixerMode::Pafno {
                    f.lambda = Some(self.tensor(&format!("{p}.lambda"))?);
                }
            }
            MixerMode::Fno => f.per_freq = Some(self.tensor(&format!("{p}.per_freq"))?),
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, Patch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_covers_every_scalar_once() {
        let cfg = ModelConfig::toy(8, 16, 16);
        let layout = ParamLayout::new(&cfg);
        let mut next = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, next, "{} not contiguous", e.name);
            next += e.len();
        }
        assert_eq!(next, layout.total());
        assert_eq!(layout.total(), cfg.param_count());
        for i in [0, 17, layout.total() - 1] {
            assert!(layout.owner(i).unwrap().range().contains(&i));
        }
        assert!(layout.owner(layout.total()).is_none());
    }

    #[test]
    fn closed_form_count_across_configs() {
        let mut cfg = ModelConfig::toy(8, 16, 16);
        for mode in [MixerMode::Afno, MixerMode::Pafno, MixerMode::Fno] {
            for temporal in [true, false] {
                for norm in [true, false] {
                    let mut c = cfg.clone().with_mixer(mode);
                    if !temporal {
                        c.temporal = None;
                    }
                    c.use_norm = norm;
                    assert_eq!(ParamLayout::new(&c).total(), c.param_count(), "{c:?}");
                }
            }
        }
        cfg.patch = Patch::new(1, 2, 2);
        cfg.head_depth = 2;
        assert_eq!(ParamLayout::new(&cfg).total(), cfg.param_count());
    }

    #[test]
    fn init_is_seeded_and_lambda_starts_at_one() {
        let cfg = ModelConfig::toy(8, 16, 16);
        let a = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.slice("block0.spatial.lambda").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.slice("block1.temporal.lambda").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.slice("block0.norm1.gain").unwrap().iter().all(|&v| v == 1.0));
    }
}
