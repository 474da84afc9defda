//! The WeatherFormer single-step predictor.
//!
//! `x (T, H, W, C)` is patchified into a `(t, h, w, D)` token grid, passed
//! through `L` factorized space-time blocks and decoded back to the next
//! dynamic state `(H, W, C_dyn)`:
//!
//! ```text
//! z1  = z  + SpatialMix(norm1(z))     per time slice, over (h, w)
//! z2  = z1 + TemporalMix(norm2(z1))   per spatial site, over t
//! out = z2 + MLP(norm3(z2))           hidden r D
//! ```
//!
//! The decoder keeps the last temporal slice, applies `head_depth` 3x3
//! convolutions (replicate padding in latitude, circular in longitude),
//! a per-token linear map to `ph pw C_dyn` values and un-patchifies.

mod checkpoint;
pub mod config;
pub mod params;

use std::collections::HashMap;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{Activation, MixerSpec, ModelConfig, Patch};
pub use params::{ModelParams, ParamEntry, ParamGroup, ParamLayout};

use crate::autodiff::{Fault, Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::field::Field;
use crate::pafno::{mix_graph, FilterNodes, MixerMode};

pub const NORM_EPS: f64 = 1e-5;

/// Graph handles for every parameter tensor of one [`ModelParams`].
pub struct ParamNodes {
    ids: Vec<NodeId>,
    by_name: HashMap<String, usize>,
}

impl ParamNodes {
    /// Registers every tensor once as a learnable leaf of `g`.
    pub fn register(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        let mut ids = Vec::with_capacity(params.layout().entries().len());
        let mut by_name = HashMap::new();
        for (i, e) in params.layout().entries().iter().enumerate() {
            let v = Field::new(e.shape.clone(), params.values()[e.range()].to_vec())?;
            ids.push(g.param(v, e.offset)?);
            by_name.insert(e.name.clone(), i);
        }
        Ok(Self { ids, by_name })
    }

    /// Registers every tensor as a fixed leaf (no gradient slots).
    pub fn constants(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        let mut ids = Vec::new();
        let mut by_name = HashMap::new();
        for (i, e) in params.layout().entries().iter().enumerate() {
            let v = Field::new(e.shape.clone(), params.values()[e.range()].to_vec())?;
            ids.push(g.fixed(v));
            by_name.insert(e.name.clone(), i);
        }
        Ok(Self { ids, by_name })
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).map(|&i| self.ids[i])
    }

    fn req(&self, name: &str) -> Result<NodeId> {
        self.get(name)
            .ok_or_else(|| crate::Error::State(format!("parameter {name} was not registered")))
    }

    fn filter(&self, prefix: &str, spec: &MixerSpec) -> FilterNodes {
        let p = |leaf: &str| self.get(&format!("{prefix}.{leaf}"));
        FilterNodes {
            mode: spec.mode,
            nonlinearity: spec.nonlinearity,
            blocks: spec.blocks,
            w1: p("w1"),
            b1: p("b1"),
            w2: p("w2"),
            b2: p("b2"),
            lambda: if spec.mode == MixerMode::Pafno { p("lambda") } else { None },
            per_freq: p("per_freq"),
        }
    }
}

fn check_input(x: &Field, cfg: &ModelConfig) -> Result<()> {
    let want = [cfg.input_steps, cfg.height, cfg.width, cfg.channels()];
    if x.shape() != want {
        return shape_err(format!("input {:?}, configuration expects {want:?}", x.shape()));
    }
    Ok(())
}

/// Flat source index of every patch element, ordered `(t, h, w, dt, dh, dw, c)`.
pub fn patch_index(cfg: &ModelConfig) -> Vec<usize> {
    let [t, h, w] = cfg.token_grid();
    let Patch { t: pt, h: ph, w: pw } = cfg.patch;
    let (hh, ww, c) = (cfg.height, cfg.width, cfg.channels());
    let mut idx = Vec::with_capacity(cfg.input_steps * hh * ww * c);
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            let base = (((ti * pt + dt) * hh + hi * ph + dh) * ww + wi * pw + dw) * c;
                            idx.extend(base..base + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Patchify and embed: `(T, H, W, C) -> (t, h, w, D)`.
pub fn tokenize_graph(g: &mut Graph, p: &ParamNodes, x: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let [t, h, w] = cfg.token_grid();
    let patches = g.gather(x, patch_index(cfg), &[t, h, w, cfg.patch_len()])?;
    g.linear(patches, p.req("embed.w")?, p.req("embed.b")?)
}

fn maybe_norm(g: &mut Graph, p: &ParamNodes, z: NodeId, name: &str, on: bool) -> Result<NodeId> {
    if !on {
        return Ok(z);
    }
    let gain = p.req(&format!("{name}.gain"))?;
    let bias = p.req(&format!("{name}.bias"))?;
    g.layer_norm(z, gain, bias, NORM_EPS)
}

/// One factorized space-time block on a `(t, h, w, D)` token grid.
pub fn sf_block_graph(g: &mut Graph, p: &ParamNodes, z: NodeId, cfg: &ModelConfig, block: usize) -> Result<NodeId> {
    let pre = format!("block{block}");
    let n1 = maybe_norm(g, p, z, &format!("{pre}.norm1"), cfg.use_norm)?;
    let f = p.filter(&format!("{pre}.spatial"), &cfg.spatial);
    let s = mix_graph(g, n1, &f, &[1, 2])?;
    let mut z1 = g.add(z, s)?;
    if let Some(spec) = &cfg.temporal {
        let n2 = maybe_norm(g, p, z1, &format!("{pre}.norm2"), cfg.use_norm)?;
        let f = p.filter(&format!("{pre}.temporal"), spec);
        let m = mix_graph(g, n2, &f, &[0])?;
        z1 = g.add(z1, m)?;
    }
    let n3 = maybe_norm(g, p, z1, &format!("{pre}.norm3"), cfg.use_norm)?;
    let hdn = g.linear(n3, p.req(&format!("{pre}.mlp.w1"))?, p.req(&format!("{pre}.mlp.b1"))?)?;
    let hdn = match cfg.mlp_activation {
        Activation::Gelu => g.gelu(hdn),
        Activation::Identity => hdn,
    };
    let out = g.linear(hdn, p.req(&format!("{pre}.mlp.w2"))?, p.req(&format!("{pre}.mlp.b2"))?)?;
    g.add(z1, out)
}

/// im2col source indices for a 3x3 stencil over an `(h, w, D)` grid. Row
/// layout per site is `tap * D + d` with `tap = (di + 1) * 3 + (dj + 1)`.
pub fn conv_index(h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * 9 * d);
    for i in 0..h {
        for j in 0..w {
            for di in -1i64..=1 {
                let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                for dj in -1i64..=1 {
                    let jj = (j as i64 + dj).rem_euclid(w as i64) as usize;
                    let base = (ii * w + jj) * d;
                    idx.extend(base..base + d);
                }
            }
        }
    }
    idx
}

/// Flat head-output index for every `(H, W, C_dyn)` output scalar.
pub fn depatch_index(cfg: &ModelConfig) -> Vec<usize> {
    let [_, h, w] = cfg.token_grid();
    let (ph, pw, cd) = (cfg.patch.h, cfg.patch.w, cfg.dyn_channels);
    let q = cfg.head_len();
    let mut idx = Vec::with_capacity(cfg.height * cfg.width * cd);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (hi, dh, wi, dw) = (y / ph, y % ph, x / pw, x % pw);
            let base = (hi * w + wi) * q + (dh * pw + dw) * cd;
            idx.extend(base..base + cd);
        }
    }
    debug_assert!(idx.iter().all(|&i| i < h * w * q));
    idx
}

/// `(t, h, w, D) -> (H, W, C_dyn)`.
pub fn decode_graph(g: &mut Graph, p: &ParamNodes, z: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let [t, h, w] = cfg.token_grid();
    let d = cfg.embed_dim;
    let plane = h * w * d;
    let last: Vec<usize> = ((t - 1) * plane..t * plane).collect();
    let mut y = g.gather(z, last, &[h, w, d])?;
    let im2col = conv_index(h, w, d);
    for c in 0..cfg.head_depth {
        let cols = g.gather(y, im2col.clone(), &[h, w, 9 * d])?;
        y = g.linear(cols, p.req(&format!("decoder.conv{c}.w"))?, p.req(&format!("decoder.conv{c}.b"))?)?;
        if c + 1 < cfg.head_depth {
            y = g.gelu(y);
        }
    }
    let head = g.linear(y, p.req("decoder.head.w")?, p.req("decoder.head.b")?)?;
    g.gather(head, depatch_index(cfg), &[cfg.height, cfg.width, cfg.dyn_channels])
}

/// Records the full forward pass of `x` on `g`.
pub fn forward_graph(g: &mut Graph, p: &ParamNodes, x: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let mut z = tokenize_graph(g, p, x, cfg)?;
    for l in 0..cfg.layers {
        z = sf_block_graph(g, p, z, cfg, l)?;
    }
    decode_graph(g, p, z, cfg)
}

fn eval_graph(params: &ModelParams) -> Result<(Graph, ParamNodes)> {
    let mut g = Graph::new(params.len());
    let p = ParamNodes::constants(&mut g, params)?;
    Ok((g, p))
}

pub fn tokenize(x: &Field, params: &ModelParams) -> Result<Field> {
    let cfg = params.config();
    check_input(x, cfg)?;
    let (mut g, p) = eval_graph(params)?;
    let xn = g.fixed(x.clone());
    let z = tokenize_graph(&mut g, &p, xn, cfg)?;
    Ok(g.value(z).clone())
}

fn check_tokens(z: &Field, cfg: &ModelConfig) -> Result<()> {
    let [t, h, w] = cfg.token_grid();
    let want = [t, h, w, cfg.embed_dim];
    if z.shape() != want {
        return shape_err(format!("token grid {:?}, configuration expects {want:?}", z.shape()));
    }
    Ok(())
}

pub fn sf_block(z: &Field, params: &ModelParams, block: usize) -> Result<Field> {
    let cfg = params.config();
    check_tokens(z, cfg)?;
    if block >= cfg.layers {
        return crate::error::arg_err(format!("block {block} of {}", cfg.layers));
    }
    let (mut g, p) = eval_graph(params)?;
    let zn = g.fixed(z.clone());
    let out = sf_block_graph(&mut g, &p, zn, cfg, block)?;
    Ok(g.value(out).clone())
}

pub fn decode(z: &Field, params: &ModelParams) -> Result<Field> {
    let cfg = params.config();
    check_tokens(z, cfg)?;
    let (mut g, p) = eval_graph(params)?;
    let zn = g.fixed(z.clone());
    let out = decode_graph(&mut g, &p, zn, cfg)?;
    Ok(g.value(out).clone())
}

/// `Y_hat_{T+1} = WeatherFormer(X_{1:T})`.
pub fn forward(x: &Field, params: &ModelParams) -> Result<Field> {
    let cfg = params.config();
    check_input(x, cfg)?;
    let (mut g, p) = eval_graph(params)?;
    let xn = g.fixed(x.clone());
    let y = forward_graph(&mut g, &p, xn, cfg)?;
    Ok(g.value(y).clone())
}

/// A graph prepared for differentiating with respect to `params`.
pub fn training_graph(params: &ModelParams, fault: Option<Fault>) -> Result<(Graph, ParamNodes)> {
    let mut g = Graph::new(params.len()).with_fault(fault);
    let p = ParamNodes::register(&mut g, params)?;
    Ok((g, p))
}
