//! Latitude-weighted training with AdamW, earth-rotation and noise
//! augmentation, and finite-difference gradient checking.

mod augment;
mod gradcheck;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{earth_rotation, noise_augment, AugmentConfig};
pub use gradcheck::{gradcheck, gradcheck_fixture, GradcheckConfig, GradcheckReport, GroupReport};
pub use optim::{lr_at, OptimizerConfig, OptimizerState};

use crate::autodiff::{Graph, NodeId};
use crate::data::{DatasetBundle, Split};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::eval::{lat_weights, LatWeights};
use crate::field::Field;
use crate::model::{forward, forward_graph, training_graph, ModelConfig, ModelParams, ParamNodes};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    LatWeighted,
    Plain,
}

/// Per-scalar loss weights of an `(H, W, C_dyn)` target, already divided by
/// the scalar count so that the weighted sum is the loss.
pub fn loss_weights(kind: LossKind, lats: &[f64], w: usize, c: usize) -> Result<Vec<f64>> {
    let lw = match kind {
        LossKind::LatWeighted => lat_weights(lats)?,
        LossKind::Plain => LatWeights::uniform(lats.len()),
    };
    let n = (lats.len() * w * c) as f64;
    Ok(lw.expand(w, c).into_iter().map(|v| v / n).collect())
}

/// Channel mean of the latitude-weighted squared error.
pub fn loss(pred: &Field, target: &Field, w: &LatWeights) -> Result<f64> {
    let Ok([h, wd, c]) = <[usize; 3]>::try_from(pred.shape()) else {
        return shape_err(format!("loss expects (H, W, C), got {:?}", pred.shape()));
    };
    if pred.shape() != target.shape() || w.len() != h {
        return shape_err(format!(
            "loss between {:?} and {:?} with {} latitude weights",
            pred.shape(),
            target.shape(),
            w.len()
        ));
    }
    let weights = w.expand(wd, c);
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&weights)
        .map(|((a, b), l)| l * (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Supervise a two-step unrolled prediction instead of one step.
    pub two_step: bool,
    /// Cap on training windows drawn per epoch after shuffling.
    pub windows_per_epoch: Option<usize>,
    /// Cap on validation windows scored per epoch.
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(16, 32, 64),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 4,
            seed: 0,
            loss: LossKind::LatWeighted,
            two_step: false,
            windows_per_epoch: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return arg_err("batch size must be positive");
        }
        if self.windows_per_epoch == Some(0) {
            return arg_err("windows_per_epoch must be positive");
        }
        Ok(())
    }

    /// Snapshots a training example spans beyond its input window.
    fn horizon(&self) -> usize {
        if self.two_step {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

/// One training example in normalized units: the input window and the
/// dynamic targets of the next `horizon` snapshots.
struct Example {
    x: Field,
    ys: Vec<Field>,
}

fn example(bundle: &DatasetBundle, start: usize, t: usize, horizon: usize) -> Result<Example> {
    let w = bundle.window(start, t)?;
    let mut ys = vec![w.y];
    for k in 1..horizon {
        ys.push(bundle.target(start + t + k));
    }
    Ok(Example { x: w.x, ys })
}

fn starts(bundle: &DatasetBundle, split: Split, t: usize, horizon: usize) -> Vec<usize> {
    let r = bundle.splits().range(split);
    if r.len() < t + horizon {
        return Vec::new();
    }
    (r.start..=r.end - t - horizon).collect()
}

/// Next input window: frames `1..T` of `x` followed by `pred` with the
/// static channels of the last frame of `x`.
fn slide_graph(g: &mut Graph, x: NodeId, pred: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let (t, h, w, c, cd) = (cfg.input_steps, cfg.height, cfg.width, cfg.channels(), cfg.dyn_channels);
    let plane = h * w * c;
    let xv = g.value(x).clone();
    let statics: Vec<f64> = xv.data()[(t - 1) * plane..]
        .chunks_exact(c)
        .flat_map(|px| px[cd..].to_vec())
        .collect();
    let cs = c - cd;
    let st = g.fixed(Field::new(vec![h * w * cs], statics)?);
    let joined = g.concat(&[x, pred, st], &[t * plane + h * w * cd + h * w * cs])?;
    let (po, so) = (t * plane, t * plane + h * w * cd);
    let mut index: Vec<usize> = (plane..t * plane).collect();
    for p in 0..h * w {
        index.extend((0..cd).map(|k| po + p * cd + k));
        index.extend((0..cs).map(|k| so + p * cs + k));
    }
    g.gather(joined, index, &[t, h, w, c])
}

/// Records the loss of one example on `g`, scaled by `scale`. Two-step
/// examples average the losses of both unrolled predictions.
fn example_loss(
    g: &mut Graph,
    p: &ParamNodes,
    ex: &Example,
    cfg: &ModelConfig,
    weights: &[f64],
    scale: f64,
) -> Result<NodeId> {
    let x = g.fixed(ex.x.clone());
    let y1 = forward_graph(g, p, x, cfg)?;
    let l1 = g.weighted_sse(y1, &ex.ys[0], weights.to_vec(), scale / ex.ys.len() as f64)?;
    if ex.ys.len() == 1 {
        return Ok(l1);
    }
    let x2 = slide_graph(g, x, y1, cfg)?;
    let y2 = forward_graph(g, p, x2, cfg)?;
    let l2 = g.weighted_sse(y2, &ex.ys[1], weights.to_vec(), scale / ex.ys.len() as f64)?;
    g.sum_scalars(&[l1, l2])
}

/// Loss and flat gradient of one example.
pub fn example_gradient(
    params: &ModelParams,
    x: &Field,
    ys: &[Field],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if ys.is_empty() || ys.len() > 2 {
        return arg_err(format!("{} targets per example, expected 1 or 2", ys.len()));
    }
    let ex = Example { x: x.clone(), ys: ys.to_vec() };
    let (mut g, p) = training_graph(params, None)?;
    let l = example_loss(&mut g, &p, &ex, params.config(), weights, 1.0)?;
    let v = g.value(l).data()[0];
    Ok((v, g.backward(l)?.params))
}

/// Single-step loss of `params` over the windows of `split`, no augmentation.
pub fn split_loss(
    params: &ModelParams,
    bundle: &DatasetBundle,
    split: Split,
    kind: LossKind,
    limit: Option<usize>,
) -> Result<f64> {
    let cfg = params.config();
    let w = loss_weights(kind, bundle.latitudes(), cfg.width, cfg.dyn_channels)?;
    mean_loss(bundle, split, cfg.input_steps, limit, &w, |x| forward(x, params))
}

/// Loss of the persistence forecast (last input frame) on `split`.
pub fn persistence_loss(bundle: &DatasetBundle, t: usize, split: Split, kind: LossKind) -> Result<f64> {
    let [_, _, w, _] = bundle.dims();
    let cd = bundle.dyn_channels();
    let weights = loss_weights(kind, bundle.latitudes(), w, cd)?;
    mean_loss(bundle, split, t, None, &weights, |x| {
        let last = x.select(0, t - 1);
        let c = *last.shape().last().unwrap();
        let data = last.data().chunks_exact(c).flat_map(|px| px[..cd].to_vec()).collect();
        Field::new(vec![last.shape()[0], last.shape()[1], cd], data)
    })
}

fn mean_loss(
    bundle: &DatasetBundle,
    split: Split,
    t: usize,
    limit: Option<usize>,
    weights: &[f64],
    mut step: impl FnMut(&Field) -> Result<Field>,
) -> Result<f64> {
    let mut idx = starts(bundle, split, t, 1);
    if let Some(m) = limit {
        idx.truncate(m);
    }
    if idx.is_empty() {
        return arg_err(format!("{split:?} split holds no window of length {t}"));
    }
    let mut total = 0.0;
    for &i in &idx {
        let w = bundle.window(i, t)?;
        let pred = step(&w.x)?;
        total += pred
            .data()
            .iter()
            .zip(w.y.data())
            .zip(weights)
            .map(|((a, b), l)| l * (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / idx.len() as f64)
}

/// Trains from the seeded initialization. `on_epoch` observes each record.
pub fn train(bundle: &DatasetBundle, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let init = ModelParams::init(&cfg.model, &mut stream(cfg.seed, Stream::Init))?;
    train_from(bundle, cfg, init, on_epoch)
}

/// Trains starting from `params`. `bundle` may be raw or normalized.
pub fn train_from(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config() != &cfg.model {
        return Err(Error::ConfigMismatch("initial parameters were built for another model".into()));
    }
    let m = &cfg.model;
    let [_, h, w, c] = bundle.dims();
    if (m.height, m.width, m.channels(), m.dyn_channels) != (h, w, c, bundle.dyn_channels()) {
        return Err(Error::ConfigMismatch(format!(
            "model expects {}x{} with {} channels ({} dynamic), dataset is {h}x{w} with {c} ({} dynamic)",
            m.height,
            m.width,
            m.channels(),
            m.dyn_channels,
            bundle.dyn_channels()
        )));
    }
    let data = if bundle.is_normalized() { bundle.clone() } else { bundle.normalized()? };
    let t = m.input_steps;
    let mut train_idx = starts(&data, Split::Train, t, cfg.horizon());
    if train_idx.is_empty() {
        return arg_err(format!("train split too short for T={t} and horizon {}", cfg.horizon()));
    }
    let weights = loss_weights(cfg.loss, data.latitudes(), w, m.dyn_channels)?;
    let decay: Vec<bool> = params
        .layout()
        .entries()
        .iter()
        .flat_map(|e| std::iter::repeat_n(e.decay, e.len()))
        .collect();

    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut rot_rng = stream(cfg.seed, Stream::Rotation);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), params.len());
    let per_epoch = cfg.windows_per_epoch.map_or(train_idx.len(), |k| k.min(train_idx.len()));
    let steps = per_epoch.div_ceil(cfg.batch_size);
    let total = cfg.epochs as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad_norm = 0.0;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (step, batch) in train_idx[..per_epoch].chunks(cfg.batch_size).enumerate() {
            lr = lr_at(&cfg.optimizer, epoch as f64 + (step as f64 + 0.5) / steps as f64, total);
            let mut grads = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &start in batch {
                let mut ex = example(&data, start, t, cfg.horizon())?;
                let shift = cfg.augment.draw_shift(w, m.patch.w, &mut rot_rng);
                if shift != 0 {
                    let (x, ys) = earth_rotation(&ex.x, &ex.ys, shift);
                    ex = Example { x, ys };
                }
                if cfg.augment.noise {
                    ex.x = noise_augment(&ex.x, cfg.augment.noise_variance, m.dyn_channels, &mut noise_rng)?;
                }
                let (mut g, p) = training_graph(&params, None)?;
                let l = example_loss(&mut g, &p, &ex, m, &weights, 1.0 / batch.len() as f64)?;
                let lv = g.value(l).data()[0];
                if !lv.is_finite() {
                    return Err(Error::NonFinite { epoch, step, lr, grad_norm });
                }
                batch_loss += lv;
                for (a, b) in grads.iter_mut().zip(g.backward(l)?.params) {
                    *a += b;
                }
            }
            grad_norm = grads.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite { epoch, step, lr, grad_norm });
            }
            opt.step(params.values_mut(), &grads, &decay, lr)?;
            loss_sum += batch_loss;
        }
        let val_loss = match starts(&data, Split::Val, t, 1).is_empty() {
            true => f64::NAN,
            false => split_loss(&params, &data, Split::Val, cfg.loss, cfg.val_windows)?,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        params,
        history,
        optimizer: opt,
    })
}

#[cfg(test)]
mod tests;
