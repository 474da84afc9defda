use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{example_loss, loss_weights, Example, LossKind};
use crate::autodiff::{Fault, Graph};
use crate::data::latitudes;
use crate::error::{arg_err, Result};
use crate::field::Field;
use crate::model::{training_graph, ModelConfig, ModelParams, ParamGroup, ParamNodes};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub eps: f64,
    pub rel_tol: f64,
    /// Agreement below this absolute difference passes regardless of scale.
    pub abs_tol: f64,
    pub pass_fraction: f64,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 210,
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-9,
            pass_fraction: 0.99,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub sampled: usize,
    pub failed: usize,
    /// Relative error after the absolute floor; the pass/fail score.
    pub worst_rel_err: f64,
    /// Largest raw analytic-vs-numeric difference in the group.
    pub worst_abs_err: f64,
    pub worst_index: usize,
    pub worst_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub samples: usize,
    pub failed: usize,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        1.0 - self.failed as f64 / self.samples.max(1) as f64
    }

    /// Groups holding at least one failed scalar.
    pub fn failing_groups(&self) -> Vec<ParamGroup> {
        self.groups.iter().filter(|g| g.failed > 0).map(|g| g.group).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<13} sampled {:>3}  failed {:>3}  worst rel err {:.3e} at {} ({})  max abs diff {:.1e}",
                g.group.name(),
                g.sampled,
                g.failed,
                g.worst_rel_err,
                g.worst_index,
                g.worst_name,
                g.worst_abs_err
            );
        }
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{verdict}: {}/{} scalars agree ({:.2}%)",
            self.samples - self.failed,
            self.samples,
            100.0 * self.pass_fraction()
        );
        s
    }
}

/// A generic, non-symmetric evaluation point: seeded initialization with
/// every scalar perturbed, plus a random window and target on the default
/// latitude grid.
pub fn gradcheck_fixture(cfg: &ModelConfig, seed: u64) -> Result<(ModelParams, Field, Vec<Field>, Vec<f64>)> {
    let mut params = ModelParams::init(cfg, &mut stream(seed, Stream::Init))?;
    let mut rng = stream(seed, Stream::Noise);
    let jitter = Normal::new(0.0, 0.05).expect("finite std");
    for v in params.values_mut() {
        *v += jitter.sample(&mut rng);
    }
    let mut data = stream(seed, Stream::Data);
    let x = Field::from_fn(&[cfg.input_steps, cfg.height, cfg.width, cfg.channels()], |_| {
        data.random_range(-1.0..1.0)
    });
    let y = Field::from_fn(&[cfg.height, cfg.width, cfg.dyn_channels], |_| data.random_range(-1.0..1.0));
    let w = loss_weights(LossKind::LatWeighted, &latitudes(cfg.height), cfg.width, cfg.dyn_channels)?;
    Ok((params, x, vec![y], w))
}

fn eval_loss(params: &ModelParams, ex: &Example, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new(params.len());
    let p = ParamNodes::constants(&mut g, params)?;
    let l = example_loss(&mut g, &p, ex, params.config(), weights, 1.0)?;
    Ok(g.value(l).data()[0])
}

/// Compares reverse-mode gradients against central differences on scalars
/// sampled evenly across parameter groups.
pub fn gradcheck(
    params: &ModelParams,
    x: &Field,
    ys: &[Field],
    weights: &[f64],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if cfg.samples == 0 {
        return arg_err("gradcheck needs at least one sample");
    }
    if !(cfg.eps > 0.0) {
        return arg_err(format!("finite-difference step {} must be positive", cfg.eps));
    }
    let ex = Example {
        x: x.clone(),
        ys: ys.to_vec(),
    };
    let (mut g, p) = training_graph(params, cfg.fault)?;
    let l = example_loss(&mut g, &p, &ex, params.config(), weights, 1.0)?;
    let analytic = g.backward(l)?.params;

    let mut by_group: BTreeMap<ParamGroup, Vec<usize>> = BTreeMap::new();
    for e in params.layout().entries() {
        by_group.entry(e.group).or_default().extend(e.range());
    }
    let quota = cfg.samples.div_ceil(by_group.len());
    let mut rng = stream(cfg.seed, Stream::Data);
    let mut groups = Vec::new();
    let (mut samples, mut failed) = (0, 0);
    for (group, idx) in &by_group {
        let picks = rand::seq::index::sample(&mut rng, idx.len(), quota.min(idx.len()));
        let mut rep = GroupReport {
            group: *group,
            sampled: 0,
            failed: 0,
            worst_rel_err: 0.0,
            worst_abs_err: 0.0,
            worst_index: idx[0],
            worst_name: String::new(),
        };
        let mut probe = params.clone();
        for k in picks.iter() {
            let i = idx[k];
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + cfg.eps;
            let up = eval_loss(&probe, &ex, weights)?;
            probe.values_mut()[i] = orig - cfg.eps;
            let down = eval_loss(&probe, &ex, weights)?;
            probe.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            // Differences under the absolute floor count as exact agreement.
            let err = if diff <= cfg.abs_tol || scale == 0.0 { 0.0 } else { diff / scale };
            rep.sampled += 1;
            rep.worst_abs_err = rep.worst_abs_err.max(diff);
            if err > cfg.rel_tol {
                rep.failed += 1;
            }
            if rep.worst_name.is_empty() || err > rep.worst_rel_err {
                rep.worst_rel_err = err;
                rep.worst_index = i;
                rep.worst_name = params.layout().owner(i).map(|e| e.name.clone()).unwrap_or_default();
            }
        }
        samples += rep.sampled;
        failed += rep.failed;
        groups.push(rep);
    }
    let passed = (samples - failed) as f64 >= cfg.pass_fraction * samples as f64;
    Ok(GradcheckReport {
        samples,
        failed,
        groups,
        passed,
    })
}
