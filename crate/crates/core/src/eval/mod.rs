//! Autoregressive rollout and latitude-weighted verification.

mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metrics::{acc, acc_terms, lat_weights, weighted_mse, weighted_rmse, LatWeights};

use crate::data::{DatasetBundle, Split};
use crate::error::{arg_err, shape_err, Result};
use crate::field::Field;
use crate::model::{forward, ModelParams};

/// Lead-indexed predictions `Y_hat_{T+1..T+n}`, each `(H, W, C_dyn)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub model_id: String,
    pub init_index: Option<usize>,
    pub leads: Vec<Field>,
}

/// Slides the `(T, H, W, C)` window forward `n` times with `step`, which
/// maps a window to the next `(H, W, C_dyn)` state. Static channels of the
/// newest frame are copied from the last observed frame.
pub fn rollout_with(
    x0: &Field,
    n: usize,
    dyn_channels: usize,
    mut step: impl FnMut(&Field) -> Result<Field>,
) -> Result<Vec<Field>> {
    if n == 0 {
        return arg_err("rollout needs at least one lead");
    }
    let Ok([t, h, w, c]) = <[usize; 4]>::try_from(x0.shape()) else {
        return shape_err(format!("rollout window must be (T, H, W, C), got {:?}", x0.shape()));
    };
    if dyn_channels == 0 || dyn_channels > c {
        return arg_err(format!("{dyn_channels} dynamic channels of {c}"));
    }
    let plane = h * w * c;
    let statics = x0.select(0, t - 1);
    let mut window = x0.data().to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y = step(&Field::new(vec![t, h, w, c], window.clone())?)?;
        if y.shape() != [h, w, dyn_channels] {
            return shape_err(format!("step returned {:?}", y.shape()));
        }
        window.drain(..plane);
        for (px, st) in y.data().chunks_exact(dyn_channels).zip(statics.data().chunks_exact(c)) {
            window.extend_from_slice(px);
            window.extend_from_slice(&st[dyn_channels..]);
        }
        out.push(y);
    }
    Ok(out)
}

pub fn rollout(x0: &Field, params: &ModelParams, n: usize) -> Result<ForecastSeries> {
    let leads = rollout_with(x0, n, params.config().dyn_channels, |w| forward(w, params))?;
    Ok(ForecastSeries {
        model_id: "model".into(),
        init_index: None,
        leads,
    })
}

/// Train-split time mean of the dynamic channels, in the bundle's units.
pub fn climatology(bundle: &DatasetBundle) -> Field {
    let r = bundle.splits().range(Split::Train);
    let n = r.len() as f64;
    let mut acc = bundle.target(r.start).scale(0.0);
    for i in r {
        for (a, v) in acc.data_mut().iter_mut().zip(bundle.target(i).data()) {
            *a += v;
        }
    }
    acc.map(|v| v / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Model,
    Persistence,
    Climatology,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::Persistence => "persistence",
            Source::Climatology => "climatology",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Source::Model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: Source,
    pub lead: usize,
    pub channel: String,
    pub rmse: f64,
    /// Zero when the pooled anomaly variance vanishes (see `acc_defined`).
    pub acc: f64,
    pub acc_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub leads: usize,
    pub init_times: usize,
    pub channels: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn get(&self, source: Source, lead: usize, channel: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.lead == lead && r.channel == channel)
    }

    /// Channel-mean RMSE of one source at one lead.
    pub fn mean_rmse(&self, source: Source, lead: usize) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.source == source && r.lead == lead)
            .map(|r| r.rmse)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_acc(&self, source: Source, lead: usize) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.source == source && r.lead == lead)
            .map(|r| r.acc)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,lead,channel,rmse,acc,acc_defined,is_baseline\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.9e},{:.9e},{},{}",
                r.source.name(),
                r.lead,
                r.channel,
                r.rmse,
                r.acc,
                r.acc_defined,
                r.source.is_baseline()
            );
        }
        s
    }

    /// One row per source; per channel, an RMSE and an ACC column per lead.
    pub fn to_table(&self) -> String {
        let mut header = vec!["source".to_string()];
        for ch in &self.channels {
            for l in 1..=self.leads {
                header.push(format!("{ch} RMSE({l})"));
                header.push(format!("{ch} ACC({l})"));
            }
        }
        let mut lines = vec![header];
        for src in [Source::Model, Source::Persistence, Source::Climatology] {
            if !self.rows.iter().any(|r| r.source == src) {
                continue;
            }
            let mut line = vec![src.name().to_string()];
            for ch in &self.channels {
                for l in 1..=self.leads {
                    match self.get(src, l, ch) {
                        Some(r) => {
                            line.push(format!("{:.4}", r.rmse));
                            line.push(if r.acc_defined { format!("{:.3}", r.acc) } else { "-".into() });
                        }
                        None => line.extend(["".into(), "".into()]),
                    }
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (n, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", cells.join(" | ").trim_end());
            if n == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(s, "{}", rule.join("-+-"));
            }
        }
        s
    }
}

/// Which forecasts an evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub leads: usize,
    pub max_inits: Option<usize>,
    pub baselines: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            leads: 5,
            max_inits: None,
            baselines: true,
        }
    }
}

/// Test-split init times that leave room for `leads` forecasts.
pub fn init_times(bundle: &DatasetBundle, t: usize, leads: usize) -> Vec<usize> {
    let r = bundle.splits().range(Split::Test);
    if r.len() < t + leads {
        return Vec::new();
    }
    (r.start..=r.end - t - leads).collect()
}

struct Scored {
    preds: Vec<Vec<Field>>,
    truths: Vec<Vec<Field>>,
}

fn score(
    report: &mut EvalReport,
    source: Source,
    s: &Scored,
    clim: &Field,
    w: &LatWeights,
) -> Result<()> {
    for lead in 0..report.leads {
        let p: Vec<Field> = s.preds.iter().map(|v| v[lead].clone()).collect();
        let t: Vec<Field> = s.truths.iter().map(|v| v[lead].clone()).collect();
        let rmse = weighted_rmse(&p, &t, w)?;
        let terms = acc_terms(&p, &t, clim, w)?;
        for (ch, name) in report.channels.iter().enumerate() {
            let [num, pp, tt] = terms[ch];
            let den = (pp * tt).sqrt();
            let defined = den > 0.0;
            report.rows.push(ReportRow {
                source,
                lead: lead + 1,
                channel: name.clone(),
                rmse: rmse[ch],
                acc: if defined { (num / den).clamp(-1.0, 1.0) } else { 0.0 },
                acc_defined: defined,
            });
        }
    }
    Ok(())
}

/// Scores any `(T, H, W, C) -> (H, W, C_dyn)` forecaster, expressed in
/// normalized units, on every usable test init time. Metrics are computed in
/// physical units.
pub fn evaluate_with(
    bundle: &DatasetBundle,
    t: usize,
    opts: EvalOptions,
    mut step: impl FnMut(&Field) -> Result<Field>,
) -> Result<EvalReport> {
    let phys = bundle.denormalized()?;
    let norm = bundle.normalized()?;
    let cd = phys.dyn_channels();
    let mut inits = init_times(&phys, t, opts.leads);
    if let Some(m) = opts.max_inits {
        inits.truncate(m);
    }
    if inits.is_empty() {
        return arg_err(format!("test split is too short for T={t} and {} leads", opts.leads));
    }
    let w = lat_weights(phys.latitudes())?;
    let clim = climatology(&phys);
    let mut report = EvalReport {
        leads: opts.leads,
        init_times: inits.len(),
        channels: phys.channel_meta()[..cd].iter().map(|m| m.name.clone()).collect(),
        rows: Vec::new(),
    };
    let truths: Vec<Vec<Field>> = inits
        .iter()
        .map(|&i| (0..opts.leads).map(|k| phys.target(i + t + k)).collect())
        .collect();
    let mut preds = Vec::with_capacity(inits.len());
    for &i in &inits {
        let x0 = norm.window(i, t)?.x;
        let leads = rollout_with(&x0, opts.leads, cd, &mut step)?;
        preds.push(
            leads
                .iter()
                .map(|f| phys.denormalize_field(f))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    score(&mut report, Source::Model, &Scored { preds, truths: truths.clone() }, &clim, &w)?;
    if opts.baselines {
        let persist = inits
            .iter()
            .map(|&i| vec![phys.target(i + t - 1); opts.leads])
            .collect();
        score(&mut report, Source::Persistence, &Scored { preds: persist, truths: truths.clone() }, &clim, &w)?;
        let climo = inits.iter().map(|_| vec![clim.clone(); opts.leads]).collect();
        score(&mut report, Source::Climatology, &Scored { preds: climo, truths }, &clim, &w)?;
    }
    Ok(report)
}

pub fn evaluate(params: &ModelParams, bundle: &DatasetBundle, opts: EvalOptions) -> Result<EvalReport> {
    check_compatible(params, bundle)?;
    evaluate_with(bundle, params.config().input_steps, opts, |w| forward(w, params))
}

/// Checkpoint grid and channels must match the dataset.
pub fn check_compatible(params: &ModelParams, bundle: &DatasetBundle) -> Result<()> {
    let c = params.config();
    let [_, h, w, ch] = bundle.dims();
    if (c.height, c.width, c.channels(), c.dyn_channels) != (h, w, ch, bundle.dyn_channels()) {
        return Err(crate::Error::ConfigMismatch(format!(
            "model expects {}x{} with {}+{} channels, dataset is {h}x{w} with {}+{}",
            c.height,
            c.width,
            c.dyn_channels,
            c.static_channels,
            bundle.dyn_channels(),
            bundle.static_channels()
        )));
    }
    Ok(())
}
