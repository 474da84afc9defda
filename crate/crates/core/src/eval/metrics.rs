use crate::error::{arg_err, shape_err, Error, Result};
use crate::field::Field;

/// Per-row weights `L(j) = cos(lat_j) / mean_j cos(lat_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights(Vec<f64>);

impl LatWeights {
    pub fn uniform(rows: usize) -> Self {
        Self(vec![1.0; rows])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weight of every scalar of an `(H, W, C)` field.
    pub fn expand(&self, w: usize, c: usize) -> Vec<f64> {
        self.0.iter().flat_map(|&l| std::iter::repeat_n(l, w * c)).collect()
    }
}

pub fn lat_weights(latitudes: &[f64]) -> Result<LatWeights> {
    if latitudes.is_empty() {
        return arg_err("no latitudes");
    }
    if let Some(bad) = latitudes.iter().find(|l| !(l.abs() < 90.0)) {
        return arg_err(format!("latitude {bad} is not strictly inside (-90, 90)"));
    }
    let cos: Vec<f64> = latitudes.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    Ok(LatWeights(cos.into_iter().map(|c| c / mean).collect()))
}

fn check_pair(pred: &Field, truth: &Field, w: &LatWeights) -> Result<[usize; 3]> {
    if pred.shape() != truth.shape() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()));
    }
    let Ok(dims) = <[usize; 3]>::try_from(pred.shape()) else {
        return shape_err(format!("metrics take (H, W, C) fields, got {:?}", pred.shape()));
    };
    if dims[0] != w.len() {
        return shape_err(format!("{} weights for {} rows", w.len(), dims[0]));
    }
    Ok(dims)
}

/// Per-channel `(1 / (H W)) sum_{j,k} L(j) (pred - truth)^2` of one sample.
pub fn weighted_mse(pred: &Field, truth: &Field, w: &LatWeights) -> Result<Vec<f64>> {
    let [h, wd, c] = check_pair(pred, truth, w)?;
    let mut acc = vec![0.0; c];
    let (p, t) = (pred.data(), truth.data());
    for j in 0..h {
        let l = w.0[j];
        for k in 0..wd {
            for ch in 0..c {
                let i = (j * wd + k) * c + ch;
                let d = p[i] - t[i];
                acc[ch] += l * d * d;
            }
        }
    }
    Ok(acc.into_iter().map(|s| s / (h * wd) as f64).collect())
}

/// `(1 / N) sum_samples sqrt(weighted MSE)` per channel.
pub fn weighted_rmse(preds: &[Field], truths: &[Field], w: &LatWeights) -> Result<Vec<f64>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return arg_err(format!("{} predictions for {} truths", preds.len(), truths.len()));
    }
    let mut out: Vec<f64> = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        let mse = weighted_mse(p, t, w)?;
        if out.is_empty() {
            out = vec![0.0; mse.len()];
        }
        for (o, m) in out.iter_mut().zip(mse) {
            *o += m.sqrt();
        }
    }
    let n = preds.len() as f64;
    Ok(out.into_iter().map(|s| s / n).collect())
}

/// Pooled ACC numerator and the two anomaly energies per channel.
pub fn acc_terms(preds: &[Field], truths: &[Field], clim: &Field, w: &LatWeights) -> Result<Vec<[f64; 3]>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return arg_err(format!("{} predictions for {} truths", preds.len(), truths.len()));
    }
    let mut out: Vec<[f64; 3]> = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        let [h, wd, c] = check_pair(p, t, w)?;
        if clim.shape() != p.shape() {
            return shape_err(format!("climatology {:?} for fields {:?}", clim.shape(), p.shape()));
        }
        if out.is_empty() {
            out = vec![[0.0; 3]; c];
        }
        for j in 0..h {
            let l = w.0[j];
            for k in 0..wd {
                for ch in 0..c {
                    let i = (j * wd + k) * c + ch;
                    let pa = p.data()[i] - clim.data()[i];
                    let ta = t.data()[i] - clim.data()[i];
                    out[ch][0] += l * pa * ta;
                    out[ch][1] += l * pa * pa;
                    out[ch][2] += l * ta * ta;
                }
            }
        }
    }
    Ok(out)
}

/// `sum L y' yhat' / sqrt(sum L yhat'^2 sum L y'^2)` pooled over all samples.
pub fn acc(preds: &[Field], truths: &[Field], clim: &Field, w: &LatWeights) -> Result<Vec<f64>> {
    acc_terms(preds, truths, clim, w)?
        .into_iter()
        .enumerate()
        .map(|(ch, [num, pp, tt])| {
            let den = (pp * tt).sqrt();
            if den > 0.0 {
                Ok((num / den).clamp(-1.0, 1.0))
            } else {
                Err(Error::UndefinedAcc(format!("channel {ch} has zero anomaly variance")))
            }
        })
        .collect()
}
