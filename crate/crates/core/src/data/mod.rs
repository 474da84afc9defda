//! Gridded datasets: the in-memory bundle, channel normalization, training
//! windows, the synthetic generator and the WFR1 container.

mod synth;
mod wfr;

use serde::{Deserialize, Serialize};

pub use synth::{generate, initial_state, latitudes, ridge, row_kernel, simulate, GenConfig, SpeedProfile};
pub use wfr::{from_wfr_bytes, load_wfr, save_wfr, to_wfr_bytes, WFR_MAGIC, WFR_VERSION};

use crate::error::{arg_err, shape_err, Result};
use crate::field::Field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub is_static: bool,
    pub mean: f64,
    pub std: f64,
}

/// Contiguous half-open time ranges `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

impl Splits {
    /// Chronological split of `n` snapshots by train/validation fractions;
    /// the remainder is the test split.
    pub fn fractions(n: usize, train: f64, val: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return arg_err(format!("split fractions {train} + {val} must lie in [0, 1]"));
        }
        let a = (n as f64 * train).round() as usize;
        let b = ((n as f64 * (train + val)).round() as usize).clamp(a, n);
        Ok(Self {
            train: [0, a],
            val: [a, b],
            test: [b, n],
        })
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let [s, e] = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        s..e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Time-ordered grid snapshots `(N, H, W, C)` with their metadata. Dynamic
/// channels come first, static channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    snapshots: Field,
    latitudes: Vec<f64>,
    channel_meta: Vec<ChannelMeta>,
    step_hours: f64,
    splits: Splits,
    normalized: bool,
}

impl DatasetBundle {
    /// Builds a physical-unit bundle. Values are rounded to the `f32`
    /// storage precision; channel statistics come from the train split.
    pub fn new(
        mut snapshots: Field,
        latitudes: Vec<f64>,
        channels: Vec<(String, bool)>,
        step_hours: f64,
        splits: Splits,
    ) -> Result<Self> {
        for v in snapshots.data_mut() {
            *v = *v as f32 as f64;
        }
        let meta = channels
            .into_iter()
            .map(|(name, is_static)| ChannelMeta {
                name,
                is_static,
                mean: 0.0,
                std: 0.0,
            })
            .collect();
        let mut b = Self::from_parts(snapshots, latitudes, meta, step_hours, splits)?;
        let range = b.splits.range(Split::Train);
        for c in 0..b.channels() {
            let (m, s) = channel_stats(&b.snapshots, c, range.clone());
            b.channel_meta[c].mean = m;
            b.channel_meta[c].std = s;
        }
        Ok(b)
    }

    pub(crate) fn from_parts(
        snapshots: Field,
        latitudes: Vec<f64>,
        channel_meta: Vec<ChannelMeta>,
        step_hours: f64,
        splits: Splits,
    ) -> Result<Self> {
        if snapshots.rank() != 4 {
            return shape_err(format!("snapshots must be (N, H, W, C), got {:?}", snapshots.shape()));
        }
        let [n, h, _, c] = snapshots.shape().try_into().unwrap();
        if latitudes.len() != h {
            return shape_err(format!("{} latitudes for {h} rows", latitudes.len()));
        }
        if channel_meta.len() != c {
            return shape_err(format!("{} channel descriptions for {c} channels", channel_meta.len()));
        }
        let first_static = channel_meta.iter().position(|m| m.is_static).unwrap_or(c);
        if channel_meta[first_static..].iter().any(|m| !m.is_static) {
            return arg_err("static channels must follow all dynamic channels");
        }
        if first_static == 0 {
            return arg_err("at least one dynamic channel is required");
        }
        let ordered = splits.train[0] == 0
            && splits.train[1] == splits.val[0]
            && splits.val[1] == splits.test[0]
            && splits.test[1] == n
            && splits.train[0] <= splits.train[1]
            && splits.val[0] <= splits.val[1]
            && splits.test[0] <= splits.test[1];
        if !ordered {
            return arg_err(format!("splits {splits:?} do not tile 0..{n}"));
        }
        if splits.train[1] == 0 {
            return arg_err("train split is empty");
        }
        let b = Self {
            snapshots,
            latitudes,
            channel_meta,
            step_hours,
            splits,
            normalized: false,
        };
        for ch in b.dyn_channels()..c {
            if !b.channel_is_time_invariant(ch) {
                return arg_err(format!("static channel {ch} varies in time"));
            }
        }
        Ok(b)
    }

    fn channel_is_time_invariant(&self, ch: usize) -> bool {
        let [n, h, w, c] = self.dims();
        let d = self.snapshots.data();
        let plane = h * w * c;
        (1..n).all(|t| (0..h * w).all(|s| d[t * plane + s * c + ch].to_bits() == d[s * c + ch].to_bits()))
    }

    pub fn snapshots(&self) -> &Field {
        &self.snapshots
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn channel_meta(&self) -> &[ChannelMeta] {
        &self.channel_meta
    }

    pub fn step_hours(&self) -> f64 {
        self.step_hours
    }

    pub fn splits(&self) -> Splits {
        self.splits
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `[N, H, W, C]`
    pub fn dims(&self) -> [usize; 4] {
        self.snapshots.shape().try_into().unwrap()
    }

    pub fn len(&self) -> usize {
        self.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.dims()[3]
    }

    pub fn dyn_channels(&self) -> usize {
        self.channel_meta.iter().filter(|m| !m.is_static).count()
    }

    pub fn static_channels(&self) -> usize {
        self.channels() - self.dyn_channels()
    }

    /// Snapshot `i` as `(H, W, C)`.
    pub fn snapshot(&self, i: usize) -> Field {
        self.snapshots.select(0, i)
    }

    fn scale_factors(&self) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(self.channels());
        for (i, m) in self.channel_meta.iter().enumerate() {
            if !(m.std > 0.0) {
                if m.is_static {
                    // A constant static channel is only centred.
                    out.push((m.mean, 1.0));
                    continue;
                }
                return arg_err(format!("dynamic channel {i} ({}) has zero standard deviation", m.name));
            }
            out.push((m.mean, m.std));
        }
        Ok(out)
    }

    /// Standardizes every channel with the stored train-split statistics.
    pub fn normalized(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let f = self.scale_factors()?;
        let c = self.channels();
        let mut out = self.clone();
        for (i, v) in out.snapshots.data_mut().iter_mut().enumerate() {
            let (m, s) = f[i % c];
            *v = (*v - m) / s;
        }
        out.normalized = true;
        Ok(out)
    }

    pub fn denormalized(&self) -> Result<Self> {
        if !self.normalized {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.snapshots = self.denormalize_field(&self.snapshots)?;
        out.normalized = false;
        Ok(out)
    }

    /// Maps a field whose trailing axis holds the first `k` channels from
    /// standardized to physical units.
    pub fn denormalize_field(&self, f: &Field) -> Result<Field> {
        let k = *f.shape().last().unwrap_or(&0);
        if k == 0 || k > self.channels() {
            return shape_err(format!("field {:?} does not carry bundle channels", f.shape()));
        }
        let sf = self.scale_factors()?;
        let mut out = f.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (m, s) = sf[i % k];
            *v = *v * s + m;
        }
        Ok(out)
    }

    /// Number of `(T -> 1)` windows that fit inside `split`.
    pub fn window_count(&self, split: Split, t: usize) -> usize {
        self.splits.range(split).len().saturating_sub(t)
    }

    /// Window starting at absolute snapshot `start`: inputs `start..start+T`,
    /// target `start+T` (dynamic channels only).
    pub fn window(&self, start: usize, t: usize) -> Result<Window> {
        let [n, h, w, c] = self.dims();
        if t == 0 || start + t >= n {
            return arg_err(format!("window {start}+{t} exceeds {n} snapshots"));
        }
        let plane = h * w * c;
        let x = Field::new(
            vec![t, h, w, c],
            self.snapshots.data()[start * plane..(start + t) * plane].to_vec(),
        )?;
        let y = self.target(start + t);
        Ok(Window { start, x, y })
    }

    /// Dynamic channels of snapshot `i` as `(H, W, C_dyn)`.
    pub fn target(&self, i: usize) -> Field {
        let [_, h, w, c] = self.dims();
        let cd = self.dyn_channels();
        let plane = h * w * c;
        let src = &self.snapshots.data()[i * plane..(i + 1) * plane];
        let data = src.chunks_exact(c).flat_map(|px| px[..cd].iter().copied()).collect();
        Field::new(vec![h, w, cd], data).expect("target extents")
    }

    /// All consecutive windows inside one split.
    pub fn windows(&self, split: Split, t: usize) -> Result<Windows<'_>> {
        let r = self.splits.range(split);
        if t == 0 || r.len() < t + 1 {
            return arg_err(format!(
                "{split:?} split has {} snapshots, a window needs {}",
                r.len(),
                t + 1
            ));
        }
        Ok(Windows {
            bundle: self,
            next: r.start,
            end: r.end - t,
            t,
        })
    }
}

/// Train-split mean and population standard deviation of one channel.
fn channel_stats(f: &Field, ch: usize, range: std::ops::Range<usize>) -> (f64, f64) {
    let [_, h, w, c] = f.shape().try_into().unwrap();
    let plane = h * w * c;
    let d = f.data();
    let vals = || range.clone().flat_map(move |t| (0..h * w).map(move |s| d[t * plane + s * c + ch]));
    let n = (range.len() * h * w) as f64;
    let mean = vals().sum::<f64>() / n;
    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Absolute index of the first input snapshot.
    pub start: usize,
    /// `(T, H, W, C)`
    pub x: Field,
    /// `(H, W, C_dyn)`
    pub y: Field,
}

pub struct Windows<'a> {
    bundle: &'a DatasetBundle,
    next: usize,
    end: usize,
    t: usize,
}

impl Iterator for Windows<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.next >= self.end {
            return None;
        }
        let w = self.bundle.window(self.next, self.t).ok();
        self.next += 1;
        w
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.end - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Windows<'_> {}
