//! Series containers, normalization, splitting and window assembly.

mod io;
mod synth;

use std::ops::Range;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

pub use io::{load_series, write_regime_labels, write_travel_csv, write_volume_csv, DatasetSchema, LoadReport};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphops::{affinity_from_travel_time, median_travel_time, AffinityMatrix, TravelTimeMatrix};
use crate::model::AuxiliaryCodes;
use crate::scalar::Scalar;

/// Volumes in raw units, shape `steps × C0 × N`, on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries<S> {
    volumes: Tensor<S>,
    timestamps: Vec<DateTime<Utc>>,
    slot_minutes: u32,
}

impl<S: Scalar> TrafficSeries<S> {
    pub fn new(volumes: Tensor<S>, timestamps: Vec<DateTime<Utc>>, slot_minutes: u32) -> Result<Self> {
        if volumes.rank() != 3 {
            return Err(Error::Data(format!("volumes must be steps × C0 × N, got {:?}", volumes.shape())));
        }
        if volumes.shape()[0] != timestamps.len() {
            return Err(Error::Data(format!(
                "{} volume frames but {} timestamps",
                volumes.shape()[0],
                timestamps.len()
            )));
        }
        if slot_minutes == 0 || 1440 % slot_minutes != 0 {
            return Err(Error::Data(format!("slot length {slot_minutes} min must divide a day")));
        }
        let step = chrono::Duration::minutes(i64::from(slot_minutes));
        if let Some(w) = timestamps.windows(2).find(|w| w[1] - w[0] != step) {
            return Err(Error::Data(format!("timestamps {} and {} are not one slot apart", w[0], w[1])));
        }
        if let Some(v) = volumes.data().iter().find(|v| !(**v >= S::zero()) || !v.is_finite()) {
            return Err(Error::Data(format!("volumes must be finite and non-negative, found {v}")));
        }
        Ok(Self {
            volumes,
            timestamps,
            slot_minutes,
        })
    }

    pub fn steps(&self) -> usize {
        self.volumes.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.volumes.shape()[1]
    }

    pub fn nodes(&self) -> usize {
        self.volumes.shape()[2]
    }

    pub fn slot_minutes(&self) -> u32 {
        self.slot_minutes
    }

    pub fn slots_per_day(&self) -> usize {
        (1440 / self.slot_minutes) as usize
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn volumes(&self) -> &Tensor<S> {
        &self.volumes
    }

    pub fn value(&self, t: usize, c: usize, n: usize) -> S {
        self.volumes.get(&[t, c, n])
    }

    /// Frame `t` as a `C0 × N` slice.
    pub fn frame(&self, t: usize) -> &[S] {
        let w = self.channels() * self.nodes();
        &self.volumes.data()[t * w..(t + 1) * w]
    }

    /// Time-of-day slot for step `t`.
    pub fn slot_of(&self, t: usize) -> usize {
        let ts = self.timestamps[t];
        ((ts.hour() * 60 + ts.minute()) / self.slot_minutes) as usize
    }

    /// One-hot context codes for every step.
    pub fn codes(&self) -> Result<Vec<AuxiliaryCodes>> {
        let spd = self.slots_per_day();
        (0..self.steps())
            .map(|t| {
                let wd = self.timestamps[t].weekday().num_days_from_monday() as usize;
                AuxiliaryCodes::from_indices(self.slot_of(t), spd, wd, None)
            })
            .collect()
    }
}

/// One travel-time matrix per step, aligned with a [`TrafficSeries`].
#[derive(Clone, Debug, PartialEq)]
pub struct TravelTimeSeries<S> {
    times: Vec<TravelTimeMatrix<S>>,
}

impl<S: Scalar> TravelTimeSeries<S> {
    pub fn new(times: Vec<TravelTimeMatrix<S>>) -> Result<Self> {
        let n = times.first().map(|m| m.nodes()).unwrap_or(0);
        if times.iter().any(|m| m.nodes() != n) {
            return Err(Error::Data("travel-time matrices have differing node counts".into()));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len()
    }

    pub fn nodes(&self) -> usize {
        self.times.first().map_or(0, |m| m.nodes())
    }

    pub fn matrix(&self, t: usize) -> &TravelTimeMatrix<S> {
        &self.times[t]
    }

    pub fn matrices(&self) -> &[TravelTimeMatrix<S>] {
        &self.times
    }

    /// Median finite off-diagonal travel time over `range`.
    pub fn median(&self, range: Range<usize>) -> Option<S> {
        median_travel_time(&self.times[range])
    }

    pub fn affinities(&self, sigma: S) -> Result<Vec<AffinityMatrix<S>>> {
        self.times.iter().map(|t| affinity_from_travel_time(t, sigma)).collect()
    }
}

/// Per-(channel, node) min-max statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: usize,
    pub nodes: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Cells whose training range is zero; they normalize to 0.
    pub zero_range: Vec<bool>,
}

impl NormStats {
    /// Fits on frames `range` of a `steps × C × N` tensor.
    pub fn fit<S: Scalar>(volumes: &Tensor<S>, range: Range<usize>) -> Result<Self> {
        let s = volumes.shape();
        if s.len() != 3 || range.is_empty() || range.end > s[0] {
            return Err(Error::Data(format!("cannot fit statistics on frames {range:?} of {s:?}")));
        }
        let w = s[1] * s[2];
        let mut min = vec![f64::INFINITY; w];
        let mut max = vec![f64::NEG_INFINITY; w];
        for t in range {
            for (i, v) in volumes.data()[t * w..(t + 1) * w].iter().enumerate() {
                let v = v.as_f64();
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        let zero_range = min.iter().zip(&max).map(|(a, b)| b - a == 0.0).collect();
        Ok(Self {
            channels: s[1],
            nodes: s[2],
            min,
            max,
            zero_range,
        })
    }

    pub fn normalize_value(&self, cell: usize, v: f64) -> f64 {
        if self.zero_range[cell] {
            0.0
        } else {
            (v - self.min[cell]) / (self.max[cell] - self.min[cell])
        }
    }

    pub fn denormalize_value(&self, cell: usize, v: f64) -> f64 {
        if self.zero_range[cell] {
            self.min[cell]
        } else {
            v * (self.max[cell] - self.min[cell]) + self.min[cell]
        }
    }

    fn map<S: Scalar>(&self, t: &Tensor<S>, f: impl Fn(usize, f64) -> f64) -> Result<Tensor<S>> {
        let w = self.channels * self.nodes;
        if t.len() % w != 0 || t.shape().last() != Some(&self.nodes) {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                left: vec![self.channels, self.nodes],
                right: t.shape().to_vec(),
            });
        }
        let data = t.data().iter().enumerate().map(|(i, &v)| S::lit(f(i % w, v.as_f64()))).collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Maps any tensor whose trailing extents flatten to `C × N` frames.
    pub fn normalize<S: Scalar>(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(t, |c, v| self.normalize_value(c, v))
    }

    pub fn denormalize<S: Scalar>(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(t, |c, v| self.denormalize_value(c, v))
    }

    /// Denormalizes a window-layout `C × T × N` tensor.
    pub fn denormalize_steps<S: Scalar>(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        let s = t.shape();
        if s.len() != 3 || s[0] != self.channels || s[2] != self.nodes {
            return Err(Error::ShapeMismatch {
                op: "denormalize_steps",
                left: vec![self.channels, 0, self.nodes],
                right: s.to_vec(),
            });
        }
        let (steps, n) = (s[1], s[2]);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let cell = (i / (steps * n)) * n + i % n;
                S::lit(self.denormalize_value(cell, v.as_f64()))
            })
            .collect();
        Tensor::new(s.to_vec(), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous split by time.
pub fn split_ranges(steps: usize, f: SplitFractions) -> Result<Splits> {
    let total = f.train + f.validation + f.test;
    if [f.train, f.validation, f.test].iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 || f.train == 0.0 {
        return Err(Error::Config(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    let train_end = (steps as f64 * f.train).round() as usize;
    let val_end = (steps as f64 * (f.train + f.validation)).round() as usize;
    Ok(Splits {
        train: 0..train_end,
        validation: train_end..val_end,
        test: val_end..steps,
    })
}

/// One supervised sample anchored at step `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow<S> {
    pub anchor: usize,
    /// `C0 × T_P × N`, frames `anchor − T_P + 1 ..= anchor`.
    pub x: Tensor<S>,
    /// `T_P × N × N` affinities over the same frames.
    pub s: Tensor<S>,
    /// `C0 × (T_F − 1) × N`, frames `anchor + 1 .. anchor + T_F`; absent when `T_F = 1`.
    pub y: Option<Tensor<S>>,
    /// `C0 × N`, frame `anchor + T_F`.
    pub target: Tensor<S>,
    /// Mean affinity over frames `anchor − T_P + 1 ..= anchor + T_F`.
    pub abar: Tensor<S>,
    pub codes: AuxiliaryCodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

pub fn window_count(len: usize, spec: WindowSpec) -> usize {
    if len < spec.history + spec.horizon || spec.stride == 0 {
        0
    } else {
        (len - spec.history - spec.horizon) / spec.stride + 1
    }
}

fn frames_to_cpn<S: Scalar>(flows: &Tensor<S>, start: usize, count: usize) -> Tensor<S> {
    let (c, n) = (flows.shape()[1], flows.shape()[2]);
    let mut out = Tensor::zeros(&[c, count, n]);
    for p in 0..count {
        for ci in 0..c {
            for ni in 0..n {
                out.set(&[ci, p, ni], flows.get(&[start + p, ci, ni]));
            }
        }
    }
    out
}

/// Incremental mean, exact when every matrix is identical.
fn running_mean<S: Scalar>(mats: &[Tensor<S>], n: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(&[n, n]);
    for (k, a) in mats.iter().enumerate() {
        let w = S::one() / S::lit((k + 1) as f64);
        for (mv, &av) in m.data_mut().iter_mut().zip(a.data()) {
            *mv += (av - *mv) * w;
        }
    }
    m
}

/// Builds every window that fits inside `range`.
///
/// `flows` is `steps × C0 × N` (already normalized), `affinities` and
/// `codes` are per step.
pub fn make_windows<S: Scalar>(
    flows: &Tensor<S>,
    affinities: &[Tensor<S>],
    codes: &[AuxiliaryCodes],
    spec: WindowSpec,
    range: Range<usize>,
) -> Result<Vec<TrainingWindow<S>>> {
    let steps = flows.shape().first().copied().unwrap_or(0);
    if flows.rank() != 3 || affinities.len() != steps || codes.len() != steps || range.end > steps {
        return Err(Error::Data(format!(
            "inconsistent series lengths: flows {:?}, {} affinities, {} codes, range {range:?}",
            flows.shape(),
            affinities.len(),
            codes.len()
        )));
    }
    if spec.history == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config(format!("history, horizon and stride must be >= 1, got {spec:?}")));
    }
    let len = range.len();
    if len < spec.history + spec.horizon {
        return Err(Error::Data(format!(
            "series of {len} steps is shorter than history {} + horizon {}",
            spec.history, spec.horizon
        )));
    }
    let (c, n) = (flows.shape()[1], flows.shape()[2]);
    let count = window_count(len, spec);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = range.start + spec.history - 1 + i * spec.stride;
        let first = t + 1 - spec.history;
        let x = frames_to_cpn(flows, first, spec.history);
        let y = (spec.horizon > 1).then(|| frames_to_cpn(flows, t + 1, spec.horizon - 1));
        let target = frames_to_cpn(flows, t + spec.horizon, 1).reshape(&[c, n])?;
        let mut s = Vec::with_capacity(spec.history * n * n);
        for a in &affinities[first..=t] {
            s.extend_from_slice(a.data());
        }
        let s = Tensor::new(vec![spec.history, n, n], s)?;
        let span = &affinities[first..=t + spec.horizon];
        let abar = running_mean(span, n);
        out.push(TrainingWindow {
            anchor: t,
            x,
            s,
            y,
            target,
            abar,
            codes: codes[t].clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    pub history: usize,
    pub horizon: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub split: SplitFractions,
    /// Affinity bandwidth; the training median travel time when `None`.
    pub sigma: Option<f64>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            history: 12,
            horizon: 3,
            train_stride: 1,
            eval_stride: 1,
            split: SplitFractions::default(),
            sigma: None,
        }
    }
}

/// A dataset normalized and cut into per-split windows.
#[derive(Clone, Debug)]
pub struct PreparedDataset<S> {
    pub traffic: TrafficSeries<S>,
    pub stats: NormStats,
    pub sigma: S,
    pub splits: Splits,
    /// Normalized flows, `steps × C0 × N`.
    pub flows: Tensor<S>,
    pub affinities: Vec<Tensor<S>>,
    /// Mean training-split affinity, the fixed graph for static configurations.
    pub train_affinity: AffinityMatrix<S>,
    pub train: Vec<TrainingWindow<S>>,
    pub validation: Vec<TrainingWindow<S>>,
    pub test: Vec<TrainingWindow<S>>,
}

pub fn prepare_dataset<S: Scalar>(
    traffic: &TrafficSeries<S>,
    travel: &TravelTimeSeries<S>,
    opts: &PrepareOptions,
) -> Result<PreparedDataset<S>> {
    if travel.steps() != traffic.steps() || travel.nodes() != traffic.nodes() {
        return Err(Error::Data(format!(
            "travel times ({} steps, {} nodes) do not align with volumes ({} steps, {} nodes)",
            travel.steps(),
            travel.nodes(),
            traffic.steps(),
            traffic.nodes()
        )));
    }
    let splits = split_ranges(traffic.steps(), opts.split)?;
    let stats = NormStats::fit(traffic.volumes(), splits.train.clone())?;
    let flows = stats.normalize(traffic.volumes())?;
    let sigma = match opts.sigma {
        Some(s) => S::lit(s),
        None => travel
            .median(splits.train.clone())
            .ok_or_else(|| Error::Data("no finite off-diagonal travel times in the training split".into()))?,
    };
    if !(sigma > S::zero()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let affinities: Vec<Tensor<S>> = travel.affinities(sigma)?.into_iter().map(|a| a.into_tensor()).collect();
    let n = traffic.nodes();
    let mean = running_mean(&affinities[splits.train.clone()], n);
    let train_affinity = AffinityMatrix::from_tensor(mean, sigma)?;
    let codes = traffic.codes()?;
    let spec = |stride| WindowSpec {
        history: opts.history,
        horizon: opts.horizon,
        stride,
    };
    let cut = |range: Range<usize>, stride| -> Result<Vec<TrainingWindow<S>>> {
        if range.len() < opts.history + opts.horizon {
            Ok(Vec::new())
        } else {
            make_windows(&flows, &affinities, &codes, spec(stride), range)
        }
    };
    let train = cut(splits.train.clone(), opts.train_stride)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "training split of {} steps is too short for history {} + horizon {}",
            splits.train.len(),
            opts.history,
            opts.horizon
        )));
    }
    let validation = cut(splits.validation.clone(), opts.eval_stride)?;
    let test = cut(splits.test.clone(), opts.eval_stride)?;
    Ok(PreparedDataset {
        traffic: traffic.clone(),
        stats,
        sigma,
        splits,
        flows,
        affinities,
        train_affinity,
        train,
        validation,
        test,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use chrono::{DateTime, TimeZone, Utc};

    /// Uniform grid starting on a Monday at midnight.
    pub(crate) fn stamps(n: usize, slot: u32) -> Vec<DateTime<Utc>> {
        let t0 = Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap();
        (0..n).map(|i| t0 + chrono::Duration::minutes(i as i64 * i64::from(slot))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::stamps;
    use super::*;

    #[test]
    fn min_max_examples() {
        let t = Tensor::<f64>::from_f64(&[3, 1, 1], &[0.0, 5.0, 10.0]).unwrap();
        let st = NormStats::fit(&t, 0..3).unwrap();
        assert_eq!(st.normalize(&t).unwrap().data(), &[0.0, 0.5, 1.0]);
        let c = Tensor::<f64>::from_f64(&[3, 1, 1], &[7.0, 7.0, 7.0]).unwrap();
        let st = NormStats::fit(&c, 0..3).unwrap();
        assert_eq!(st.normalize(&c).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert!(st.zero_range[0]);
        assert_eq!(st.denormalize(&st.normalize(&c).unwrap()).unwrap().data(), &[7.0, 7.0, 7.0]);
    }

    fn series(steps: usize, c: usize, n: usize) -> (Tensor<f64>, Vec<Tensor<f64>>, Vec<AuxiliaryCodes>) {
        let flows = Tensor::new(vec![steps, c, n], (0..steps * c * n).map(|i| i as f64).collect()).unwrap();
        let aff = (0..steps).map(|t| Tensor::full(&[n, n], 1.0 / (1.0 + t as f64))).collect();
        let codes = (0..steps)
            .map(|t| AuxiliaryCodes::from_indices(t % 4, 4, 0, None).unwrap())
            .collect();
        (flows, aff, codes)
    }

    #[test]
    fn window_counts() {
        let (f, a, c) = series(10, 1, 2);
        let spec = WindowSpec {
            history: 4,
            horizon: 2,
            stride: 1,
        };
        assert_eq!(make_windows(&f, &a, &c, spec, 0..10).unwrap().len(), 5);
        assert_eq!(make_windows(&f, &a, &c, spec, 0..6).unwrap().len(), 1);
        assert!(make_windows(&f, &a, &c, spec, 0..5).is_err());
        let spec3 = WindowSpec { stride: 3, ..spec };
        assert_eq!(make_windows(&f, &a, &c, spec3, 0..10).unwrap().len(), 2);
    }

    #[test]
    fn window_contents_align() {
        let (f, a, c) = series(12, 2, 3);
        let spec = WindowSpec {
            history: 3,
            horizon: 3,
            stride: 2,
        };
        for w in make_windows(&f, &a, &c, spec, 1..12).unwrap() {
            let t = w.anchor;
            for p in 0..3 {
                for ch in 0..2 {
                    for n in 0..3 {
                        assert_eq!(w.x.get(&[ch, p, n]), f.get(&[t - 2 + p, ch, n]));
                    }
                }
            }
            let y = w.y.as_ref().unwrap();
            for j in 0..2 {
                assert_eq!(y.get(&[1, j, 2]), f.get(&[t + 1 + j, 1, 2]));
            }
            assert_eq!(w.target.get(&[0, 1]), f.get(&[t + 3, 0, 1]));
            let mean: f64 = (t - 2..=t + 3).map(|k| 1.0 / (1.0 + k as f64)).sum::<f64>() / 6.0;
            assert!((w.abar.get(&[0, 1]) - mean).abs() < 1e-15);
            assert_eq!(w.s.get(&[2, 1, 1]), 1.0 / (1.0 + t as f64));
            assert_eq!(w.codes, c[t]);
        }
    }

    #[test]
    fn abar_of_constant_affinity_is_exact() {
        let (f, _, c) = series(8, 1, 2);
        let a = vec![Tensor::from_f64(&[2, 2], &[1.0, 0.3, 0.3, 1.0]).unwrap(); 8];
        let spec = WindowSpec {
            history: 3,
            horizon: 2,
            stride: 1,
        };
        for w in make_windows(&f, &a, &c, spec, 0..8).unwrap() {
            assert_eq!(w.abar, a[0]);
        }
    }

    #[test]
    fn split_is_contiguous() {
        let s = split_ranges(100, SplitFractions::default()).unwrap();
        assert_eq!((s.train, s.validation, s.test), (0..70, 70..80, 80..100));
        assert!(split_ranges(
            100,
            SplitFractions {
                train: 0.5,
                validation: 0.1,
                test: 0.1
            }
        )
        .is_err());
    }

    #[test]
    fn traffic_series_rejects_gaps_and_negatives() {
        let v = Tensor::<f64>::zeros(&[3, 1, 2]);
        let mut ts = stamps(3, 15);
        assert!(TrafficSeries::new(v.clone(), ts.clone(), 15).is_ok());
        ts[2] += chrono::Duration::minutes(15);
        assert!(TrafficSeries::new(v.clone(), ts, 15).is_err());
        let neg = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap();
        assert!(TrafficSeries::new(neg, stamps(1, 15), 15).is_err());
    }

    #[test]
    fn codes_follow_timestamps() {
        let v = Tensor::<f64>::zeros(&[100, 1, 1]);
        let s = TrafficSeries::new(v, stamps(100, 15), 15).unwrap();
        let codes = s.codes().unwrap();
        assert_eq!(codes[0].time_of_day(), 0);
        assert_eq!(codes[5].time_of_day(), 5);
        assert_eq!(codes[97].time_of_day(), 1);
        assert_eq!(codes[0].day_of_week(), 0);
        assert_eq!(codes[97].day_of_week(), 1);
    }
}
