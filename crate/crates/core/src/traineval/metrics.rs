use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, TrafficSeries, TrainingWindow};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::DstGcnn;
use crate::scalar::Scalar;

/// Truth magnitudes below this (raw units) are left out of MAPE.
pub const MAPE_MASK_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub mape_masked_fraction: f64,
}

fn check_frames(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<()> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len() || p.is_empty()) {
        return Err(Error::Data("prediction and truth frames do not align".into()));
    }
    if pred.is_empty() {
        return Err(Error::Data("no frames to score".into()));
    }
    Ok(())
}

/// Error within each timestep over its nodes, then the mean over timesteps.
pub fn per_step_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Metrics> {
    check_frames(pred, truth)?;
    let (mut rmse, mut mae, mut mape) = (0.0, 0.0, 0.0);
    let (mut mape_steps, mut masked, mut cells) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let n = p.len() as f64;
        let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
        rmse += (sq / n).sqrt();
        mae += p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let kept: Vec<f64> = p
            .iter()
            .zip(t)
            .filter(|(_, b)| b.abs() >= MAPE_MASK_THRESHOLD)
            .map(|(a, b)| (a - b).abs() / b.abs())
            .collect();
        masked += p.len() - kept.len();
        cells += p.len();
        if !kept.is_empty() {
            mape += kept.iter().sum::<f64>() / kept.len() as f64;
            mape_steps += 1;
        }
    }
    let steps = pred.len() as f64;
    Ok(Metrics {
        rmse: rmse / steps,
        mae: mae / steps,
        mape: if mape_steps == 0 { 0.0 } else { 100.0 * mape / mape_steps as f64 },
        mape_masked_fraction: masked as f64 / cells as f64,
    })
}

/// The same errors pooled over every cell at once.
pub fn flat_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Metrics> {
    check_frames(pred, truth)?;
    let p: Vec<f64> = pred.iter().flatten().copied().collect();
    let t: Vec<f64> = truth.iter().flatten().copied().collect();
    let m = per_step_metrics(&[p], &[t])?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: usize,
    /// Steps ahead of the anchor.
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub mape_masked_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub config_fingerprint: Option<String>,
    pub windows: usize,
    pub channels: Vec<ChannelMetrics>,
    /// Mean of the per-channel metrics.
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub runtime_seconds: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "name,channel,horizon,rmse,mae,mape,mape_masked_fraction"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for c in &self.channels {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.name, c.channel, c.horizon, c.rmse, c.mae, c.mape, c.mape_masked_fraction
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }
}

/// Scores raw-unit `C0 × N` predictions against truths, one pair per timestep.
pub fn reports_from_predictions<S: Scalar>(
    name: &str,
    preds: &[Tensor<S>],
    truths: &[Tensor<S>],
    horizon: usize,
    fingerprint: Option<String>,
    runtime_seconds: f64,
) -> Result<MetricReport> {
    let first = truths.first().ok_or_else(|| Error::Data("no windows to evaluate".into()))?;
    if first.rank() != 2 || preds.len() != truths.len() {
        return Err(Error::Data("predictions must be C0 × N, one per truth".into()));
    }
    let (c0, n) = (first.shape()[0], first.shape()[1]);
    let mut channels = Vec::with_capacity(c0);
    for c in 0..c0 {
        let frames = |ts: &[Tensor<S>]| -> Vec<Vec<f64>> {
            ts.iter()
                .map(|t| t.data()[c * n..(c + 1) * n].iter().map(|v| v.as_f64()).collect())
                .collect()
        };
        let m = per_step_metrics(&frames(preds), &frames(truths))?;
        channels.push(ChannelMetrics {
            channel: c,
            horizon,
            rmse: m.rmse,
            mae: m.mae,
            mape: m.mape,
            mape_masked_fraction: m.mape_masked_fraction,
        });
    }
    let mean = |f: fn(&ChannelMetrics) -> f64| channels.iter().map(f).sum::<f64>() / c0 as f64;
    Ok(MetricReport {
        name: name.to_string(),
        config_fingerprint: fingerprint,
        windows: truths.len(),
        rmse: mean(|c| c.rmse),
        mae: mean(|c| c.mae),
        mape: mean(|c| c.mape),
        channels,
        runtime_seconds,
    })
}

fn truths<S: Scalar>(windows: &[TrainingWindow<S>], stats: &NormStats) -> Result<Vec<Tensor<S>>> {
    windows.iter().map(|w| stats.denormalize(&w.target)).collect()
}

/// Target-frame metrics in raw units.
pub fn evaluate<S: Scalar>(model: &DstGcnn<S>, windows: &[TrainingWindow<S>], stats: &NormStats) -> Result<MetricReport> {
    let start = Instant::now();
    let mut preds = Vec::with_capacity(windows.len());
    for w in windows {
        preds.push(stats.denormalize(&model.predict_window(w)?.target)?);
    }
    let truth = truths(windows, stats)?;
    reports_from_predictions(
        "model",
        &preds,
        &truth,
        model.config().flow.horizon,
        Some(model.config().fingerprint()),
        start.elapsed().as_secs_f64(),
    )
}

/// Predicts the target frame as the anchor frame.
pub fn baseline_persistence<S: Scalar>(windows: &[TrainingWindow<S>], stats: &NormStats, horizon: usize) -> Result<MetricReport> {
    let start = Instant::now();
    let mut preds = Vec::with_capacity(windows.len());
    for w in windows {
        let s = w.x.shape();
        let (c0, tp, n) = (s[0], s[1], s[2]);
        let mut last = Tensor::zeros(&[c0, n]);
        for c in 0..c0 {
            for i in 0..n {
                last.set(&[c, i], w.x.get(&[c, tp - 1, i]));
            }
        }
        preds.push(stats.denormalize(&last)?);
    }
    let truth = truths(windows, stats)?;
    reports_from_predictions("persistence", &preds, &truth, horizon, None, start.elapsed().as_secs_f64())
}

/// Training-split mean volume per time-of-day slot.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    slots_per_day: usize,
    width: usize,
    means: Vec<Vec<f64>>,
}

impl HistoricalAverage {
    pub fn fit<S: Scalar>(traffic: &TrafficSeries<S>, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > traffic.steps() {
            return Err(Error::Data(format!("bad training range {train:?}")));
        }
        let spd = traffic.slots_per_day();
        let width = traffic.channels() * traffic.nodes();
        let mut sums = vec![vec![0.0; width]; spd];
        let mut counts = vec![0usize; spd];
        let mut all = vec![0.0; width];
        for t in train.clone() {
            let slot = traffic.slot_of(t);
            counts[slot] += 1;
            for (k, v) in traffic.frame(t).iter().enumerate() {
                sums[slot][k] += v.as_f64();
                all[k] += v.as_f64();
            }
        }
        let total = train.len() as f64;
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                if c == 0 {
                    all.iter().map(|v| v / total).collect()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        Ok(Self {
            slots_per_day: spd,
            width,
            means,
        })
    }

    pub fn predict(&self, slot: usize) -> &[f64] {
        &self.means[slot % self.slots_per_day]
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

pub fn baseline_historical_average<S: Scalar>(
    windows: &[TrainingWindow<S>],
    traffic: &TrafficSeries<S>,
    average: &HistoricalAverage,
    stats: &NormStats,
    horizon: usize,
) -> Result<MetricReport> {
    let start = Instant::now();
    let mut preds = Vec::with_capacity(windows.len());
    for w in windows {
        let step = w.anchor + horizon;
        if step >= traffic.steps() {
            return Err(Error::Data(format!("window target step {step} is outside the series")));
        }
        let p = average.predict(traffic.slot_of(step));
        preds.push(Tensor::new(w.target.shape().to_vec(), p.iter().map(|&v| S::lit(v)).collect())?);
    }
    let truth = truths(windows, stats)?;
    reports_from_predictions("historical_average", &preds, &truth, horizon, None, start.elapsed().as_secs_f64())
}

/// Mean absolute gap between predicted affinities and a reference matrix.
pub fn graph_recovery_error<S: Scalar>(model: &DstGcnn<S>, windows: &[TrainingWindow<S>], truth: &Tensor<S>) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows".into()));
    }
    let mut total = 0.0;
    for w in windows {
        let mut tape = crate::diffcore::Tape::new();
        let b = model.params().bind_constant(&mut tape);
        let a = model.graph_forward(&mut tape, &b, &w.s)?;
        let a = tape.value(a);
        if a.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                op: "graph_recovery_error",
                left: a.shape().to_vec(),
                right: truth.shape().to_vec(),
            });
        }
        total += a.data().iter().zip(truth.data()).map(|(x, y)| (*x - *y).abs().as_f64()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / windows.len() as f64)
}
