//! Training loop, metrics, baselines, the ablation runner and the
//! factorization benchmark.

mod ablation;
mod bench;
mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_configs, ablation_run, AblationRow, AblationTable, ABLATION_NAMES};
pub use bench::{factorization_benchmark, joint_dense_conv, BenchConfig, BenchRow};
pub use metrics::{
    baseline_historical_average, baseline_persistence, evaluate, flat_metrics, graph_recovery_error,
    per_step_metrics, reports_from_predictions, ChannelMetrics, HistoricalAverage, MetricReport, Metrics,
    MAPE_MASK_THRESHOLD,
};

use crate::data::TrainingWindow;
use crate::diffcore::{OptimizerState, ParamGrads, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::DstGcnn;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Last joint epoch (1-based) trained at `lr_phase1`.
    pub lr_step_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            joint_epochs: 100,
            lr_phase1: 1e-2,
            lr_phase2: 1e-3,
            lr_step_epoch: 50,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Learning rate of 1-based joint epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_step_epoch {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_phase1 >= 0.0 && self.lr_phase2 >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-window objective seen during the epoch.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport<S> {
    pub curve: Vec<EpochRecord>,
    /// Parameters at the joint epoch with the lowest validation loss.
    pub best_params: Option<ParamStore<S>>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

impl<S> TrainReport<S> {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.train_loss)
    }

    /// Per-epoch CSV for plotting.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("phase,epoch,learning_rate,train_loss,validation_loss\n");
        for r in &self.curve {
            let v = r.validation_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.phase.name(), r.epoch, r.learning_rate, r.train_loss, v));
        }
        out
    }
}

fn window_objective<S: Scalar>(
    model: &DstGcnn<S>,
    window: &TrainingWindow<S>,
    phase: Phase,
    with_grad: bool,
) -> Result<(f64, Option<ParamGrads<S>>)> {
    let mut tape = Tape::new();
    let bound = if with_grad {
        model.params().bind(&mut tape)
    } else {
        model.params().bind_constant(&mut tape)
    };
    let loss = match phase {
        Phase::Pretrain => model.graph_loss(&mut tape, &bound, window)?,
        Phase::Joint => model.loss(&mut tape, &bound, window)?.total,
    };
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() || !with_grad {
        return Ok((value, None));
    }
    let mut g = tape.backward(loss)?;
    Ok((value, Some(bound.gradients(&mut g))))
}

/// Mean objective over `windows` without gradients.
pub fn mean_loss<S: Scalar>(model: &DstGcnn<S>, windows: &[TrainingWindow<S>], phase: Phase) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to score".into()));
    }
    let mut total = 0.0;
    for w in windows {
        total += window_objective(model, w, phase, false)?.0;
    }
    Ok(total / windows.len() as f64)
}

/// Gradient of the batch-mean objective.
pub fn batch_gradients<S: Scalar>(
    model: &DstGcnn<S>,
    batch: &[&TrainingWindow<S>],
    phase: Phase,
    epoch: usize,
    batch_index: usize,
) -> Result<(f64, ParamGrads<S>)> {
    let mut acc = ParamGrads::empty(model.params().len());
    let mut total = 0.0;
    for w in batch {
        let non_finite = || Error::NonFiniteLoss {
            phase: phase.name(),
            epoch,
            batch: batch_index,
        };
        let (loss, g) = window_objective(model, w, phase, true).map_err(|e| match e {
            Error::NonFinite(_) => non_finite(),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: phase.name(),
                epoch,
                batch: batch_index,
            });
        }
        total += loss;
        if let Some(g) = g {
            acc.accumulate(g);
        }
    }
    let inv = S::lit(1.0 / batch.len() as f64);
    acc.scale(inv);
    for (id, _, t) in model.params().iter() {
        if acc.get(id).is_none() {
            acc.set(id, Tensor::zeros(t.shape()));
        }
    }
    Ok((total, acc))
}

fn run_phase<S: Scalar>(
    model: &mut DstGcnn<S>,
    windows: &[TrainingWindow<S>],
    validation: &[TrainingWindow<S>],
    schedule: &TrainSchedule,
    phase: Phase,
    selection: &[ParamId],
    report: &mut TrainReport<S>,
) -> Result<()> {
    let epochs = match phase {
        Phase::Pretrain => schedule.pretrain_epochs,
        Phase::Joint => schedule.joint_epochs,
    };
    if epochs == 0 {
        return Ok(());
    }
    let mut opt = OptimizerState::new(model.params(), S::lit(schedule.lr_phase1), S::lit(schedule.momentum))?;
    opt.weight_decay = S::lit(schedule.weight_decay);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut best = f64::INFINITY;
    let phase_salt = match phase {
        Phase::Pretrain => 0x5eed_0001,
        Phase::Joint => 0x5eed_0002,
    };
    for epoch in 1..=epochs {
        let start = Instant::now();
        let lr = match phase {
            Phase::Pretrain => schedule.lr_phase1,
            Phase::Joint => schedule.lr_at(epoch),
        };
        opt.learning_rate = S::lit(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ phase_salt ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let batch: Vec<&TrainingWindow<S>> = chunk.iter().map(|&i| &windows[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, phase, epoch, b)?;
            epoch_total += loss;
            opt.step(model.params_mut(), &grads, selection)?;
        }
        let train_loss = epoch_total / windows.len() as f64;
        let validation_loss = if validation.is_empty() {
            None
        } else {
            Some(mean_loss(model, validation, phase)?)
        };
        if phase == Phase::Joint {
            if let Some(v) = validation_loss {
                if v < best {
                    best = v;
                    report.best_params = Some(model.params().clone());
                    report.best_epoch = Some(epoch);
                }
            }
        }
        report.curve.push(EpochRecord {
            phase,
            epoch,
            learning_rate: lr,
            train_loss,
            validation_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Pretrains the graph stream on its own loss, then trains everything on the
/// full objective. Deterministic for a fixed schedule seed.
pub fn train<S: Scalar>(
    model: &mut DstGcnn<S>,
    windows: &[TrainingWindow<S>],
    validation: &[TrainingWindow<S>],
    schedule: &TrainSchedule,
) -> Result<TrainReport<S>> {
    schedule.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("training needs at least one window".into()));
    }
    let start = Instant::now();
    let mut report = TrainReport {
        curve: Vec::new(),
        best_params: None,
        best_epoch: None,
        seconds: 0.0,
    };
    let graph_ids = model.graph_param_ids();
    if !graph_ids.is_empty() {
        run_phase(model, windows, validation, schedule, Phase::Pretrain, &graph_ids, &mut report)?;
    }
    let all = model.all_param_ids();
    run_phase(model, windows, validation, schedule, Phase::Joint, &all, &mut report)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::model::{AuxConfig, AuxiliaryCodes, FlowStreamConfig, GraphStreamConfig, ModelConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            nodes: 4,
            flow: FlowStreamConfig {
                stc_channels: vec![4, 4],
                poly_order: 3,
                temporal_window: 3,
                history: 4,
                horizon: 2,
                in_channels: 1,
                head_bias_init: 0.5,
            },
            graph: GraphStreamConfig { channels: 4, pairs: 1 },
            aux: AuxConfig {
                enabled: true,
                slots_per_day: 4,
                hidden: 4,
            },
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_window(cfg: &ModelConfig, seed: u64) -> TrainingWindow<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.nodes;
        let f = &cfg.flow;
        let mut r = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap()
        };
        let x = r(&[1, f.history, n]);
        let y = Some(r(&[1, f.horizon - 1, n]));
        let target = r(&[1, n]);
        let mut a = r(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                let v = a.get(&[i, j]);
                a.set(&[j, i], v);
            }
        }
        let mut s = Vec::new();
        for _ in 0..f.history {
            s.extend_from_slice(a.data());
        }
        TrainingWindow {
            anchor: f.history - 1,
            x,
            s: Tensor::new(vec![f.history, n, n], s).unwrap(),
            y,
            target,
            abar: a,
            codes: AuxiliaryCodes::from_indices(2, 4, 1, None).unwrap(),
        }
    }

    #[test]
    fn lr_steps_after_configured_epoch() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(50), 1e-2);
        assert_eq!(s.lr_at(51), 1e-3);
        assert_eq!(s.lr_at(1), 1e-2);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = tiny_config();
        let mut m = DstGcnn::<f64>::new(cfg.clone(), 1).unwrap();
        let before = m.params().clone();
        let w = vec![random_window(&cfg, 2), random_window(&cfg, 3)];
        let s = TrainSchedule {
            pretrain_epochs: 2,
            joint_epochs: 3,
            lr_phase1: 0.0,
            lr_phase2: 0.0,
            momentum: 0.0,
            ..TrainSchedule::default()
        };
        train(&mut m, &w, &[], &s).unwrap();
        for ((_, _, a), (_, _, b)) in m.params().iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pretraining_touches_only_graph_stream() {
        let cfg = tiny_config();
        let mut m = DstGcnn::<f64>::new(cfg.clone(), 1).unwrap();
        let before = m.params().clone();
        let w = vec![random_window(&cfg, 2)];
        let s = TrainSchedule {
            pretrain_epochs: 3,
            joint_epochs: 0,
            ..TrainSchedule::default()
        };
        train(&mut m, &w, &[], &s).unwrap();
        let mut graph_changed = false;
        for ((_, name, a), (_, _, b)) in m.params().iter().zip(before.iter()) {
            if name.starts_with("graph.") {
                graph_changed |= a != b;
            } else {
                assert_eq!(a, b, "{name} changed during pretraining");
            }
        }
        assert!(graph_changed);
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = tiny_config();
        let w: Vec<_> = (0..5).map(|i| random_window(&cfg, i)).collect();
        let s = TrainSchedule {
            pretrain_epochs: 1,
            joint_epochs: 2,
            batch_size: 2,
            seed: 9,
            ..TrainSchedule::default()
        };
        let run = || {
            let mut m = DstGcnn::<f64>::new(cfg.clone(), 4).unwrap();
            train(&mut m, &w, &w[..2], &s).unwrap()
        };
        let (a, b) = (run(), run());
        let losses = |r: &TrainReport<f64>| r.curve.iter().map(|e| e.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.best_params.is_some());
    }

    #[test]
    fn memorizes_one_window() {
        let mut cfg = ModelConfig {
            nodes: 8,
            dynamic_graph: false,
            ..ModelConfig::default()
        };
        cfg.aux = AuxConfig {
            enabled: true,
            slots_per_day: 4,
            hidden: 32,
        };
        let mut m = DstGcnn::<f64>::new(cfg.clone(), 6).unwrap();
        let w = vec![random_window(&cfg, 7)];
        m.set_static_tensor(w[0].abar.clone());
        let s = TrainSchedule {
            pretrain_epochs: 0,
            joint_epochs: 60,
            lr_phase1: 0.07,
            momentum: 0.8,
            ..TrainSchedule::default()
        };
        let r = train(&mut m, &w, &[], &s).unwrap();
        let l: Vec<f64> = r.curve.iter().map(|e| e.train_loss).collect();
        let down = l.windows(2).filter(|p| p[1] < p[0]).count();
        assert!(down as f64 >= 0.8 * (l.len() - 1) as f64, "{l:?}");
        assert!(l[l.len() - 1] < 0.1 * l[0], "{l:?}");
    }

    #[test]
    fn graph_stream_memorizes_constant_history() {
        let cfg = tiny_config();
        let mut m = DstGcnn::<f64>::new(cfg.clone(), 3).unwrap();
        let w = random_window(&cfg, 11);
        let s = TrainSchedule {
            pretrain_epochs: 1500,
            joint_epochs: 0,
            lr_phase1: 0.1,
            ..TrainSchedule::default()
        };
        train(&mut m, std::slice::from_ref(&w), &[], &s).unwrap();
        let mut tape = Tape::new();
        let b = m.params().bind_constant(&mut tape);
        let a = m.graph_forward(&mut tape, &b, &w.s).unwrap();
        let err = tape
            .value(a)
            .data()
            .iter()
            .zip(w.abar.data())
            .map(|(p, t)| (p - t).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max abs error {err}");
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let cfg = tiny_config();
        let mut m = DstGcnn::<f64>::new(cfg.clone(), 1).unwrap();
        let mut bad = random_window(&cfg, 1);
        bad.target.data_mut()[0] = f64::NAN;
        let w = vec![random_window(&cfg, 2), bad];
        let s = TrainSchedule {
            pretrain_epochs: 0,
            joint_epochs: 1,
            batch_size: 1,
            ..TrainSchedule::default()
        };
        let e = train(&mut m, &w, &[], &s).unwrap_err();
        assert!(matches!(e, Error::NonFiniteLoss { phase: "joint", epoch: 1, .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
    }
}
