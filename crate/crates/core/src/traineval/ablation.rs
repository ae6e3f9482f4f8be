use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{baseline_historical_average, baseline_persistence, evaluate, HistoricalAverage, MetricReport};
use super::{train, TrainSchedule};
use crate::data::PreparedDataset;
use crate::error::Result;
use crate::model::{AuxConfig, DstGcnn, ModelConfig};
use crate::scalar::Scalar;

pub const ABLATION_NAMES: [&str; 4] = ["Basel", "Basel+AE", "Basel+AE+DG", "Basel+AE+DG+TP"];

/// The four configurations, each adding one component to the previous.
pub fn ablation_configs(base: &ModelConfig, slots_per_day: usize) -> Vec<(String, ModelConfig)> {
    let aux = AuxConfig {
        enabled: true,
        slots_per_day,
        hidden: base.aux.hidden,
    };
    let basel = ModelConfig {
        aux: AuxConfig {
            enabled: false,
            ..aux.clone()
        },
        dynamic_graph: false,
        two_step: false,
        ..base.clone()
    };
    let ae = ModelConfig { aux, ..basel.clone() };
    let dg = ModelConfig {
        dynamic_graph: true,
        ..ae.clone()
    };
    let full = ModelConfig {
        two_step: true,
        ..dg.clone()
    };
    ABLATION_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip([basel, ae, dg, full])
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: ModelConfig,
    pub report: MetricReport,
    pub train_seconds: f64,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub persistence: MetricReport,
    pub historical_average: MetricReport,
}

impl AblationTable {
    pub fn mae(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.report.mae)
    }

    /// One row per method with RMSE / MAE / MAPE per channel.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let channels = self.persistence.channels.len();
        let _ = write!(out, "{:<20}", "method");
        for c in 0..channels {
            let _ = write!(out, " {:>10} {:>10} {:>9}", format!("RMSE[{c}]"), format!("MAE[{c}]"), format!("MAPE[{c}]"));
        }
        out.push('\n');
        let mut line = |name: &str, r: &MetricReport| {
            let _ = write!(out, "{name:<20}");
            for c in &r.channels {
                let _ = write!(out, " {:>10.4} {:>10.4} {:>8.2}%", c.rmse, c.mae, c.mape);
            }
            out.push('\n');
        };
        line("persistence", &self.persistence);
        line("historical_average", &self.historical_average);
        for r in &self.rows {
            line(&r.name, &r.report);
        }
        out
    }
}

/// Trains and scores every ablation configuration with the same seed and schedule.
///
/// Static-graph rows use the mean training affinity. Each row is scored on
/// the test windows with its best-validation parameters when validation
/// windows exist.
pub fn ablation_run<S: Scalar>(
    data: &PreparedDataset<S>,
    base: &ModelConfig,
    schedule: &TrainSchedule,
    model_seed: u64,
) -> Result<AblationTable> {
    let horizon = base.flow.horizon;
    let persistence = baseline_persistence(&data.test, &data.stats, horizon)?;
    let ha = HistoricalAverage::fit(&data.traffic, data.splits.train.clone())?;
    let historical_average = baseline_historical_average(&data.test, &data.traffic, &ha, &data.stats, horizon)?;
    let mut rows = Vec::with_capacity(4);
    for (name, config) in ablation_configs(base, data.traffic.slots_per_day()) {
        let start = Instant::now();
        let mut model = DstGcnn::<S>::new(config.clone(), model_seed)?;
        if !config.dynamic_graph {
            model.set_static_affinity(&data.train_affinity)?;
        }
        let rep = train(&mut model, &data.train, &data.validation, schedule)?;
        if let Some(best) = rep.best_params.clone() {
            *model.params_mut() = best;
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let mut report = evaluate(&model, &data.test, &data.stats)?;
        report.name = name.clone();
        rows.push(AblationRow {
            name,
            config,
            report,
            train_seconds,
            final_train_loss: rep.final_loss(),
        });
    }
    Ok(AblationTable {
        rows,
        persistence,
        historical_average,
    })
}
