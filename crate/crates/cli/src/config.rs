use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dstgcn::data::{DatasetSchema, PrepareOptions, SplitFractions, SynthConfig};
use dstgcn::model::ModelConfig;
use dstgcn::traineval::{BenchConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_NAME: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub volume: PathBuf,
    pub travel: PathBuf,
    pub slot_minutes: u32,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub split: SplitFractions,
    /// Affinity bandwidth in seconds; the training median when absent.
    pub sigma: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            volume: PathBuf::from("data/volumes.csv"),
            travel: PathBuf::from("data/travel_times.csv"),
            slot_minutes: 15,
            train_stride: 1,
            eval_stride: 1,
            split: SplitFractions::default(),
            sigma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub history: usize,
    pub horizon: usize,
    pub slots_per_day: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            history: 4,
            horizon: 3,
            slots_per_day: 4,
            epsilon: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to `<out>/checkpoint.txt` for eval and predict.
    pub checkpoint: Option<PathBuf>,
    /// Absolute step to forecast from; the last step when absent.
    pub anchor: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            anchor: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            synth: SynthConfig::default(),
            gradcheck: GradcheckConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line values that replace config-file entries.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub volume: Option<PathBuf>,
    #[arg(long, global = true)]
    pub travel: Option<PathBuf>,
    /// Node count for the model and the generator.
    #[arg(long, global = true)]
    pub nodes: Option<usize>,
    /// Generator length in steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub history: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub poly_order: Option<usize>,
    #[arg(long, global = true)]
    pub temporal_window: Option<usize>,
    /// STC channel widths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub joint_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lr_phase2: Option<f64>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub train_stride: Option<usize>,
    #[arg(long, global = true)]
    pub anchor: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// File (or defaults) first, then every flag that was given.
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(v) = o.seed {
            c.seed = v;
            c.schedule.seed = v;
            c.synth.seed = v;
        }
        if let Some(v) = &o.out {
            c.out = v.clone();
        }
        if let Some(v) = &o.checkpoint {
            c.checkpoint = Some(v.clone());
        }
        if let Some(v) = &o.volume {
            c.data.volume = v.clone();
        }
        if let Some(v) = &o.travel {
            c.data.travel = v.clone();
        }
        if let Some(v) = o.nodes {
            c.model.nodes = v;
            c.synth.nodes = v;
        }
        if let Some(v) = o.steps {
            c.synth.steps = v;
        }
        if let Some(v) = o.history {
            c.model.flow.history = v;
        }
        if let Some(v) = o.horizon {
            c.model.flow.horizon = v;
        }
        if let Some(v) = o.poly_order {
            c.model.flow.poly_order = v;
        }
        if let Some(v) = o.temporal_window {
            c.model.flow.temporal_window = v;
        }
        if let Some(v) = &o.channels {
            c.model.flow.stc_channels = v.clone();
        }
        if let Some(v) = o.sigma {
            c.data.sigma = Some(v);
        }
        if let Some(v) = o.pretrain_epochs {
            c.schedule.pretrain_epochs = v;
        }
        if let Some(v) = o.joint_epochs {
            c.schedule.joint_epochs = v;
        }
        if let Some(v) = o.lr {
            c.schedule.lr_phase1 = v;
        }
        if let Some(v) = o.lr_phase2 {
            c.schedule.lr_phase2 = v;
        }
        if let Some(v) = o.momentum {
            c.schedule.momentum = v;
        }
        if let Some(v) = o.batch_size {
            c.schedule.batch_size = v;
        }
        if let Some(v) = o.train_stride {
            c.data.train_stride = v;
        }
        if let Some(v) = o.anchor {
            c.anchor = Some(v);
        }
        if c.data.slot_minutes == 0 {
            bail!("data.slot_minutes must be positive");
        }
        Ok(c)
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            nodes: self.model.nodes,
            channels: self.model.flow.in_channels,
            slot_minutes: self.data.slot_minutes,
        }
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            history: self.model.flow.history,
            horizon: self.model.flow.horizon,
            train_stride: self.data.train_stride,
            eval_stride: self.data.eval_stride,
            split: self.data.split,
            sigma: self.data.sigma,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.txt"))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn write_snapshot(&self) -> anyhow::Result<PathBuf> {
        let path = self.out.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
