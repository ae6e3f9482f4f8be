//! The two-stream forecaster: a graph stream that predicts the window's
//! affinity matrix, and one or two flow streams built from STC layers.

mod aux;
mod checkpoint;
mod config;
mod flow_stream;
mod graph_stream;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use aux::{AuxEmbedding, AuxiliaryCodes, DAYS_PER_WEEK, WEATHER_STATES};
pub use checkpoint::CHECKPOINT_MAGIC;
pub use config::{AuxConfig, FlowStreamConfig, GraphStreamConfig, LossNorm, ModelConfig};
pub use flow_stream::FlowStream;
pub use graph_stream::GraphStream;
pub use loss::{dynamic_graph_loss, total_loss, two_step_loss};

use crate::data::TrainingWindow;
use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphops::AffinityMatrix;
use crate::scalar::Scalar;

pub const GRAPH_PREFIX: &str = "graph.";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle<S> {
    /// `C0 × (T_F − 1) × N`, only when the close-future step is built.
    pub close_future: Option<Tensor<S>>,
    /// `C0 × N`
    pub target: Tensor<S>,
    /// `N × N`
    pub predicted_affinity: Tensor<S>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub close_future: Option<Var>,
    pub target: Var,
    pub affinity: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub two_step: Var,
    pub dynamic: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DstGcnn<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    graph: Option<GraphStream>,
    close: Option<FlowStream>,
    target: FlowStream,
    static_affinity: Option<Tensor<S>>,
}

impl<S: Scalar> DstGcnn<S> {
    /// Builds the parameter set with seeded Glorot initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let f = &config.flow;
        let graph = if config.dynamic_graph {
            Some(GraphStream::register(
                &mut params,
                "graph",
                &config.graph,
                f.history,
                config.nodes,
                &mut rng,
            )?)
        } else {
            None
        };
        let close = if config.has_close_future() {
            Some(FlowStream::register(&mut params, "flow1", &config, f.history, f.horizon - 1, &mut rng)?)
        } else {
            None
        };
        let in_steps = f.history + close.as_ref().map_or(0, |c| c.out_steps());
        let target = FlowStream::register(&mut params, "flow2", &config, in_steps, 1, &mut rng)?;
        Ok(Self {
            config,
            params,
            graph,
            close,
            target,
            static_affinity: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn static_affinity(&self) -> Option<&Tensor<S>> {
        self.static_affinity.as_ref()
    }

    /// Fixed graph used when the graph stream is disabled.
    pub fn set_static_affinity(&mut self, affinity: &AffinityMatrix<S>) -> Result<()> {
        if affinity.nodes() != self.config.nodes {
            return Err(Error::Dimension {
                op: "set_static_affinity",
                detail: format!("{} nodes, model has {}", affinity.nodes(), self.config.nodes),
            });
        }
        self.static_affinity = Some(affinity.as_tensor().clone());
        Ok(())
    }

    pub(crate) fn set_static_tensor(&mut self, t: Tensor<S>) {
        self.static_affinity = Some(t);
    }

    pub fn graph_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(GRAPH_PREFIX).collect()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    fn affinity(&self, tape: &mut Tape<S>, params: &Bound, history: &Tensor<S>) -> Result<Var> {
        match &self.graph {
            Some(g) => {
                let s = tape.constant(history.clone());
                g.forward(tape, params, s)
            }
            None => {
                let a = self.static_affinity.clone().ok_or_else(|| {
                    Error::Config("static-graph model has no affinity matrix; call set_static_affinity".into())
                })?;
                Ok(tape.constant(a))
            }
        }
    }

    /// Predicted affinity only.
    pub fn graph_forward(&self, tape: &mut Tape<S>, params: &Bound, history: &Tensor<S>) -> Result<Var> {
        self.affinity(tape, params, history)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        params: &Bound,
        x: &Tensor<S>,
        history: &Tensor<S>,
        codes: &AuxiliaryCodes,
    ) -> Result<ForwardVars> {
        let affinity = self.affinity(tape, params, history)?;
        let lap = tape.normalized_laplacian(affinity)?;
        let xv = tape.constant(x.clone());
        let close_future = match &self.close {
            Some(s1) => Some(s1.forward(tape, params, xv, codes, lap)?),
            None => None,
        };
        let input = match close_future {
            Some(y) => tape.concat(&[xv, y], 1)?,
            None => xv,
        };
        let out = self.target.forward(tape, params, input, codes, lap)?;
        let n = self.config.nodes;
        let target = tape.reshape(out, &[self.config.flow.in_channels, n])?;
        Ok(ForwardVars {
            close_future,
            target,
            affinity,
        })
    }

    /// The full objective on one window.
    pub fn loss(&self, tape: &mut Tape<S>, params: &Bound, window: &TrainingWindow<S>) -> Result<LossVars> {
        let fw = self.forward(tape, params, &window.x, &window.s, &window.codes)?;
        let norm = self.config.loss_norm;
        let close = match (fw.close_future, &window.y) {
            (Some(yhat), Some(y)) => {
                let y = tape.constant(y.clone());
                Some((yhat, y))
            }
            (Some(_), None) => {
                return Err(Error::Data("window has no close-future frames for a two-step model".into()));
            }
            _ => None,
        };
        let f = tape.constant(window.target.clone());
        let two_step = two_step_loss(tape, close, (fw.target, f), norm)?;
        let dynamic = if self.graph.is_some() {
            let abar = tape.constant(window.abar.clone());
            Some(dynamic_graph_loss(tape, fw.affinity, abar, norm)?)
        } else {
            None
        };
        let total = total_loss(tape, two_step, dynamic)?;
        Ok(LossVars {
            total,
            two_step,
            dynamic,
        })
    }

    /// Graph-stream objective alone, used for pretraining.
    pub fn graph_loss(&self, tape: &mut Tape<S>, params: &Bound, window: &TrainingWindow<S>) -> Result<Var> {
        if self.graph.is_none() {
            return Err(Error::Config("graph loss requested for a static-graph model".into()));
        }
        let ahat = self.affinity(tape, params, &window.s)?;
        let abar = tape.constant(window.abar.clone());
        dynamic_graph_loss(tape, ahat, abar, self.config.loss_norm)
    }

    pub fn predict(&self, x: &Tensor<S>, history: &Tensor<S>, codes: &AuxiliaryCodes) -> Result<PredictionBundle<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let fw = self.forward(&mut tape, &bound, x, history, codes)?;
        Ok(PredictionBundle {
            close_future: fw.close_future.map(|v| tape.value(v).clone()),
            target: tape.value(fw.target).clone(),
            predicted_affinity: tape.value(fw.affinity).clone(),
        })
    }

    pub fn predict_window(&self, window: &TrainingWindow<S>) -> Result<PredictionBundle<S>> {
        self.predict(&window.x, &window.s, &window.codes)
    }
}
