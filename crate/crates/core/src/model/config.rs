use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flow-prediction stream shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowStreamConfig {
    /// Output channels of each STC layer.
    pub stc_channels: Vec<usize>,
    /// Polynomial order `K` of the spatial filters.
    pub poly_order: usize,
    /// Temporal kernel width `Q` (odd).
    pub temporal_window: usize,
    /// History length `T_P`.
    pub history: usize,
    /// Forecast horizon `T_F`.
    pub horizon: usize,
    /// Input feature channels `C0`.
    pub in_channels: usize,
    /// Starting bias of the output heads, in normalized flow units.
    pub head_bias_init: f64,
}

impl Default for FlowStreamConfig {
    fn default() -> Self {
        Self {
            stc_channels: vec![8, 16, 32],
            poly_order: 5,
            temporal_window: 5,
            history: 12,
            horizon: 3,
            in_channels: 1,
            head_bias_init: 0.5,
        }
    }
}

/// Graph-prediction stream shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphStreamConfig {
    pub channels: usize,
    /// Number of `[1,N]` / `[N,1]` convolution pairs.
    pub pairs: usize,
}

impl Default for GraphStreamConfig {
    fn default() -> Self {
        Self { channels: 16, pairs: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub enabled: bool,
    pub slots_per_day: usize,
    pub hidden: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            slots_per_day: 288,
            hidden: 32,
        }
    }
}

/// How the squared and absolute residual norms are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Divide each norm by its element count.
    #[default]
    Mean,
    /// Plain sums.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    pub flow: FlowStreamConfig,
    pub graph: GraphStreamConfig,
    pub aux: AuxConfig,
    /// Predict the graph from past affinities; otherwise use a fixed one.
    pub dynamic_graph: bool,
    /// Predict close-future frames first and feed them to the target step.
    pub two_step: bool,
    /// Per-output-channel bias after each temporal convolution.
    pub bias: bool,
    pub loss_norm: LossNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            flow: FlowStreamConfig::default(),
            graph: GraphStreamConfig::default(),
            aux: AuxConfig::default(),
            dynamic_graph: true,
            two_step: true,
            bias: true,
            loss_norm: LossNorm::Mean,
        }
    }
}

impl ModelConfig {
    /// The auxiliary embedding settings when it is enabled.
    pub fn aux(&self) -> Option<&AuxConfig> {
        self.aux.enabled.then_some(&self.aux)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.flow;
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes == 0 {
            return bad("nodes must be >= 1".into());
        }
        if f.history == 0 || f.horizon == 0 {
            return bad(format!("history ({}) and horizon ({}) must be >= 1", f.history, f.horizon));
        }
        if f.poly_order == 0 {
            return bad("poly_order must be >= 1".into());
        }
        if f.temporal_window % 2 == 0 {
            return bad(format!("temporal_window {} must be odd", f.temporal_window));
        }
        if f.stc_channels.is_empty() || f.stc_channels.contains(&0) {
            return bad(format!("stc_channels {:?} must be nonempty and positive", f.stc_channels));
        }
        if !f.head_bias_init.is_finite() {
            return bad("head_bias_init must be finite".into());
        }
        if f.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.dynamic_graph && (self.graph.channels == 0 || self.graph.pairs == 0) {
            return bad("graph stream needs at least one pair with positive channels".into());
        }
        if let Some(a) = self.aux() {
            if a.slots_per_day == 0 || a.hidden == 0 {
                return bad("aux slots_per_day and hidden must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Whether a separate close-future step is built.
    pub fn has_close_future(&self) -> bool {
        self.two_step && self.flow.horizon > 1
    }

    /// Hash of everything that determines parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_even_window_and_empty_channels() {
        let mut c = ModelConfig::default();
        c.flow.temporal_window = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.flow.stc_channels.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_shape() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.flow.poly_order = 3;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
