use rand::Rng;

use super::config::GraphStreamConfig;
use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    axis: usize,
}

/// Stacked `[1,N]` / `[N,1]` convolutions over the past affinities.
#[derive(Clone, Debug)]
pub struct GraphStream {
    units: Vec<ConvUnit>,
    head_weight: ParamId,
    head_bias: ParamId,
    history: usize,
    nodes: usize,
}

impl GraphStream {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: &GraphStreamConfig,
        history: usize,
        nodes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(2 * config.pairs);
        let mut c_in = history;
        let c = config.channels;
        for p in 0..config.pairs {
            // axis 2 runs along a row (kernel 1×N), axis 1 down a column (N×1)
            for (tag, axis) in [("row", 2), ("col", 1)] {
                let weight = store.insert_glorot(
                    format!("{prefix}.pair{p}.{tag}.weight"),
                    &[c_in, c, nodes],
                    c_in * nodes,
                    c * nodes,
                    rng,
                )?;
                let bias = store.insert_zeros(format!("{prefix}.pair{p}.{tag}.bias"), &[c])?;
                units.push(ConvUnit { weight, bias, axis });
                c_in = c;
            }
        }
        let head_weight = store.insert_glorot(format!("{prefix}.head.weight"), &[c_in, 1, 1], c_in, 1, rng)?;
        let head_bias = store.insert_zeros(format!("{prefix}.head.bias"), &[1])?;
        Ok(Self {
            units,
            head_weight,
            head_bias,
            history,
            nodes,
        })
    }

    /// Maps `S: [T_P, N, N]` to a symmetric `N × N` affinity with entries in (0, 1).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound, history: Var) -> Result<Var> {
        let n = self.nodes;
        let expected = [self.history, n, n];
        if tape.shape(history) != expected {
            return Err(Error::ShapeMismatch {
                op: "graph_stream_forward",
                left: expected.to_vec(),
                right: tape.shape(history).to_vec(),
            });
        }
        let mut h = history;
        for u in &self.units {
            h = tape.conv1d_same(h, params.var(u.weight), u.axis)?;
            h = tape.add_bias(h, params.var(u.bias))?;
            h = tape.relu(h)?;
        }
        let h = tape.conv1d_same(h, params.var(self.head_weight), 1)?;
        let h = tape.add_bias(h, params.var(self.head_bias))?;
        let r = tape.reshape(h, &[n, n])?;
        let rt = tape.transpose(r)?;
        let s = tape.add(r, rt)?;
        let s = tape.scale(s, S::lit(0.5))?;
        tape.sigmoid(s)
    }
}
