use rand::Rng;

use super::aux::{AuxEmbedding, AuxiliaryCodes};
use super::config::{FlowStreamConfig, ModelConfig};
use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stc::StcLayer;

/// An STC stack followed by a linear head over each node's (channel, time) fiber.
#[derive(Clone, Debug)]
pub struct FlowStream {
    aux: Option<AuxEmbedding>,
    layers: Vec<StcLayer>,
    head_weight: ParamId,
    head_bias: ParamId,
    in_channels: usize,
    in_steps: usize,
    out_steps: usize,
    nodes: usize,
}

impl FlowStream {
    /// `in_steps` input frames, `out_steps` predicted frames.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: &ModelConfig,
        in_steps: usize,
        out_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let f: &FlowStreamConfig = &config.flow;
        let n = config.nodes;
        let aux = match config.aux() {
            Some(a) => Some(AuxEmbedding::register(
                store,
                &format!("{prefix}.aux"),
                a.slots_per_day,
                a.hidden,
                in_steps,
                n,
                rng,
            )?),
            None => None,
        };
        let mut c_in = f.in_channels + usize::from(aux.is_some());
        let mut layers = Vec::with_capacity(f.stc_channels.len());
        for (l, &c_out) in f.stc_channels.iter().enumerate() {
            layers.push(StcLayer::register(
                store,
                &format!("{prefix}.stc{l}"),
                c_in,
                c_out,
                in_steps,
                f.poly_order,
                f.temporal_window,
                config.bias,
                rng,
            )?);
            c_in = c_out;
        }
        let fiber = c_in * in_steps;
        let out = f.in_channels * out_steps;
        let head_weight = store.insert_glorot(format!("{prefix}.head.weight"), &[out, fiber], fiber, out, rng)?;
        let head_bias = store.insert(
            format!("{prefix}.head.bias"),
            Tensor::full(&[out], S::lit(f.head_bias_init)),
        )?;
        Ok(Self {
            aux,
            layers,
            head_weight,
            head_bias,
            in_channels: f.in_channels,
            in_steps,
            out_steps,
            nodes: n,
        })
    }

    pub fn out_steps(&self) -> usize {
        self.out_steps
    }

    /// `x: [C0, in_steps, N]` to `[C0, out_steps, N]`, non-negative.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Bound,
        x: Var,
        codes: &AuxiliaryCodes,
        laplacian: Var,
    ) -> Result<Var> {
        let expected = [self.in_channels, self.in_steps, self.nodes];
        if tape.shape(x) != expected {
            return Err(Error::ShapeMismatch {
                op: "flow_stream",
                left: expected.to_vec(),
                right: tape.shape(x).to_vec(),
            });
        }
        let mut h = match &self.aux {
            Some(a) => {
                let e = a.forward(tape, params, codes)?;
                tape.concat(&[x, e], 0)?
            }
            None => x,
        };
        for layer in &self.layers {
            h = layer.forward(tape, params, h, laplacian)?;
            h = tape.relu(h)?;
        }
        let c = tape.shape(h)[0];
        let h = tape.reshape(h, &[c * self.in_steps, self.nodes])?;
        let y = tape.matmul(params.var(self.head_weight), h)?;
        let y = tape.add_bias(y, params.var(self.head_bias))?;
        let y = tape.relu(y)?;
        tape.reshape(y, &[self.in_channels, self.out_steps, self.nodes])
    }
}
