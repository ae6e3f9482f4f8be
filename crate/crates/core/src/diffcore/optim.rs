use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stochastic gradient descent with heavy-ball momentum.
///
/// The update accumulates then scales:
/// `v ← momentum · v + (g + weight_decay · p)`, `p ← p − learning_rate · v`.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub learning_rate: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    /// One zeroed velocity buffer per parameter of `store`.
    pub fn new(store: &ParamStore<S>, learning_rate: S, momentum: S) -> Result<Self> {
        if !(learning_rate >= S::zero()) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay: S::zero(),
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> &Tensor<S> {
        &self.velocity[id.index()]
    }

    pub fn num_buffers(&self) -> usize {
        self.velocity.len()
    }

    /// Applies one update to the parameters in `selection`.
    ///
    /// Fails without modifying anything if a selected gradient is missing,
    /// mis-shaped or non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>, selection: &[ParamId]) -> Result<()> {
        for &id in selection {
            let g = grads.get(id).ok_or_else(|| Error::MissingGradient(store.name(id).to_string()))?;
            if g.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_momentum_step",
                    left: store.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
            }
        }
        for &id in selection {
            let g = grads.get(id).expect("checked above");
            let v = &mut self.velocity[id.index()];
            let p = store.get_mut(id);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let eff = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + eff;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}
