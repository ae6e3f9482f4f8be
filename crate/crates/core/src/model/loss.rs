use super::config::LossNorm;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn same_shape<S: Scalar>(tape: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn reduce<S: Scalar>(tape: &mut Tape<S>, v: Var, norm: LossNorm) -> Result<Var> {
    match norm {
        LossNorm::Mean => tape.mean(v),
        LossNorm::Raw => tape.sum(v),
    }
}

/// Squared error on the close-future frames (when present) plus squared error on the target frame.
pub fn two_step_loss<S: Scalar>(
    tape: &mut Tape<S>,
    close_future: Option<(Var, Var)>,
    target: (Var, Var),
    norm: LossNorm,
) -> Result<Var> {
    let (fhat, f) = target;
    same_shape(tape, "two_step_loss", fhat, f)?;
    let d = tape.sub(fhat, f)?;
    let sq = tape.square(d)?;
    let target_term = reduce(tape, sq, norm)?;
    match close_future {
        Some((yhat, y)) => {
            same_shape(tape, "two_step_loss", yhat, y)?;
            let d = tape.sub(yhat, y)?;
            let sq = tape.square(d)?;
            let close_term = reduce(tape, sq, norm)?;
            tape.add(close_term, target_term)
        }
        None => Ok(target_term),
    }
}

/// Absolute deviation of the predicted affinity from the window's average affinity.
pub fn dynamic_graph_loss<S: Scalar>(tape: &mut Tape<S>, ahat: Var, abar: Var, norm: LossNorm) -> Result<Var> {
    same_shape(tape, "dynamic_graph_loss", ahat, abar)?;
    if tape.shape(ahat).len() != 2 || tape.shape(ahat)[0] != tape.shape(ahat)[1] {
        return Err(Error::Dimension {
            op: "dynamic_graph_loss",
            detail: format!("expected square matrices, got {:?}", tape.shape(ahat)),
        });
    }
    let d = tape.sub(ahat, abar)?;
    let a = tape.abs(d)?;
    reduce(tape, a, norm)
}

pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, two_step: Var, dynamic: Option<Var>) -> Result<Var> {
    match dynamic {
        Some(d) => tape.add(two_step, d),
        None => Ok(two_step),
    }
}
