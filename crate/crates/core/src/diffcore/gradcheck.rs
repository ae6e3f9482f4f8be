use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over the inputs.
    pub max_rel_error: f64,
    /// Relative error of each input tensor, in input order.
    pub per_input: Vec<f64>,
    /// `(input, flat index)` of the largest absolute disagreement in the
    /// worst input.
    pub worst: (usize, usize),
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` in the Euclidean norm; 0 when both vanish.
///
/// Taken per tensor: single coordinates whose gradient sits near the
/// rounding floor of the difference quotient would otherwise dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `epsilon` at every coordinate of `point`.
///
/// `f` receives one variable per input tensor. During the analytic pass they
/// are differentiable leaves; during finite differencing they are constants.
pub fn grad_check<S, F>(f: F, point: &[Tensor<S>], epsilon: S) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(epsilon > S::zero()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut work: Vec<Tensor<S>> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; point.len()],
        worst: (0, 0),
    };
    let two_eps = 2.0 * epsilon.as_f64();
    for input in 0..point.len() {
        let a: Vec<f64> = analytic[input].data().iter().map(|v| v.as_f64()).collect();
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..point[input].len() {
            let orig = point[input].data()[j];
            work[input].data_mut()[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[input].data_mut()[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[input].data_mut()[j] = orig;
            numeric.push((plus - minus) / two_eps);
        }
        let err = relative_error(&a, &numeric);
        report.per_input[input] = err;
        if input == 0 || err > report.max_rel_error {
            let j = (0..a.len())
                .max_by(|&x, &y| (a[x] - numeric[x]).abs().total_cmp(&(a[y] - numeric[y]).abs()))
                .unwrap_or(0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = (input, j);
        }
    }
    Ok(report)
}
