//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values of a graph built from
//! constants, so it never touches the backward rules it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Relative error per input, see [`relative_error`].
    pub errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() <= tolerance
    }
}

/// Gradient norms below this are indistinguishable from finite-difference
/// roundoff (about machine epsilon over the step, for unit-scale losses).
pub const NOISE_FLOOR: f64 = 1e-8;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, NOISE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NOISE_FLOOR)
}

/// Central differences of a scalar function of several tensors.
pub fn central_differences<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = x0;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares backprop gradients of `build` against central differences.
///
/// `build` receives one variable per input and must return a scalar.
pub fn check_gradients<B>(build: B, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let numeric = central_differences(
        |xs| {
            let mut g = Graph::new();
            let vars = xs
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        },
        inputs,
        step,
    )?;
    let errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradCheckReport {
        analytic,
        numeric,
        errors,
    })
}
