//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Evaluates the forward function only; the backward rules under test are
//! never consulted when forming the numeric estimate.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest norm-wise relative error over all inputs.
    pub max_rel_err: f64,
    /// Input index that produced `max_rel_err`.
    pub worst_input: usize,
}

impl GradCheck {
    pub const DEFAULT_STEP: f64 = 1e-5;
    pub const DEFAULT_TOL: f64 = 1e-6;

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(TensorError::Contract("gradient check needs a scalar".into()));
    }
    Ok(out.item())
}

/// Analytic gradients of `f` with respect to every input tensor.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|v| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; v.numel()])
        })
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(false)).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..work.len() {
        let mut g = vec![0.0; work[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, GradCheck::DEFAULT_STEP)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_err {
            report = GradCheck {
                max_rel_err: err,
                worst_input: i,
            };
        }
    }
    Ok(report)
}
