//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward function, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor for the relative error; gradients smaller than this
    /// are compared on an absolute scale.
    pub rel_floor: f64,
    /// Check every `stride`-th element of each input (1 = all).
    pub stride: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_floor: 1e-6,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of a scalar function against central finite
/// differences over every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    opts: &GradcheckOptions,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf grads are populated"))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradcheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in (0..grad.numel()).step_by(opts.stride.max(1)) {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[ei];
            let err = rel_err(a, numeric, opts.rel_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}
