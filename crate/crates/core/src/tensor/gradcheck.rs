//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Outcome of a [`gradcheck`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest element-wise relative error seen.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of elements compared.
    pub checked: usize,
}

/// Central differences of a loss `f` carry roundoff of order `eps * |f| / h`,
/// so an exactly-zero gradient never measures as exactly zero. Elements
/// smaller than this many roundoff units are compared in absolute terms,
/// which maps pure roundoff to a relative error near `1 / ROUNDOFF_UNITS`.
const ROUNDOFF_UNITS: f64 = 1e5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` produced by the tape
/// against central differences with step `h`.
///
/// `f` is evaluated once on a recording tape and twice per checked element
/// on no-grad tapes, so it must be deterministic (seed any dropout RNG
/// inside `f`). `stride` > 1 checks only every `stride`-th element of each
/// input.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, stride: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    contract!(
        h > 0.0 && stride >= 1,
        "gradcheck needs h > 0 and stride >= 1"
    );
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let floor = ROUNDOFF_UNITS * f64::EPSILON * loss.item().abs().max(1.0) / h;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in (0..input.len()).step_by(stride) {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
