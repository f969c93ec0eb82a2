//! Central finite-difference checks against tape gradients.

use crate::{Result, Tape, Tensor, Var};

/// Outcome of [`gradcheck`].
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-coordinate `|a - n| / max(1, |a|, |n|)`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// Indices of coordinates whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.rel_errors
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > self.tol)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `eps`.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point and must return a scalar node. Errors from `f` propagate; gradient
/// disagreement is reported, not raised.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone())?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get(x).into_data();

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
