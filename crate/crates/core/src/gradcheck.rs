//! Central-difference gradient checking against the tape.

use crate::error::{Result, TensorError};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |a_i − n_i| / max(1, |a_i|, |n_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, theta: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(TensorError::Evaluation(format!(
            "objective must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(TensorError::Evaluation(format!("objective is {s}")));
    }
    Ok(s)
}

/// Compares the tape gradient of the scalar objective `f` at `theta` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, theta, h, None)
}

/// As [`grad_check`], with the analytic pass run on a tape whose `fault`
/// op has its backward sign flipped.
pub fn grad_check_with<F>(f: F, theta: &Tensor, h: f64, fault: Option<OpKind>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::Config(
            "grad_check: step must be positive".into(),
        ));
    }
    eval_scalar(&f, theta)?;
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let x = tape.leaf(theta.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: theta.len(),
    };
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error || i == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
