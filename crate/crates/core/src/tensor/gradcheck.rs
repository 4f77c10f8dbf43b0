use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on an absolute scale instead of by noise ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|autodiff - numeric| / max(|autodiff|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the autodiff gradient of scalar `f` at `x` against central
/// differences `(f(x+h) - f(x-h)) / 2h` on every element.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// As [`grad_check`], restricted to the flat indices in `indices`.
pub fn grad_check_at<F>(
    f: F,
    x: &Tensor,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
