use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn eval<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarRoot(v.dims().to_vec()));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(alloc::format!("finite-difference forward value {y}")));
    }
    Ok(y)
}

/// Reverse-mode gradients of `f` at `point`, one buffer per input tensor.
pub fn analytic_gradients<F>(f: &F, point: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let y = g.value(out);
    if y.len() == 1 && !y.item().is_finite() {
        return Err(Error::NonFinite(alloc::format!("forward value {}", y.item())));
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect())
}

/// Compares supplied gradients against central differences with step `h`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    point: &[Tensor],
    analytic: &[Vec<f64>],
    h: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = FiniteDiffReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for t in 0..work.len() {
        for j in 0..work[t].len() {
            let orig = work[t].data()[j];
            work[t].data_mut()[j] = orig + h;
            let up = eval(f, &work)?;
            work[t].data_mut()[j] = orig - h;
            let down = eval(f, &work)?;
            work[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((t, j));
                }
            }
        }
    }
    Ok(report)
}

/// Maximum relative deviation between reverse-mode gradients of `f` and
/// central finite differences with step `h`.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, point)?;
    Ok(compare_with_finite_differences(&f, point, &analytic, h)?.max_rel_error)
}
