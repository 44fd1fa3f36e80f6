use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `|a − n| / max(|a|, |n|, floor)` maximised over every entry.
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries: usize,
}

/// Compares tape gradients of `f` against central differences with step `eps`.
///
/// `f` records a scalar loss on the given tape from the given parameter vars.
/// Relative errors use `floor` in the denominator so that entries whose true
/// gradient is zero are judged on absolute error.
pub fn finite_difference_check(
    params: &mut [Tensor],
    eps: f64,
    floor: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| grads.get_or_zeros(*v, &p.shape))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries: 0,
    };
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data[j];
            params[pi].data[j] = orig + eps;
            let up = eval(params)?;
            params[pi].data[j] = orig - eps;
            let down = eval(params)?;
            params[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data[j];
            if !(numeric.is_finite() && a.is_finite()) {
                return Err(Error::NonFinite("gradient check"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_index = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.entries += 1;
        }
    }
    Ok(report)
}
