use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    check_finite(&tape, loss, "analytic pass")?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor], at: (usize, usize)| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        let value = t.value(out).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at parameter {} entry {}",
                at.0, at.1
            )));
        }
        Ok(value)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), entries: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work, (pi, ei))?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work, (pi, ei))?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    match tape.value(v).item() {
        Some(x) if x.is_finite() => Ok(()),
        Some(_) => Err(Error::NonFinite(format!("function value in {what}"))),
        None => Err(Error::NonScalarLoss(tape.value(v).shape().to_vec())),
    }
}
