use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare caller-supplied analytic gradients against central differences of
/// `value`. The function is evaluated twice at the base point first; any
/// difference means hidden randomness and is reported as an error.
pub fn grad_check_with<F>(value: F, analytic: &[Tensor], params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step {eps} must be > 0")));
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::Invalid("analytic gradients do not match parameter shapes".into()));
    }
    let base = value(params)?;
    if value(params)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = value(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = value(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Check the tape's gradients of `f` with respect to every tensor in `params`.
///
/// `f` receives a fresh tape and one tracked leaf per parameter and must
/// return a scalar. Any sampling inside `f` must use a fixed seed.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    grad_check_with(value, &analytic, params, eps)
}
