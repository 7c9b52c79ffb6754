use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all elements.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks `d f(x) / d x` element by element.
///
/// `f` receives a fresh double-precision tape and the leaf holding `x`, and
/// must return a scalar built from it.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(input);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = tape.grad_tensor(leaf).into_data();

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport { max_rel_error, worst_index, analytic, numeric, passed: max_rel_error < tol })
}
