use super::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// `|a - b| / max(|a|, |b|, 1e-3)`.
///
/// The floor keeps coordinates whose true derivative is near zero from
/// turning finite-difference round-off into large relative errors; below it
/// the measure degrades to an absolute error scaled by 1e3.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares the tape gradient of a scalar function with central finite
/// differences at every coordinate of `x` and returns the worst
/// [`relative_error`].
///
/// The step for coordinate `i` is `step * max(1, |x_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.leaf(x);
    let out = f(&tape, input)?;
    let analytic = out.backward()?.wrt(&input);

    let eval = |v: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let t = Tensor::new(x.shape(), v)?;
        Ok(f(&tape, tape.leaf(&t))?.value().item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let h = step * x.data()[i].abs().max(1.0);
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
