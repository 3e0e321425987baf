use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `theta` against central
/// differences with step `eps`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates. `f` is evaluated twice at `theta` first; differing values
/// are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside (0, 1e-2]"
        )));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let t = Tensor::new(theta.shape(), data.to_vec())?;
        let x = tape.leaf(&t);
        Ok(f(&tape, x)?.item())
    };

    let tape = Tape::new();
    let x = tape.leaf(&theta.clone().with_grad());
    let loss = f(&tape, x)?;
    let base = loss.item();
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.numel()]);

    let again = eval(theta.data())?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "repeated evaluation gave {base} then {again}"
        )));
    }

    let mut worst = 0.0_f64;
    let mut probe = theta.data().to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
