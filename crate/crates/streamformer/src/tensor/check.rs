//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare the tape gradient of `f` against central finite differences
/// `(f(x + eps e) - f(x - eps e)) / 2 eps`, coordinate by coordinate, over
/// every input tensor.
///
/// Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// Inputs listed in `exclude` are skipped in the comparison; that is how
/// intentionally severed paths (stop-gradient) are checked without tripping
/// the harness. `f` must be deterministic; it is evaluated twice up front
/// and a bitwise disagreement is an error.
pub fn finite_diff_check<S, F>(
    f: &F,
    inputs: &[Tensor<S>],
    eps: f64,
    exclude: &[usize],
) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite_diff_check", "eps must be positive"));
    }
    let base_a = eval(f, inputs, true)?;
    let base_b = eval(f, inputs, false)?;
    if base_a.value.to_f64().to_bits() != base_b.value.to_f64().to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        if exclude.contains(&idx) {
            continue;
        }
        let analytic = base_a
            .grads
            .get(idx)
            .and_then(|g| g.as_ref())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for coord in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[coord] = S::from_f64(input.data()[coord].to_f64() + eps);
            let f_plus = eval(f, &plus, false)?.value;

            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[coord] = S::from_f64(input.data()[coord].to_f64() - eps);
            let f_minus = eval(f, &minus, false)?.value;

            let numeric = (f_plus.to_f64() - f_minus.to_f64()) / (2.0 * eps);
            let a = analytic.data()[coord].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Evaluated<S> {
    value: S,
    grads: Vec<Option<Tensor<S>>>,
}

fn eval<S, F>(f: &F, inputs: &[Tensor<S>], with_grad: bool) -> Result<Evaluated<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), with_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    let value = tape.value(out).item();
    let grads = if with_grad {
        tape.backward(out)?;
        vars.iter().map(|&v| tape.grad(v)).collect()
    } else {
        Vec::new()
    };
    Ok(Evaluated { value, grads })
}

/// Single input, nothing excluded.
pub fn finite_diff_check_single<S, F>(f: &F, input: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    finite_diff_check(f, std::slice::from_ref(input), eps, &[])
}
