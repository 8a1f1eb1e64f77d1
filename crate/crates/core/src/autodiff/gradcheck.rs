use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn evaluate<T, F>(forward: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Compare reverse-mode gradients of `forward` against central differences.
///
/// Returns `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
/// every element of every parameter. `forward` must be deterministic; two
/// evaluations at the same point that differ are reported as an error.
pub fn grad_check<T, F>(forward: F, params: &[Tensor<T>], eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params.iter().enumerate().flat_map(|(p, t)| (0..t.numel()).map(move |k| (p, k))).collect();
    grad_check_at(forward, params, eps, &coords)
}

/// [`grad_check`] restricted to the `(parameter, element)` coordinates in `coords`.
pub fn grad_check_at<T, F>(forward: F, params: &[Tensor<T>], eps: T, coords: &[(usize, usize)]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let pairs = grad_pairs_at(forward, params, eps, coords)?;
    Ok(pairs.iter().map(|&(a, n)| relative_error(a, n, 1e-8)).fold(0.0, f64::max))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(analytic, numeric)` partial derivatives at each of `coords`.
pub fn grad_pairs_at<T, F>(forward: F, params: &[Tensor<T>], eps: T, coords: &[(usize, usize)]) -> Result<Vec<(f64, f64)>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let base = tape.value(loss).item()?;
    let again = evaluate(&forward, params)?;
    if base != again {
        return Err(Error::NonDeterministic(format!("two evaluations at the same parameters gave {base} and {again}")));
    }
    let grads = tape.backward(loss, &vars)?;

    let mut pairs = Vec::with_capacity(coords.len());
    let mut probe = params.to_vec();
    for &(pi, k) in coords {
        if pi >= params.len() || k >= params[pi].numel() {
            return Err(Error::InvalidArgument(format!("coordinate ({pi}, {k}) outside the parameters")));
        }
        let analytic = grads.get(vars[pi]).expect("every wrt var has a gradient");
        let original = probe[pi].data()[k];
        probe[pi].data_mut()[k] = original + eps;
        let plus = evaluate(&forward, &probe)?;
        probe[pi].data_mut()[k] = original - eps;
        let minus = evaluate(&forward, &probe)?;
        probe[pi].data_mut()[k] = original;
        let numeric = (plus - minus).as_f64() / (2.0 * eps.as_f64());
        pairs.push((analytic.data()[k].as_f64(), numeric));
    }
    Ok(pairs)
}
