//! Central-finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare the tape's gradients of a scalar-valued function against central
/// finite differences, returning the maximum relative error
/// `|autodiff - numeric| / max(1, |numeric|)` over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::BadParameter {
            op: "grad_check",
            detail: format!("eps must be positive, got {eps}"),
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::LossNotScalar {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .expect("var belongs to tape")
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric pass, one coordinate at a time.
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let orig = t.data()[ci];
            let mut plus = t.data().to_vec();
            plus[ci] = orig + eps;
            work[ti] = Tensor::new(t.shape().to_vec(), plus)?;
            let f_plus = eval(&work)?;
            let mut minus = t.data().to_vec();
            minus[ci] = orig - eps;
            work[ti] = Tensor::new(t.shape().to_vec(), minus)?;
            let f_minus = eval(&work)?;
            work[ti] = t.clone();

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = (analytic[ti][ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
