//! Central finite-difference verification of the reverse pass.

use super::{NumericError, Tape, Tensor, Var};

/// Compares analytic gradients of a scalar-valued tape function against
/// central differences with step `eps`. Returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all input elements.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, NumericError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, NumericError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_, _>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(NumericError::NonScalarLoss {
                numel: tape.value(out).numel(),
            });
        }
        Ok(tape.value(out).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
