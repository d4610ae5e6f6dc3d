//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape, Tensor};

/// Compare the analytic gradient of a scalar function against central
/// finite differences.
///
/// `f` rebuilds the computation on the given tape from the input node;
/// it must be deterministic. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let id = tape.leaf(&t);
        let out = f(&mut tape, id)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(
                "grad_check requires a scalar-valued function".into(),
            ));
        }
        Ok(tape.value(out)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut input = x.clone();
    input.requires_grad = true;
    let id = tape.leaf(&input);
    let out = f(&mut tape, id)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let analytic = tape.grad(id).expect("input requires grad").to_vec();

    let mut data = x.data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let fp = eval(&data)?;
        data[i] = orig - step;
        let fm = eval(&data)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
