use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |autodiff_i − fd_i| / max(1, |fd_i|)`. `f` is re-evaluated
/// on a fresh tape for every perturbed input, so it must be a pure function of
/// its argument.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: Tensor, track: bool| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, track);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::contract(
                "grad_check",
                format!("function output has shape {:?}, expected a scalar", tape.value(out).shape()),
            ));
        }
        Ok((tape, v, out))
    };

    let (tape, v, out) = eval(x.clone(), true)?;
    let analytic = tape.backward(out)?.get_or_zeros(v);

    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let (t1, _, o1) = eval(Tensor::from_parts(x.shape().to_vec(), probe.clone()), false)?;
        probe[i] = orig - h;
        let (t2, _, o2) = eval(Tensor::from_parts(x.shape().to_vec(), probe.clone()), false)?;
        probe[i] = orig;
        let fd = (t1.value(o1).item() - t2.value(o2).item()) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
