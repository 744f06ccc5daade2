//! Reverse-mode gradients checked against central differences.

use jco_mvton::tensor::{grad_check, Tape, Tensor};
use jco_mvton::Result;

pub fn run() -> Result<f64> {
    // Σ x² at x = [1, 2] has gradient [2, 4]
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0])?, true);
    let sq = tape.mul(x, x)?;
    let loss = tape.sum(sq);
    let grads = tape.backward(loss)?;
    println!("d/dx sum(x^2) at [1, 2] = {:?}", grads.get_or_zeros(x).data());

    // a small softmax-attention-like composite
    let w = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 * 0.1 - 0.2);
    let x0 = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.37).sin());
    let err = grad_check(
        |tape, x| {
            let wv = tape.constant(w.clone());
            let h = tape.matmul_nt(x, wv)?;
            let h = tape.silu(h);
            let p = tape.softmax(h, None)?;
            let n = tape.rms_norm(p, None, 1e-6)?;
            Ok(tape.mean(n))
        },
        &x0,
        1e-5,
    )?;
    println!("matmul -> silu -> softmax -> rms_norm -> mean: rel-err {err:.2e}");
    Ok(err)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
