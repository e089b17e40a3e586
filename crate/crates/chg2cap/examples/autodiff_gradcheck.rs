//! Drive the tensor engine directly: build a small computation on the tape,
//! run the backward pass, and compare against central finite differences.
//!
//!     cargo run --release --example autodiff_gradcheck

use chg2cap::rng::Rng;
use chg2cap::tensor::{grad_check, Tape, Tensor, DEFAULT_STEP};

fn main() -> Result<(), chg2cap::Error> {
    // Forward + backward by hand: loss = sum((x W + b)^2).
    let mut rng = Rng::new(42);
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect())?.with_grad();
    let w = Tensor::new(vec![4, 2], (0..8).map(|_| rng.normal()).collect())?.with_grad();
    let b = Tensor::new(vec![2], vec![0.1, -0.2])?.with_grad();

    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.matmul(xi, wi)?;
    let y = tape.add_bias_row(y, bi)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.sum(sq);
    println!("loss = {:.6}", tape.value(loss).data()[0]);

    tape.backward(loss)?;
    println!("dL/db = {:?}", tape.grad(bi).unwrap());

    // The same gradients, validated against finite differences.
    for (name, probe) in [("x", &x), ("w", &w), ("b", &b)] {
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        let err = grad_check(
            move |t, id| {
                let (xi, wi, bi) = match name {
                    "x" => (id, t.constant(wc.clone()), t.constant(bc.clone())),
                    "w" => (t.constant(xc.clone()), id, t.constant(bc.clone())),
                    _ => (t.constant(xc.clone()), t.constant(wc.clone()), id),
                };
                let y = t.matmul(xi, wi)?;
                let y = t.add_bias_row(y, bi)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            probe,
            DEFAULT_STEP,
        )?;
        println!("grad check wrt {name}: max rel err {err:.3e}");
    }

    // A composite with softmax and cross entropy, the training-loss shape.
    let logits = Tensor::new(vec![4, 7], (0..28).map(|_| rng.normal()).collect())?;
    let err = grad_check(
        |t, id| {
            let probs = t.softmax_rows(id)?;
            t.nll_loss(probs, &[(0, 3), (1, 0), (2, 6), (3, 2)])
        },
        &logits,
        DEFAULT_STEP,
    )?;
    println!("grad check softmax+nll: max rel err {err:.3e}");
    Ok(())
}
