//! Records a tiny conv → relu → pool → dense network on a tape, runs the
//! reverse sweep, and takes one SGD step.

use prunekit::{Result, Sgd, Tape, Tensor};

fn main() -> Result<()> {
    let x = Tensor::from_fn([2, 1, 6, 6], |i| ((i * 7) % 11) as f64 / 10.0 - 0.5);
    let mut kernels = Tensor::from_fn([3, 1, 3, 3], |i| ((i % 5) as f64 - 2.0) / 10.0);
    let mut kbias = Tensor::zeros([3]);
    let mut w = Tensor::from_fn([4, 12], |i| ((i % 7) as f64 - 3.0) / 20.0);
    let mut b = Tensor::zeros([4]);

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let kv = tape.leaf(kernels.clone().with_requires_grad(true));
    let kbv = tape.leaf(kbias.clone().with_requires_grad(true));
    let wv = tape.leaf(w.clone().with_requires_grad(true));
    let bv = tape.leaf(b.clone().with_requires_grad(true));

    let h = tape.conv2d(xv, kv, kbv, 1, 0)?; // [2, 3, 4, 4]
    let h = tape.relu(h)?;
    let h = tape.maxpool2x2(h)?; // [2, 3, 2, 2]
    let h = tape.flatten(h)?;
    let logits = tape.dense(h, wv, bv)?;
    let loss = tape.softmax_cross_entropy(logits, &[1, 3])?;
    println!("loss {:.6}", tape.value(loss)?.item());

    tape.backward(loss)?;
    let gk = tape.take_grad(kv)?.unwrap_or_default();
    println!("d loss / d kernels (first filter): {:?}", &gk[..9]);

    for (t, v) in [
        (&mut kernels, kv),
        (&mut kbias, kbv),
        (&mut w, wv),
        (&mut b, bv),
    ] {
        let g = tape.take_grad(v)?.unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)?;
    }
    // Freeze kernel entry 0, as a pruning mask would.
    let mut keep = vec![true; kernels.numel()];
    keep[0] = false;
    let mut sgd = Sgd::new(0.9);
    sgd.step(
        &mut [&mut kernels, &mut kbias, &mut w, &mut b],
        &[Some(&keep), None, None, None],
        0.1,
    )?;
    println!("kernel[0] after a masked step: {}", kernels.data()[0]);
    Ok(())
}
