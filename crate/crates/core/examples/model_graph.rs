//! LeNet-5 and the synthetic residual graph: layer specs, parameter counts,
//! and how masking one unit propagates.

use prunekit::model::{build_lenet5, build_synthetic_residual, Counting};
use prunekit::Result;

fn main() -> Result<()> {
    let mut lenet = build_lenet5();
    lenet.init_params(0);
    for l in lenet.layers() {
        println!(
            "{:>2} {:<6} {:?} units {:>3} weights/unit {:>3} successors {:?} multiplicity {}",
            l.id,
            l.name,
            l.kind,
            l.unit_count,
            l.weights_per_unit,
            l.successors,
            l.spatial_multiplicity
        );
    }
    println!("parameters {}", lenet.param_count(Counting::Total));

    lenet.mask_unit(0, 3)?;
    let m = lenet.masks();
    println!(
        "after masking conv1 filter 3: {} unmasked, conv2 has {} masked weights",
        lenet.param_count(Counting::Unmasked),
        m.layer(1).pruned_weights()
    );
    let logits = lenet.forward(&prunekit::Tensor::zeros([1, 1, 28, 28]))?;
    println!("logits shape {:?}", logits.shape());

    let mut res = build_synthetic_residual(2, 4)?;
    for l in res.layers() {
        println!(
            "residual {:>2} {:<10} {:?} input {:?} shortcut {:?}",
            l.id, l.name, l.kind, l.input, l.residual
        );
    }
    for g in res.couplings() {
        println!("coupled {:?}", g.members);
    }
    res.mask_unit(0, 1)?;
    for id in res.coupled_with(0) {
        println!("layer {id} unit 1 kept: {}", res.masks().layer(id).units[1]);
    }
    Ok(())
}
