//! Writes a pruned model to the archive format and reads it back.

use prunekit::model::build_lenet5;
use prunekit::model::checkpoint::{self, TrainingState};
use prunekit::prune::{apply_plan, plan, Variant};
use prunekit::Result;

fn main() -> Result<()> {
    let mut model = build_lenet5();
    model.init_params(2);
    let pl = plan(&model, Variant::GlobalStructured, 0.6)?;
    apply_plan(&mut model, &pl)?;

    let path = std::env::temp_dir().join("prunekit-example.ckpt");
    let state = TrainingState {
        iteration: 1,
        cumulative_p: 0.6,
        ..Default::default()
    };
    checkpoint::save(&path, &model, &state)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let back = checkpoint::load(&path)?;
    println!("{} ({bytes} bytes), state {:?}", path.display(), back.state);
    println!("masks equal: {}", back.model.masks() == model.masks());
    println!(
        "parameters bit-identical: {}",
        back.model.params() == model.params()
    );

    let mut corrupt = std::fs::read(&path).expect("just written");
    corrupt[0] ^= 0xff;
    std::fs::write(&path, &corrupt).expect("writable");
    println!(
        "corrupted: {}",
        checkpoint::load(&path)
            .err()
            .map(|e| e.to_string())
            .unwrap_or_default()
    );
    let _ = std::fs::remove_file(&path);
    Ok(())
}
