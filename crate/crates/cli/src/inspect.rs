//! `refml inspect` — human-readable checkpoint report.

use std::path::Path;

use refml_core::model::{load_checkpoint, segment_of, Segment};
use refml_core::Result;

pub fn cmd_inspect(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    println!("checkpoint: {}", path.display());
    println!("spec hash: {:016x}", ck.spec_hash);
    println!("entries: {}", ck.params.len());

    let mut encoder_tensors = 0usize;
    let mut encoder_elems = 0usize;
    let mut predictor_tensors = 0usize;
    let mut predictor_elems = 0usize;
    for (name, t) in ck.params.iter() {
        match segment_of(name) {
            Segment::Encoder => {
                encoder_tensors += 1;
                encoder_elems += t.numel();
            }
            Segment::Predictor => {
                predictor_tensors += 1;
                predictor_elems += t.numel();
            }
        }
    }
    println!("encoder: {encoder_tensors} tensors, {encoder_elems} parameters");
    println!("predictor: {predictor_tensors} tensors, {predictor_elems} parameters");

    if let (Some(fc1), Some(fc2)) = (
        ck.params.get("predictor.fc1.weight"),
        ck.params.get("predictor.fc2.weight"),
    ) {
        if let ([hidden, flatten], [classes, _]) = (fc1.shape(), fc2.shape()) {
            println!("flatten length: {flatten}");
            println!("embedding width: {hidden}");
            println!("predictor path: {flatten} -> {hidden} -> {classes}");
        }
    }

    for (name, t) in ck.params.iter() {
        println!("  {name}  shape {:?}  norm {:.6}", t.shape(), t.norm());
    }
    Ok(())
}
