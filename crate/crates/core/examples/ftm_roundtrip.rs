//! Save a model to the FTM container, load it back and show how damaged
//! files are reported.

use facepipe::fixtures::{embedder_model, EMBEDDER_SEED};
use facepipe::infer::{count_flops, load_model, save_model};

fn main() {
    let model = embedder_model(EMBEDDER_SEED).unwrap();
    let bytes = save_model(&model);
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    println!(
        "{} bytes: {} header + {} weights; {} layers, {} tensors, {} FLOPs",
        bytes.len(),
        header_len,
        bytes.len() - 8 - header_len as usize,
        model.layers().len(),
        model.weights().len(),
        count_flops(&model)
    );
    assert_eq!(load_model(&bytes).unwrap(), model);
    println!("reloaded model is identical");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic: {}", load_model(&bad).unwrap_err());
    println!(
        "truncated: {}",
        load_model(&bytes[..bytes.len() - 10]).unwrap_err()
    );
}
