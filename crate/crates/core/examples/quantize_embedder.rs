//! Calibrate the fixture embedder on face crops, quantize it to int8 and
//! compare embeddings from both paths.

use facepipe::fixtures::{
    detector_model, embedder_model, frame_with_faces, EMBEDDER_SEED, FRAME_SIZE,
};
use facepipe::infer::{calibrate_and_quantize, save_model, Precision};
use facepipe::perf::pipeline::{Pipeline, PipelineConfig};
use facepipe::recognize::{cosine, embed_face};
use facepipe::tensor::normalize_to_tensor;

fn main() {
    let det = detector_model(FRAME_SIZE).unwrap();
    let emb = embedder_model(EMBEDDER_SEED).unwrap();
    let pipe = Pipeline::new(&det, &emb, PipelineConfig::default());
    let frame = frame_with_faces(10);
    let (dets, _) = pipe.detect(&frame).unwrap();
    let crops: Vec<_> = dets.iter().map(|d| pipe.crop(&frame, d).unwrap()).collect();

    let calib: Vec<_> = crops.iter().map(normalize_to_tensor).collect();
    let q = calibrate_and_quantize(&emb, &calib).unwrap();
    println!(
        "f32 model {} bytes, int8 model {} bytes",
        save_model(&emb).len(),
        save_model(&q).len()
    );
    for (k, c) in crops.iter().enumerate() {
        let a = embed_face(&emb, c, Precision::F32).unwrap();
        let b = embed_face(&q, c, Precision::I8).unwrap();
        println!("face {k}: cosine(f32, i8) = {:.5}", cosine(&a, &b));
    }
}
