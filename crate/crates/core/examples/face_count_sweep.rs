//! Embedding latency as the number of faces per frame grows, f32 and int8.

use facepipe::fixtures::{
    detector_model, embedder_model, frame_with_faces, EMBEDDER_SEED, FRAME_SIZE,
};
use facepipe::infer::{calibrate_and_quantize, Precision};
use facepipe::perf::pipeline::{Pipeline, PipelineConfig};
use facepipe::perf::{sweep_faces, write_csv};
use facepipe::recognize::{embed_face, RecognizeError};
use facepipe::tensor::normalize_to_tensor;

fn main() {
    let det = detector_model(FRAME_SIZE).unwrap();
    let emb = embedder_model(EMBEDDER_SEED).unwrap();
    let pipe = Pipeline::new(&det, &emb, PipelineConfig::default());
    let frame = frame_with_faces(8);
    let (dets, _) = pipe.detect(&frame).unwrap();
    let crops: Vec<_> = dets.iter().map(|d| pipe.crop(&frame, d).unwrap()).collect();
    let q = calibrate_and_quantize(
        &emb,
        &crops.iter().map(normalize_to_tensor).collect::<Vec<_>>(),
    )
    .unwrap();

    let counts: Vec<usize> = (1..=8).collect();
    let mut reports = Vec::new();
    for (model, precision) in [(&emb, Precision::F32), (&q, Precision::I8)] {
        reports.extend(
            sweep_faces(
                |k| -> Result<(), RecognizeError> {
                    for c in &crops[..k] {
                        embed_face(model, c, precision)?;
                    }
                    Ok(())
                },
                &counts,
                precision,
                5,
                30,
            )
            .unwrap(),
        );
    }
    write_csv(&reports, std::io::stdout()).unwrap();
}
