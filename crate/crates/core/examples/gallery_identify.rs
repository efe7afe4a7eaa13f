//! Enroll three identities, then identify every face in a group frame.

use facepipe::fixtures::{
    detector_model, embedder_model, synthetic_frame, EMBEDDER_SEED, FRAME_SIZE,
};
use facepipe::perf::pipeline::{Pipeline, PipelineConfig};
use facepipe::recognize::Gallery;

fn main() {
    let det = detector_model(FRAME_SIZE).unwrap();
    let emb = embedder_model(EMBEDDER_SEED).unwrap();
    let pipe = Pipeline::new(&det, &emb, PipelineConfig::default());

    let mut gallery = Gallery::new(emb.embedding_dim());
    for (id, name) in [(0, "ada"), (1, "grace"), (2, "alan")] {
        let frame = synthetic_frame(&[id]);
        let (dets, _) = pipe.detect(&frame).unwrap();
        let e = pipe.embed(&pipe.crop(&frame, &dets[0]).unwrap()).unwrap();
        gallery.enroll(name, name, e).unwrap();
    }

    // identities 0..5: the last two were never enrolled
    let group = synthetic_frame(&[0, 1, 2, 3, 4]);
    for r in pipe.process_frame(&group, &gallery).unwrap() {
        println!("{}", serde_json::to_string(&r).unwrap());
    }
}
