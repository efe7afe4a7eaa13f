//! Serial versus overlapped processing of a short frame stream, with
//! per-frame latency statistics.

use std::time::Instant;

use facepipe::fixtures::{
    detector_model, embedder_model, synthetic_frame, EMBEDDER_SEED, FRAME_SIZE,
};
use facepipe::perf::pipeline::{Pipeline, PipelineConfig};
use facepipe::perf::LatencyStats;
use facepipe::recognize::Gallery;

fn main() {
    let det = detector_model(FRAME_SIZE).unwrap();
    let emb = embedder_model(EMBEDDER_SEED).unwrap();
    let pipe = Pipeline::new(&det, &emb, PipelineConfig::default());
    let mut gallery = Gallery::new(emb.embedding_dim());
    let enroll_frame = synthetic_frame(&[1]);
    let (dets, _) = pipe.detect(&enroll_frame).unwrap();
    gallery
        .enroll(
            "visitor",
            "Visitor",
            pipe.embed(&pipe.crop(&enroll_frame, &dets[0]).unwrap())
                .unwrap(),
        )
        .unwrap();

    let frames: Vec<_> = (0..20u64).map(|t| synthetic_frame(&[t % 3, 1])).collect();

    let mut serial = Vec::new();
    let t0 = Instant::now();
    for f in &frames {
        let t = Instant::now();
        pipe.process_frame(f, &gallery).unwrap();
        serial.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let serial_wall = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let runs = pipe.run_overlapped(&frames, &gallery).unwrap();
    let overlapped_wall = t0.elapsed().as_secs_f64();
    let overlapped: Vec<f64> = runs.iter().map(|(_, d)| d.as_secs_f64() * 1000.0).collect();
    let seen = runs
        .iter()
        .filter(|(r, _)| r.iter().any(|f| f.matched.accepted))
        .count();

    for (name, samples, wall) in [
        ("serial", &serial, serial_wall),
        ("overlapped", &overlapped, overlapped_wall),
    ] {
        let s = LatencyStats::from_samples(samples).unwrap();
        println!(
            "{name:>10}: {:.1} frames/s, latency mean {:.2} ms, p50 {:.2}, p99 {:.2}",
            frames.len() as f64 / wall,
            s.mean,
            s.p50,
            s.p99
        );
    }
    println!("visitor recognised in {seen} of {} frames", frames.len());
}
