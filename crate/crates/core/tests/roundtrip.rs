//! Persistence: galleries, benchmark reports and FTM model files.

mod common;

use common::rng;
use facepipe::fixtures::{embedder_model, random_micro_net};
use facepipe::infer::Precision;
use facepipe::infer::{load_model, save_model, InferError};
use facepipe::perf::{
    emit_report, load_report, read_csv, write_csv, BenchSpec, PerfReport, ReportFormat, Stage,
    CSV_COLUMNS,
};
use facepipe::recognize::{Embedding, Gallery, RecognizeError};
use proptest::prelude::*;
use rand::Rng;

fn random_embedding(r: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::normalized((0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn gallery_save_load_is_bit_stable() {
    let mut r = rng(3);
    let mut g = Gallery::new(128);
    for k in 0..6 {
        let id = format!("p{k}");
        g.enroll(&id, &format!("Person {k}"), random_embedding(&mut r, 128))
            .unwrap();
        if k % 2 == 0 {
            g.enroll(&id, "", random_embedding(&mut r, 128)).unwrap();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gallery.json");
    g.save(&path).unwrap();
    let back = Gallery::load(&path).unwrap();
    assert_eq!(back, g);
    for (a, b) in g.entries().zip(back.entries()) {
        for (ea, eb) in a.embeddings.iter().zip(&b.embeddings) {
            let bits = |e: &Embedding| e.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ea), bits(eb));
        }
    }
    let probe = random_embedding(&mut r, 128);
    assert_eq!(
        g.identify(&probe, 0.5).unwrap(),
        back.identify(&probe, 0.5).unwrap()
    );
    // saving again writes the same bytes
    let first = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn gallery_rejects_wrong_dimension_on_load() {
    let mut r = rng(4);
    let mut g = Gallery::new(8);
    g.enroll("a", "A", random_embedding(&mut r, 8)).unwrap();
    let text = g.to_json().unwrap().replacen("\"dim\": 8", "\"dim\": 9", 1);
    assert!(matches!(
        Gallery::from_json(&text),
        Err(RecognizeError::DimensionMismatch { .. })
    ));
}

fn sample_report(r: &mut rand_chacha::ChaCha8Rng, stage: Stage, faces: usize) -> PerfReport {
    let samples: Vec<f64> = (0..r.gen_range(1..50))
        .map(|_| r.gen_range(0.01..80.0))
        .collect();
    let spec = BenchSpec {
        stage,
        precision: if faces % 2 == 0 {
            Precision::F32
        } else {
            Precision::I8
        },
        faces_per_frame: faces,
        warmup: 0,
        frames: samples.len(),
    };
    PerfReport::from_samples(&spec, &samples).unwrap()
}

#[test]
fn csv_reload_is_exact() {
    let mut r = rng(5);
    let reports: Vec<PerfReport> = (1..=8)
        .map(|k| sample_report(&mut r, Stage::Embed, k))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    emit_report(&reports, ReportFormat::Csv, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(load_report(ReportFormat::Csv, &path).unwrap(), reports);

    let json = dir.path().join("r.json");
    emit_report(&reports, ReportFormat::Json, &json).unwrap();
    assert_eq!(load_report(ReportFormat::Json, &json).unwrap(), reports);
}

proptest! {
    #[test]
    fn csv_round_trip_any_values(seed in any::<u64>()) {
        let mut r = rng(seed);
        let reports = vec![sample_report(&mut r, Stage::Detect, 0), sample_report(&mut r, Stage::Pipeline, 3)];
        let mut buf = Vec::new();
        write_csv(&reports, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), reports);
    }
}

#[test]
fn ftm_round_trip_is_byte_stable() {
    let mut r = rng(6);
    for _ in 0..20 {
        let m = random_micro_net(&mut r);
        let bytes = save_model(&m);
        let back = load_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_model(&back), bytes);
    }
    let e = embedder_model(1).unwrap();
    assert_eq!(load_model(&save_model(&e)).unwrap(), e);
}

/// Splits an FTM file into (header JSON, blob).
fn split(bytes: &[u8]) -> (serde_json::Value, Vec<u8>) {
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    (
        serde_json::from_slice(&bytes[8..8 + n]).unwrap(),
        bytes[8 + n..].to_vec(),
    )
}

fn join(header: &serde_json::Value, blob: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).unwrap();
    let mut out = b"FTM1".to_vec();
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(blob);
    out
}

#[test]
fn ftm_corruptions_have_distinct_errors() {
    let bytes = save_model(&embedder_model(2).unwrap());

    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"FTM2");
    assert!(matches!(load_model(&bad_magic), Err(InferError::BadMagic(m)) if &m == b"FTM2"));

    for cut in [0, 3, 7, 40, bytes.len() - 1] {
        assert!(
            matches!(load_model(&bytes[..cut]), Err(InferError::Truncated(_))),
            "cut at {cut}"
        );
    }

    let (mut header, blob) = split(&bytes);
    header["layers"][0]["weight"] = serde_json::json!("no_such_tensor");
    assert!(matches!(
        load_model(&join(&header, &blob)),
        Err(InferError::UnresolvedWeight { name, .. }) if name == "no_such_tensor"
    ));

    let (mut header, blob) = split(&bytes);
    header["version"] = serde_json::json!(7);
    assert!(matches!(
        load_model(&join(&header, &blob)),
        Err(InferError::UnsupportedVersion(7))
    ));
}
