//! Average precision of the fixture detector on a group frame, and on a
//! small hand-made ranking.

use facepipe::detect::{detect_faces, DetectionFile, DetectorParams};
use facepipe::fixtures::{detector_model, frame_with_faces, slot_box, FRAME_SIZE};
use facepipe::perf::{
    average_precision, evaluate_sets, Difficulty, DifficultyFilter, GroundTruthImage,
    GroundTruthSet, GtBox, ScoredBox,
};

fn main() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [20.0, 20.0, 30.0, 30.0];
    let gt = vec![vec![
        GtBox {
            bbox: a,
            ignore: false,
        },
        GtBox {
            bbox: b,
            ignore: false,
        },
    ]];
    let ranked = [
        ScoredBox {
            image: 0,
            bbox: a,
            score: 0.9,
        },
        ScoredBox {
            image: 0,
            bbox: [100.0, 100.0, 110.0, 110.0],
            score: 0.8,
        },
        ScoredBox {
            image: 0,
            bbox: b,
            score: 0.7,
        },
    ];
    println!(
        "hit, miss, hit: AP = {}",
        average_precision(&ranked, &gt, 0.5).unwrap()
    );

    let model = detector_model(FRAME_SIZE).unwrap();
    let frame = frame_with_faces(6);
    let dets = DetectionFile {
        image: "group".into(),
        width: frame.width(),
        height: frame.height(),
        detections: detect_faces(&model, &frame, &DetectorParams::default()).unwrap(),
    };
    let truth = GroundTruthSet {
        images: vec![GroundTruthImage {
            image: "group".into(),
            boxes: (0..6).map(slot_box).collect(),
            difficulty: (0..6)
                .map(|k| {
                    if k < 3 {
                        Difficulty::Easy
                    } else {
                        Difficulty::Hard
                    }
                })
                .collect(),
        }],
    };
    for f in [
        DifficultyFilter::Easy,
        DifficultyFilter::Hard,
        DifficultyFilter::All,
    ] {
        println!(
            "fixture detector, {f:?}: AP = {}",
            evaluate_sets(&[dets.clone()], &truth, f, 0.5).unwrap()
        );
    }
}
