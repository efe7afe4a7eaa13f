//! Run the fixture detector on a synthetic frame with five faces.

use facepipe::detect::{detect_faces, DetectorParams};
use facepipe::fixtures::{detector_model, frame_with_faces, FRAME_SIZE};

fn main() {
    let model = detector_model(FRAME_SIZE).unwrap();
    let frame = frame_with_faces(5);
    let dets = detect_faces(&model, &frame, &DetectorParams::default()).unwrap();
    println!("{} faces", dets.len());
    for d in &dets {
        let b = d.bbox;
        println!(
            "score {:.3}  box [{:.1}, {:.1}, {:.1}, {:.1}]  left eye ({:.1}, {:.1})",
            d.score, b[0], b[1], b[2], b[3], d.landmarks[0][0], d.landmarks[0][1]
        );
    }
}
