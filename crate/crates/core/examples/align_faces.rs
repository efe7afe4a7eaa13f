//! Five-point alignment of detected faces onto the 112x112 template.

use facepipe::align::{align_face, DEFAULT_TEMPLATE};
use facepipe::detect::{detect_faces, DetectorParams};
use facepipe::fixtures::{detector_model, frame_with_faces, FRAME_SIZE};
use facepipe::imageio::save_png;

fn main() {
    let model = detector_model(FRAME_SIZE).unwrap();
    let frame = frame_with_faces(3);
    let out = std::env::temp_dir().join("facepipe-aligned");
    std::fs::create_dir_all(&out).unwrap();
    for (k, d) in detect_faces(&model, &frame, &DetectorParams::default())
        .unwrap()
        .iter()
        .enumerate()
    {
        let aligned = align_face(&frame, d, &DEFAULT_TEMPLATE).unwrap();
        let t = aligned.transform;
        println!(
            "face {k}: scale {:.4}, rotation {:.4} rad, residual {:.3e}",
            t.scale(),
            t.rotation(),
            t.residual(&d.landmarks, &DEFAULT_TEMPLATE)
        );
        let path = out.join(format!("face_{k}.png"));
        save_png(&aligned.image, &path).unwrap();
        println!("  wrote {}", path.display());
    }
}
