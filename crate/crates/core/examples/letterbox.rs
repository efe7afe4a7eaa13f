//! Letterbox a wide frame into the square detector input and map a point
//! back to the source.

use facepipe::tensor::{letterbox, Image, DEFAULT_LETTERBOX_FILL};

fn main() {
    let mut img = Image::filled(1280, 720, [30, 60, 90]).unwrap();
    img.put(1000, 500, [255, 255, 255]);
    let (canvas, meta) = letterbox(&img, 640, 640, DEFAULT_LETTERBOX_FILL).unwrap();
    println!(
        "{}x{} -> {}x{}: scale {}, pad ({}, {})",
        img.width(),
        img.height(),
        canvas.width(),
        canvas.height(),
        meta.scale,
        meta.pad_left,
        meta.pad_top
    );
    let (cx, cy) = meta.map_point(1000.0, 500.0);
    println!("source (1000, 500) lands at ({cx}, {cy}) in the canvas");
    println!(
        "and maps back to ({}, {})",
        (cx - meta.pad_left) / meta.scale,
        (cy - meta.pad_top) / meta.scale
    );
    println!("top-left canvas pixel is fill: {:?}", canvas.get(0, 0));
}
