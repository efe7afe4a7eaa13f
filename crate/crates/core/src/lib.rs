//! Real-time face recognition: detection post-processing, five-point
//! alignment, embedding inference on f32 or int8 paths, gallery
//! verification/identification, and a latency/accuracy measurement harness.

pub mod align;
pub mod cli;
pub mod config;
pub mod detect;
pub mod fixtures;
pub mod imageio;
pub mod infer;
pub mod perf;
pub mod recognize;
pub mod tensor;
