//! CPU inference engine for YOLO11-family object detectors.
//!
//! Layers, from the bottom up:
//!
//! - [`tensor`] and [`ops`]: NCHW tensors and the numerical kernels.
//! - [`blocks`]: Conv-BN-SiLU, C2f / C3k / C3k2, SPPF, PSA and C2PSA.
//! - [`model`]: the scaled backbone–neck–head graph, accounting and weights.
//! - [`detect`]: letterbox, head decoding, NMS.
//! - [`metrics`]: IoU, precision / recall, AP and mAP.
//! - [`io`]: PPM images, weights container, annotation and detection files.
//! - [`pipeline`] and [`commands`]: end-to-end detection, timing, CLI backends.

pub mod blocks;
pub mod commands;
pub mod detect;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelGraph, VariantSpec};
pub use tensor::{Dims, Tensor};

/// Sizes the global rayon pool from `Y11_THREADS` when set. Results do not
/// depend on the thread count. Returns the thread count in effect.
pub fn init_threads_from_env() -> usize {
    if let Some(n) = std::env::var("Y11_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    rayon::current_num_threads()
}
