//! Learned importance sampling in a renderer's primary sample space.
//!
//! The library warps the unit hypercube with a stack of bijective affine
//! coupling layers trained by maximum likelihood on resampled path-throughput
//! data. The warp's Jacobian determinant gives the sampling density, so a
//! black-box renderer fed with warped samples stays unbiased while its
//! variance drops wherever the learned density tracks the integrand.
//!
//! Module map:
//! - [`admath`]: dense `f64` arrays plus a reverse-mode differentiation tape.
//! - [`nnet`]: the residual scale/translation networks and the Adam optimizer.
//! - [`coupling`]: affine coupling layers, masks, and the cube/logit wrapper.
//! - [`flow`]: the stacked warp, density queries, training, checkpoints.
//! - [`render`]: quad-scene black box (3D direct, 5D one-bounce) and toy densities.
//! - [`pipeline`]: data collection, luminance resampling, splatting estimators, metrics.

pub mod admath;
pub mod coupling;
mod error;
pub mod flow;
pub mod img;
pub mod nnet;
pub mod pipeline;
pub mod render;
pub mod rng;

pub use error::{Error, Result};

/// Keep large transient buffers inside the process instead of returning them
/// to the kernel. Training and batched inference allocate and free hundreds
/// of ~100 KB arrays per step; glibc's default mmap threshold turns each into
/// a fresh mapping whose pages fault on first touch. Binaries that drive
/// training or rendering should call this once at startup; it is harmless
/// elsewhere.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 128 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 128 << 20);
    }
}
