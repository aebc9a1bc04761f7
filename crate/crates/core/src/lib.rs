//! Desk-scale diffusion laboratory: train a small denoiser on 2-D toy data,
//! distill few-step students from it, and measure how sampling choices
//! (hybrid base/student inference, skipping the first step, adapter
//! transfer) affect sample diversity.

pub mod control;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod numerics;

pub use error::{LabError, Result};
pub use numerics::{batch_stats, gaussian_pair, psd_sqrt, Mat2, RngStream, Vec2};
