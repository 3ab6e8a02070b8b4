//! Two-timescale recurrent reasoning model with Q-learned adaptive halting,
//! plus the puzzle-data toolchain (Sudoku, mazes, ARC-style grids) and the
//! analysis instruments used to probe the trained dynamics.
//!
//! The model couples a fast low-level recurrent module with a slow high-level
//! module. One forward pass ("segment") runs `N` cycles of `T` low-level steps;
//! training applies a loss and an optimizer step after every segment, carrying
//! a gradient-severed state pair between segments, and backpropagates only
//! through the final low-level/high-level update of each segment.
//!
//! Crate layout:
//! - [`model`]: transformer-block stacks (RoPE attention, gated MLP, post-norm
//!   RMSNorm), parameters, initialization, manual backward passes.
//! - [`dynamics`]: the cycle schedule, segment forward/backward, state traces.
//! - [`act`]: deep-supervision trainer, halting machinery, evaluation.
//! - [`optim`]: Adam variant with atan2 update and decoupled weight decay.
//! - [`data`]: puzzle generation, grading, augmentation, tokenization, splits.
//! - [`analysis`]: participation ratio, PCA, residuals, prediction decoding.
//! - [`checkpoint`]: bit-exact run state persistence.

pub mod act;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod num;
pub mod optim;
pub mod rng;

pub use config::ModelConfig;
pub use error::{HrmError, Result};
pub use num::Real;

/// Token id reserved for padding in every task vocabulary.
pub const PAD_TOKEN: u16 = 0;

/// Initialize the global worker pool, honoring the `HRM_THREADS` cap.
///
/// Safe to call more than once; only the first call takes effect.
pub fn init_thread_pool() {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HRM_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                builder = builder.num_threads(n);
            }
        }
    }
    let _ = builder.build_global();
}
