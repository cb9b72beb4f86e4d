//! Desk-scale generative recommender with locate-then-edit cold-start repair.
//!
//! The pipeline: tokenize items into semantic IDs, train a small
//! encoder-decoder over interaction histories, reproduce the cold-start
//! failure, then repair it with closed-form FFN updates gated per decoding
//! position.
//!
//! Model math is generic over the scalar type (see [`num::Scalar`]);
//! concrete aliases live at the crate root. The ridge solver always runs in
//! f64 regardless of model precision.

pub mod data;
pub mod error;
pub mod evalkit;
pub mod knowledge;
pub mod linalg;
pub mod locator;
pub mod model;
pub mod num;
pub mod decoding;
pub mod editor;
pub mod pipeline;
pub mod synthetic;
pub mod testing;
pub mod tokenizer;

pub use error::{CoreError, Result};
pub use num::Scalar;

/// Training-precision model (the pipeline default).
pub type ModelF32 = model::Model<f32>;
/// Double-precision model, used by finite-difference checks.
pub type ModelF64 = model::Model<f64>;

/// Configure the global thread budget. Call once, before any parallel work;
/// later calls are ignored (rayon pools are process-global).
pub fn init_thread_pool(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}
