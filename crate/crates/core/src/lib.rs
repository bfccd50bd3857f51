//! Multimodal recommendation with local refinement and global alignment
//! of visual and text item features.
//!
//! Everything runs on a small reverse-mode [`autograd`] tape over `f64`
//! [`Tensor`]s:
//!
//! - [`dream`]: the per-modality refinement module.
//! - [`align`]: the MMD and InfoNCE alignment losses.
//! - [`model`]: projections, graph smoothing, fusion, BPR and the total
//!   objective.
//! - [`data`], [`eval`] and [`train`]: loading, splitting, ranking metrics
//!   and the training loop.
//!
//! ```
//! use alignrec::model::target_dim;
//!
//! assert_eq!(target_dim(4096, 384, 8)?, 48);
//! # Ok::<(), alignrec::Error>(())
//! ```

pub mod align;
pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod dream;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
