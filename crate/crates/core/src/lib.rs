//! Saliency-based feature selection.
//!
//! A model is trained, and the absolute gradient of a *gain function* with
//! respect to each input sample measures how much every feature contributes
//! to that sample being predicted well. Aggregating those saliency vectors
//! gives a global relevance score per feature; repeating the process while
//! zeroing out the least relevant features yields a full feature ranking.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`diff`]: dense tensors and a reverse-mode
//!   differentiation graph that returns gradients with respect to the input.
//! * [`models`]: softmax, MLP and linear SVM models with a minibatch trainer.
//! * [`gain`]: the three gain functions.
//! * [`saliency`]: per-sample saliency, aggregation, and an adversarial probe.
//! * [`sfs`]: the iterative ranker.
//! * [`data`] and [`eval`]: datasets, feature curves and precision@k.

pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod gain;
pub mod gradcheck;
pub mod models;
pub mod saliency;
pub mod sfs;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/gains.md")]
    mod gains {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/data-formats.md")]
    mod data_formats {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
