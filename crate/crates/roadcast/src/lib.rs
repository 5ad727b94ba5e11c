//! Traffic-speed forecasting on road networks.
//!
//! `roadcast` trains a spatio-temporal encoder — per-node temporal
//! self-attention composed with Chebyshev spectral graph convolution — with a
//! supervised forecasting loss plus two heterogeneity-aware self-supervised
//! objectives over adaptively augmented views of the data. Everything runs on
//! a small double-precision reverse-mode autodiff core built for
//! verifiability: every differentiable operation is checked against central
//! finite differences.
//!
//! See the `book/` guide at the repository root for a chapter-by-chapter tour;
//! the code snippets there compile and run as doctests of this crate.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
