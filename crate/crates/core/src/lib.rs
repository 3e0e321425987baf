//! Desk-scale set-prediction detection with pattern-composed dynamic
//! queries and quality-aware one-to-many label assignment.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tape-based reverse-mode differentiation and a
//!   finite-difference checker.
//! - [`geometry`]: centre-size boxes, IoU / GIoU and box losses.
//! - [`matching`]: Hungarian one-to-one matching with an exhaustive oracle.
//! - [`assignment`]: quality scores, adaptive positive counts and the
//!   one-to-many loss.
//! - [`patterns`]: shared base patterns, the content-aware weight
//!   generator and the diversity regularizer.
//! - [`toymodel`]: synthetic scenes, the decoder and the training loop.
//! - [`metrics`]: Gini coefficient, activation statistics and AP.
//! - [`harness`]: experiment configuration, sweeps, persistence and reports.

pub mod assignment;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod patterns;
pub mod toymodel;

pub use error::{Error, Result};
