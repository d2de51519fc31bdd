//! Registration-operator algebra, atlas construction, feature pipelines and
//! linear probing for predicting knee osteoarthritis state and progression
//! from image-derived features.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atlas;
pub mod clinical;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod icon;
pub mod pipeline;
pub mod probe;
pub mod synth;

pub use error::{Error, Result};
