//! Contrastive alignment of images with texts in many languages.

pub mod corpus;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
