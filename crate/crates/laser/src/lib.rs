//! Tuning-free text-conditioned image-to-animation.
//!
//! The pipeline turns an input image plus a free-form animation description
//! into a sequence of frames: an LLM controller decomposes the description
//! into stage prompts and picks a feature/attention injection strategy per
//! transition, a DDIM engine inverts the source image while capturing
//! activations, and the generator denoises interpolated text embeddings under
//! the selected injection hooks to produce the frames.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod generator;
pub mod image_io;
pub mod controller;
pub mod ddim;
pub mod benchmark;
pub mod config;
pub mod injection;
pub mod metrics;
pub mod schedule;
pub mod trace;

pub use error::{Error, Result};
