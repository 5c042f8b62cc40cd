//! Streaming bifocal transducer with dual-attention catalog biasing.
//!
//! A small encoder and attention network handle the buffered lead-in audio up
//! to the wake-word end frame; a large encoder and attention network handle
//! the rest. Each side attends only to its own slice of the user catalog.

pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod transducer;
pub mod text;
pub mod biasing;
pub mod model;
pub mod runtime;
pub mod datagen;
pub mod training;
pub mod evalkit;
pub mod experiment;
pub mod checkpoint;
