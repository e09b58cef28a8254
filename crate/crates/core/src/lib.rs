//! Self-refinement of autoregressively generated visual tokens.
//!
//! A small causal transformer (the backbone) solves in-context grid tasks
//! token by token. A residual refiner then adjusts the embeddings of all
//! generated tokens jointly and a cosine nearest-neighbour lookup against the
//! backbone's embedding matrix maps them back to tokens.

pub mod backbone;
pub mod error;
pub mod evalharness;
pub mod numkernel;
pub mod refiner;
pub mod synthdata;
pub mod tokenizer;

pub use error::{Error, Result};
