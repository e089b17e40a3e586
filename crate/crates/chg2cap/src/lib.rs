//! Change captioning for bitemporal imagery at desk scale.
//!
//! The crate implements an attentive encoder-decoder captioning model end to
//! end on a minimal f64 autodiff engine: a Siamese-style feature ingestion
//! layer, a hierarchical self-attention encoder with a cosine-mask residual
//! fusion block, a transformer caption decoder with greedy inference, an Adam
//! training harness, and corpus caption metrics (BLEU, ROUGE-L, CIDEr-D, and
//! exact-match METEOR). Everything is deterministic: a (seed, config, data)
//! triple reproduces bit-identical checkpoints.
//!
//! Start with the runnable examples (`cargo run --example train_overfit`) or
//! the `chg2cap` binary, which exposes the full pipeline as subcommands.

#![forbid(unsafe_code)]

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{grad_check, Tape, Tensor, TensorId};
