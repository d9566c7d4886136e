//! Bitwidth-adaptive quantization-aware training.
//!
//! One set of full-precision weights is trained so that it performs well when
//! quantized to any of a set of (weight, activation) bitwidth pairs, including
//! pairs that are only chosen after training. Three trainers are provided: a
//! supervised one with self-distillation, a first-order MAML variant, and a
//! prototypical-network variant for few-shot adaptation to new classes.

pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod models;
pub mod optim;
pub mod quant;

pub use error::{Error, Result};
