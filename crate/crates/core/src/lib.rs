//! Block-selective fine-tuning engine for Vision Transformers.
//!
//! The crate provides a reverse-mode autodiff tape over dense `f64` tensors
//! ([`tape`]), a pre-LN ViT encoder recorded on that tape ([`vit`]), the
//! block-selection / token-dropping policy ([`policy`]), an analytical
//! activation-memory and FLOPs model that can be audited byte-for-byte
//! against the live tape ([`memory`]), and a small deterministic training
//! harness ([`train`]).
//!
//! The crate is `no_std` (with `alloc`); all IO lives in the companion CLI
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod gradcheck;
pub mod memory;
pub mod policy;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

use alloc::string::String;
use core::fmt;

use tape::BufferRole;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    Dimension(String),
    /// A computation produced a non-finite value (NaN or infinity).
    Numeric(String),
    /// An invalid block-selection plan or configuration.
    Plan(String),
    /// Backward tried to read a buffer the tape did not retain.
    RetentionViolation { role: BufferRole, value: usize },
    /// A closure evaluated twice under the same seed produced different results.
    Determinism(String),
    /// A gradient was produced or applied for a frozen parameter.
    FrozenGradient(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Plan(msg) => write!(f, "plan error: {msg}"),
            Error::RetentionViolation { role, value } => write!(
                f,
                "retention violation: backward read value #{value} ({role:?}) which was not retained"
            ),
            Error::Determinism(msg) => write!(f, "determinism error: {msg}"),
            Error::FrozenGradient(msg) => write!(f, "frozen-parameter gradient: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
