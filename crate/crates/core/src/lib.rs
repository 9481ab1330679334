//! Informative-slice selection and transfer-learning classification of brain
//! volumes.
//!
//! The pipeline runs volume ingestion ([`volume`]) → per-slice histogram
//! entropy ranking ([`select`]) → resize/normalize ([`image`]) → a small CNN
//! ([`nn`]) trained from scratch or with a frozen backbone ([`transfer`]) →
//! k-fold evaluation ([`eval`]).

pub mod eval;
pub mod image;
pub mod nn;
pub mod select;
pub mod transfer;
pub mod volume;
