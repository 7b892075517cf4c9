//! Target/distractor decoding of EEG epochs conditioned on per-subject
//! identification attributes.
//!
//! The crate covers the whole chain: a canonical dataset layout and a
//! synthetic generator ([`dataset`]), the signal chain ([`preprocess`]),
//! profile embedding and fusion ([`conditioning`]), three decoders
//! ([`models`]), training and the evaluation protocol ([`train_eval`]) and
//! the embedding-space analysis ([`embed_analysis`]).

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod dataset;
pub mod embed_analysis;
pub mod error;
pub mod models;
pub mod preprocess;
pub mod rng;
pub mod train_eval;

pub use error::{Error, Result};
