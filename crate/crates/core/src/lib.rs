//! Coreference-supervised contrastive pre-training for entity encoders.
//!
//! The pipeline: stories annotated by two coreference systems are merged into
//! consensus chains ([`consensus`]); a small transformer ([`encoder`]) is
//! pre-trained so that tokens of co-referring mentions embed close together,
//! against mentions from other stories, alongside masked language modelling
//! ([`pretrain`]); the encoder then feeds an entity-typing head ([`typing`])
//! and a span tagger ([`spandet`]), scored by [`eval`].
//!
//! [`synth`] generates corpora with known types and chains so the whole
//! pipeline can be exercised end to end ([`pipeline`]).

pub mod consensus;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod spandet;
pub mod synth;
pub mod typing;

pub use error::{Error, Result};
