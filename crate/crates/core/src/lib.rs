//! retroseq: retrieval-augmented sequence-to-sequence code generation.
//!
//! A transformer decoder is interleaved with chunked cross-attention over
//! neighbours fetched from a key-value datastore of code chunks, built either
//! from code alone or from (intent, code) pairs. The crate covers the whole
//! loop: tensor math with reverse-mode gradients, the model, datastore
//! construction and retrieval, code normalization, training, beam-search
//! decoding, and evaluation.

pub mod datastore;
pub mod embedder;
pub mod lexer;
pub mod model;
pub mod nn;
pub mod normalizer;
pub mod pipeline;
pub mod tensor;
pub mod vocab;
