//! End-to-end plumbing: dataset ingestion, synthetic corpus generation,
//! neighbour precomputation, training, beam decoding with live retrieval,
//! and evaluation metrics.

pub mod bleu;
pub mod data;
pub mod decode;
pub mod neighbours;
pub mod overlap;
pub mod synth;
pub mod train;

pub use bleu::corpus_bleu;
pub use data::{
    prepare, prepare_intent, read_jsonl, restore_surfaces, write_jsonl, IntentInput, Prepared,
    PreparedExample, RawExample,
};
pub use decode::{beam_decode, evaluate, DecodeParams, DecodedHyp, EvalOutput};
pub use neighbours::{precompute_neighbours, NeighbourCache};
pub use overlap::r_overlap;
pub use synth::{synth_corpus, SynthCorpus};
pub use train::{train, EpochMetrics, Retrieval, TrainConfig, TrainOutput};

use crate::datastore::DbError;
use crate::embedder::EmbedError;
use crate::model::ModelError;
use crate::normalizer::NormalizeError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Json { line: usize, detail: String },
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("hypothesis/reference counts differ: {hyps} vs {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("beam width must be at least 1")]
    BadWidth,
    #[error("model aggregates retrieval but no database was supplied")]
    MissingDatabase,
    #[error("database embedder dimension {db} does not match expected {expected}")]
    EmbedderMismatch { db: usize, expected: usize },
    #[error("database chunk size {db} does not match the model's {model}")]
    ChunkSizeMismatch { db: usize, model: usize },
    #[error("neighbour cache covers {cache} examples, dataset has {data}")]
    CacheMismatch { cache: usize, data: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
}
