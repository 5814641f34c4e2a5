//! Training-time retrieval, precomputed once per dataset.
//!
//! The records feeding chunk u of the decoder are retrieved with the
//! ground-truth tokens of chunk u−1 — the same keying the decoder reproduces
//! at generation time with its own tokens. In hybrid mode the first chunk is
//! keyed by the intent; in classic mode it has no records (identity path).

use super::data::PreparedExample;
use super::PipelineError;
use crate::datastore::{Database, DbMode, Neighbour};
use crate::embedder::FrozenEmbedder;
use crate::model::NeighbourTokens;

pub struct NeighbourCache {
    /// One map per example, aligned by index.
    pub per_example: Vec<NeighbourTokens>,
    /// Queries that returned nothing — all-same-source databases end up
    /// here, which usually means train-set leakage into the exclusion id.
    pub empty_sets: usize,
}

pub(super) fn as_records(hits: &[Neighbour]) -> Vec<Vec<u32>> {
    hits.iter()
        .map(|h| {
            let mut rec = Vec::with_capacity(h.n.len() + h.f.len());
            rec.extend_from_slice(&h.n);
            rec.extend_from_slice(&h.f);
            rec
        })
        .collect()
}

/// Retrieves one example's worth of records, keyed exactly as the decoder
/// keys its own queries at generation time. Returns the map and the number
/// of queries that came back empty.
pub(super) fn example_neighbours(
    ex: &PreparedExample,
    db: &Database,
    embedder: &FrozenEmbedder,
    k: usize,
    exclude: Option<u64>,
) -> Result<(NeighbourTokens, usize), PipelineError> {
    let m = db.m();
    let mut map = NeighbourTokens::new();
    let mut empty = 0usize;
    if db.mode() == DbMode::Hybrid {
        let set = db.query_intent(embedder, &ex.x, k, exclude)?;
        if set.neighbours.is_empty() {
            empty += 1;
        }
        map.insert(0, as_records(&set.neighbours));
    }
    // targets hold the generated-token view of the example: code then EOS
    let n_chunks = ex.y_in.len().div_ceil(m);
    for u in 1..n_chunks {
        let window: Vec<u32> = ex.targets[(u - 1) * m..u * m]
            .iter()
            .map(|&t| t as u32)
            .collect();
        let set = db.query_chunk(embedder, &window, k, exclude)?;
        if set.neighbours.is_empty() {
            empty += 1;
        }
        map.insert(u, as_records(&set.neighbours));
    }
    Ok((map, empty))
}

/// Retrieves `k` records per (example, chunk). `exclude_self` drops database
/// entries whose source id equals the example's — required whenever the
/// database was built from the same set being prepared.
pub fn precompute_neighbours(
    examples: &[PreparedExample],
    db: &Database,
    k: usize,
    exclude_self: bool,
) -> Result<NeighbourCache, PipelineError> {
    let embedder = FrozenEmbedder::new(db.embedder_id(), db.d_e());
    let mut per_example = Vec::with_capacity(examples.len());
    let mut empty_sets = 0usize;
    for ex in examples {
        let exclude = exclude_self.then_some(ex.source_id);
        let (map, empty) = example_neighbours(ex, db, &embedder, k, exclude)?;
        empty_sets += empty;
        per_example.push(map);
    }
    Ok(NeighbourCache {
        per_example,
        empty_sets,
    })
}
