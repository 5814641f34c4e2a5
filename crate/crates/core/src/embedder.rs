//! Frozen sequence embedder for datastore keys and queries.
//!
//! Token-id sequences are reduced to hashed unigram+bigram counts over 2^16
//! buckets, projected through a ±1 matrix whose rows are derived from the
//! embedder id, and L2-normalized. Nothing here ever carries gradients, and
//! the same id produces bit-identical vectors in any process, so keys written
//! into a datastore stay valid forever and new entries can be appended
//! without touching old ones.
//!
//! An optional precomputed table maps sequence hashes to externally supplied
//! vectors; sequences absent from the table fall back to the hashed
//! projection.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

pub const DEFAULT_DIM: usize = 256;
const BUCKETS: u64 = 1 << 16;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut state: u64) -> u64 {
    for b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Stable 64-bit hash of a token-id sequence; this is the record key of the
/// precomputed-embedding file format.
pub fn sequence_hash(tokens: &[u32]) -> u64 {
    fnv1a(
        tokens.iter().flat_map(|t| t.to_le_bytes()),
        FNV_OFFSET,
    )
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed an empty sequence")]
    EmptySequence,
    #[error("embedding table: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding table record has wrong dimension: expected {expected}, file holds {found}")]
    TableDim { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Code,
    Intent,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Code => 0,
            Domain::Intent => 1,
        }
    }
}

pub struct FrozenEmbedder {
    id: String,
    dim: usize,
    id_hash: u64,
    table: Option<HashMap<u64, Vec<f32>>>,
}

impl FrozenEmbedder {
    pub fn new(id: &str, dim: usize) -> Self {
        FrozenEmbedder {
            id: id.to_string(),
            dim,
            id_hash: fnv1a(id.bytes(), FNV_OFFSET),
            table: None,
        }
    }

    pub fn with_default_dim(id: &str) -> Self {
        Self::new(id, DEFAULT_DIM)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Loads precomputed vectors: repeated records of sequence hash (u64 LE)
    /// followed by `dim` f32 LE values. Lookups for other sequences still use
    /// the hashed projection.
    pub fn load_table(&mut self, path: &Path) -> Result<usize, EmbedError> {
        let bytes = std::fs::read(path)?;
        let record = 8 + 4 * self.dim;
        if bytes.len() % record != 0 {
            let found = if bytes.len() >= 8 && (bytes.len() - 8) % 4 == 0 {
                (bytes.len() - 8) / 4
            } else {
                0
            };
            return Err(EmbedError::TableDim {
                expected: self.dim,
                found,
            });
        }
        let mut table = HashMap::new();
        let mut cursor = &bytes[..];
        while !cursor.is_empty() {
            let mut h = [0u8; 8];
            cursor.read_exact(&mut h)?;
            let hash = u64::from_le_bytes(h);
            let mut vec = Vec::with_capacity(self.dim);
            for _ in 0..self.dim {
                let mut f = [0u8; 4];
                cursor.read_exact(&mut f)?;
                vec.push(f32::from_le_bytes(f));
            }
            table.insert(hash, vec);
        }
        let n = table.len();
        self.table = Some(table);
        Ok(n)
    }

    /// ±1 row for one hash bucket, derived from the embedder id so two
    /// embedders with the same id agree bit-for-bit.
    fn projection_row(&self, bucket: u64, out: &mut [f32], count: f32) {
        let mut x = fnv1a(bucket.to_le_bytes(), self.id_hash);
        // splitmix64 stream over the bucket seed; one bit per column
        let mut bits = 0u64;
        let mut have = 0;
        for slot in out.iter_mut() {
            if have == 0 {
                x = x.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = x;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                bits = z ^ (z >> 31);
                have = 64;
            }
            let sign = if bits & 1 == 1 { 1.0 } else { -1.0 };
            bits >>= 1;
            have -= 1;
            *slot += sign * count;
        }
    }

    fn embed(&self, tokens: &[u32], domain: Domain) -> Result<Vec<f32>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptySequence);
        }
        if let Some(table) = &self.table {
            if let Some(v) = table.get(&sequence_hash(tokens)) {
                return Ok(v.clone());
            }
        }

        let mut counts: HashMap<u64, f32> = HashMap::new();
        let seed = fnv1a([domain.tag()], FNV_OFFSET);
        for (i, &t) in tokens.iter().enumerate() {
            let uni = fnv1a(t.to_le_bytes(), seed) % BUCKETS;
            *counts.entry(uni).or_insert(0.0) += 1.0;
            if i + 1 < tokens.len() {
                let bi = fnv1a(
                    t.to_le_bytes().into_iter().chain(tokens[i + 1].to_le_bytes()),
                    seed.wrapping_mul(FNV_PRIME),
                ) % BUCKETS;
                *counts.entry(bi).or_insert(0.0) += 1.0;
            }
        }

        let mut out = vec![0.0f32; self.dim];
        // BTreeMap-free determinism: accumulation order varies with the hash
        // map, so sort buckets before projecting
        let mut buckets: Vec<(u64, f32)> = counts.into_iter().collect();
        buckets.sort_unstable_by_key(|&(b, _)| b);
        for (bucket, count) in buckets {
            self.projection_row(bucket, &mut out, count);
        }

        let norm = out.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v = ((*v as f64) / norm) as f32;
            }
        }
        Ok(out)
    }

    pub fn embed_code(&self, tokens: &[u32]) -> Result<Vec<f32>, EmbedError> {
        self.embed(tokens, Domain::Code)
    }

    pub fn embed_intent(&self, tokens: &[u32]) -> Result<Vec<f32>, EmbedError> {
        self.embed(tokens, Domain::Intent)
    }
}

/// Squared Euclidean distance; callers rank by it, so the square root is
/// never needed.
pub fn dist_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}
