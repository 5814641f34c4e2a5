//! Chunked key-value code datastore.
//!
//! Every entry pairs a retrieval key with a fixed-width value `[N, F]`: the
//! chunk the key was computed from and its continuation, both exactly `m`
//! token ids with PAD fill. Classic databases key every chunk by its own
//! code embedding; hybrid databases additionally key each pair's opening
//! chunks by the intent embedding, so decoding can be steered before any
//! code exists to query with.
//!
//! Databases are immutable once built or loaded; queries are safe to run
//! concurrently. Persistence is bit-exact: saving, loading, and saving again
//! produces identical bytes.

use crate::embedder::{dist_sq, EmbedError, FrozenEmbedder};
use crate::normalizer::{tokenize_intent, NormalizeError, Normalizer};
use crate::vocab::{Vocab, PAD};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"RSDB";
const VERSION: u32 = 1;
/// Below this entry count the exact backend is the default.
pub const EXACT_DEFAULT_LIMIT: usize = 50_000;

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("chunk size m must be at least 1")]
    BadChunkSize,
    #[error("cannot chunk an empty token sequence")]
    EmptyInput,
    #[error("query on an empty database")]
    EmptyDatabase,
    #[error("query dimension {found} does not match database d_e {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("expected magic RSDB, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported database version {found} (expected {VERSION})")]
    BadVersion { found: u32 },
    #[error("database file is truncated")]
    Truncated,
    #[error("database checksum mismatch: file is corrupt")]
    ChecksumMismatch,
    #[error("invalid key kind byte {found}")]
    BadKind { found: u8 },
    #[error("invalid mode byte {found}")]
    BadMode { found: u8 },
    #[error("vocabulary sidecar {path}: {detail}")]
    VocabSidecar { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbMode {
    Classic,
    Hybrid,
}

impl DbMode {
    fn to_byte(self) -> u8 {
        match self {
            DbMode::Classic => 0,
            DbMode::Hybrid => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, DbError> {
        match b {
            0 => Ok(DbMode::Classic),
            1 => Ok(DbMode::Hybrid),
            found => Err(DbError::BadMode { found }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Code,
    Intent,
}

impl KeyKind {
    fn to_byte(self) -> u8 {
        match self {
            KeyKind::Code => 0,
            KeyKind::Intent => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, DbError> {
        match b {
            0 => Ok(KeyKind::Code),
            1 => Ok(KeyKind::Intent),
            found => Err(DbError::BadKind { found }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub kind: KeyKind,
    pub source_id: u64,
    pub n: Vec<u32>,
    pub f: Vec<u32>,
    pub key: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbour {
    pub n: Vec<u32>,
    pub f: Vec<u32>,
    pub dist: f32,
    pub source_id: u64,
    pub ordinal: u32,
    pub kind: KeyKind,
}

#[derive(Debug, Clone)]
pub struct NeighbourSet {
    pub query_tokens: Vec<u32>,
    pub neighbours: Vec<Neighbour>,
}

/// Non-overlapping `m`-token windows, each paired with the next window as
/// continuation; both sides PAD-filled to exactly `m`.
pub fn chunk_sequence(tokens: &[u32], m: usize) -> Result<Vec<(Vec<u32>, Vec<u32>)>, DbError> {
    if m == 0 {
        return Err(DbError::BadChunkSize);
    }
    if tokens.is_empty() {
        return Err(DbError::EmptyInput);
    }
    let pad_to = |slice: &[u32]| {
        let mut v = slice.to_vec();
        v.resize(m, PAD);
        v
    };
    let mut out = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let n_end = (start + m).min(tokens.len());
        let f_end = (start + 2 * m).min(tokens.len());
        out.push((pad_to(&tokens[start..n_end]), pad_to(&tokens[n_end.min(f_end)..f_end])));
        start += m;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Approximate index: inverted lists under a k-means coarse quantizer.

#[derive(Debug, Clone, Copy)]
pub struct IvfParams {
    pub nlist: usize,
    pub nprobe: usize,
    pub train_sample: usize,
    pub iters: usize,
    pub seed: u64,
}

impl IvfParams {
    pub fn auto(n: usize) -> Self {
        let nlist = ((n as f64).sqrt().ceil() as usize).clamp(4, 4096);
        // probe budget targets ~8k scanned entries regardless of corpus
        // size (lists hold each entry twice): denser corpora put true
        // neighbours in nearer cells, so the probed fraction shrinks as n
        // grows
        let scanned_target = 8000.0;
        let nprobe = ((scanned_target * nlist as f64 / (2.0 * n.max(1) as f64)).ceil() as usize)
            .clamp(8, nlist);
        IvfParams {
            nlist,
            nprobe,
            train_sample: (64 * nlist).min(n),
            iters: 8,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone)]
struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>, // nlist × dim, row-major
    lists: Vec<Vec<u32>>,
    nprobe: usize,
}

impl IvfIndex {
    fn build(records: &[ChunkRecord], dim: usize, params: IvfParams) -> IvfIndex {
        let n = records.len();
        let nlist = params.nlist.min(n.max(1));
        // deterministic sample: fixed-stride plus LCG jitter keeps it cheap
        let mut sample: Vec<usize> = Vec::with_capacity(params.train_sample.min(n));
        let mut state = params.seed | 1;
        while sample.len() < params.train_sample.min(n) {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            sample.push((state >> 16) as usize % n);
        }
        sample.sort_unstable();
        sample.dedup();

        // init centroids from evenly spaced sample points
        let mut centroids = vec![0.0f32; nlist * dim];
        for (c, chunk) in centroids.chunks_mut(dim).enumerate() {
            let pick = sample[c * sample.len() / nlist];
            chunk.copy_from_slice(&records[pick].key);
        }

        let nearest = |key: &[f32], cents: &[f32]| -> usize {
            let mut best = (f32::INFINITY, 0usize);
            for (c, chunk) in cents.chunks(dim).enumerate() {
                let d = dist_sq(key, chunk);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        };

        for _ in 0..params.iters {
            let assign: Vec<usize> = sample
                .par_iter()
                .map(|&i| nearest(&records[i].key, &centroids))
                .collect();
            let mut sums = vec![0.0f64; nlist * dim];
            let mut counts = vec![0usize; nlist];
            for (&i, &c) in sample.iter().zip(&assign) {
                counts[c] += 1;
                for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&records[i].key) {
                    *s += v as f64;
                }
            }
            for c in 0..nlist {
                if counts[c] == 0 {
                    continue; // empty cell keeps its old centroid
                }
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }

        // each entry spills into its two nearest cells; queries near a cell
        // boundary then find it from either side
        let assignments: Vec<(usize, usize)> = records
            .par_iter()
            .map(|r| {
                let mut best = (f32::INFINITY, 0usize);
                let mut second = (f32::INFINITY, 0usize);
                for (c, chunk) in centroids.chunks(dim).enumerate() {
                    let d = dist_sq(&r.key, chunk);
                    if d < best.0 {
                        second = best;
                        best = (d, c);
                    } else if d < second.0 {
                        second = (d, c);
                    }
                }
                (best.1, if nlist > 1 { second.1 } else { best.1 })
            })
            .collect();
        let mut lists = vec![Vec::new(); nlist];
        for (ordinal, &(c1, c2)) in assignments.iter().enumerate() {
            lists[c1].push(ordinal as u32);
            if c2 != c1 {
                lists[c2].push(ordinal as u32);
            }
        }
        IvfIndex {
            dim,
            centroids,
            lists,
            nprobe: params.nprobe.min(nlist),
        }
    }

    /// Ordinals in the `nprobe` cells nearest to the query.
    fn candidates(&self, query: &[f32]) -> impl Iterator<Item = u32> + '_ {
        let mut order: Vec<(f32, usize)> = self
            .centroids
            .chunks(self.dim)
            .enumerate()
            .map(|(c, chunk)| (dist_sq(query, chunk), c))
            .collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        order
            .into_iter()
            .take(self.nprobe)
            .flat_map(|(_, c)| self.lists[c].iter().copied())
    }
}

#[derive(Debug, Clone)]
enum Index {
    Exact,
    Ivf(IvfIndex),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexChoice {
    /// Exact below `EXACT_DEFAULT_LIMIT` entries, approximate above.
    Auto,
    Exact,
    Approximate,
}

// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Database {
    mode: DbMode,
    m: usize,
    d_e: usize,
    embedder_id: String,
    records: Vec<ChunkRecord>,
    code_vocab: Vocab,
    nl_vocab: Vocab,
    index: Index,
}

impl Database {
    pub fn from_parts(
        mode: DbMode,
        m: usize,
        d_e: usize,
        embedder_id: &str,
        records: Vec<ChunkRecord>,
        code_vocab: Vocab,
        nl_vocab: Vocab,
    ) -> Database {
        let mut db = Database {
            mode,
            m,
            d_e,
            embedder_id: embedder_id.to_string(),
            records,
            code_vocab,
            nl_vocab,
            index: Index::Exact,
        };
        db.rebuild_index(IndexChoice::Auto);
        db
    }

    pub fn mode(&self) -> DbMode {
        self.mode
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn code_vocab(&self) -> &Vocab {
        &self.code_vocab
    }

    pub fn nl_vocab(&self) -> &Vocab {
        &self.nl_vocab
    }

    pub fn is_approximate(&self) -> bool {
        matches!(self.index, Index::Ivf(_))
    }

    pub fn rebuild_index(&mut self, choice: IndexChoice) {
        self.index = match choice {
            IndexChoice::Exact => Index::Exact,
            IndexChoice::Auto if self.records.len() < EXACT_DEFAULT_LIMIT => Index::Exact,
            IndexChoice::Auto | IndexChoice::Approximate => {
                if self.records.is_empty() {
                    Index::Exact
                } else {
                    Index::Ivf(IvfIndex::build(
                        &self.records,
                        self.d_e,
                        IvfParams::auto(self.records.len()),
                    ))
                }
            }
        };
    }

    pub fn rebuild_index_with(&mut self, params: IvfParams) {
        self.index = Index::Ivf(IvfIndex::build(&self.records, self.d_e, params));
    }

    pub fn query_k(&self, query: &[f32], k: usize) -> Result<Vec<Neighbour>, DbError> {
        self.query_k_excluding(query, k, None)
    }

    /// `exclude_source` drops entries from that source id before ranking —
    /// training-time neighbour precomputation uses it to avoid self-matches.
    pub fn query_k_excluding(
        &self,
        query: &[f32],
        k: usize,
        exclude_source: Option<u64>,
    ) -> Result<Vec<Neighbour>, DbError> {
        if self.records.is_empty() {
            return Err(DbError::EmptyDatabase);
        }
        if query.len() != self.d_e {
            return Err(DbError::DimMismatch {
                expected: self.d_e,
                found: query.len(),
            });
        }
        let mut hits: Vec<(f32, u64, u32)> = match &self.index {
            Index::Exact => self.scan(query, exclude_source, 0..self.records.len() as u32),
            Index::Ivf(ivf) => {
                // spilled entries can appear in two probed lists
                let mut cands: Vec<u32> = ivf.candidates(query).collect();
                cands.sort_unstable();
                cands.dedup();
                self.scan(query, exclude_source, cands.into_iter())
            }
        };
        // ascending distance, ties by source id then ordinal
        hits.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        hits.truncate(k);
        Ok(hits
            .into_iter()
            .map(|(dist, source_id, ordinal)| {
                let r = &self.records[ordinal as usize];
                Neighbour {
                    n: r.n.clone(),
                    f: r.f.clone(),
                    dist,
                    source_id,
                    ordinal,
                    kind: r.kind,
                }
            })
            .collect())
    }

    fn scan(
        &self,
        query: &[f32],
        exclude: Option<u64>,
        ordinals: impl Iterator<Item = u32>,
    ) -> Vec<(f32, u64, u32)> {
        ordinals
            .filter_map(|ord| {
                let r = &self.records[ord as usize];
                if exclude == Some(r.source_id) {
                    return None;
                }
                Some((dist_sq(query, &r.key), r.source_id, ord))
            })
            .collect()
    }

    /// Embeds a code chunk and queries; the convenience path the decoder uses.
    pub fn query_chunk(
        &self,
        embedder: &FrozenEmbedder,
        chunk_tokens: &[u32],
        k: usize,
        exclude_source: Option<u64>,
    ) -> Result<NeighbourSet, DbError> {
        let key = embedder.embed_code(chunk_tokens)?;
        Ok(NeighbourSet {
            query_tokens: chunk_tokens.to_vec(),
            neighbours: self.query_k_excluding(&key, k, exclude_source)?,
        })
    }

    pub fn query_intent(
        &self,
        embedder: &FrozenEmbedder,
        intent_tokens: &[u32],
        k: usize,
        exclude_source: Option<u64>,
    ) -> Result<NeighbourSet, DbError> {
        let key = embedder.embed_intent(intent_tokens)?;
        Ok(NeighbourSet {
            query_tokens: intent_tokens.to_vec(),
            neighbours: self.query_k_excluding(&key, k, exclude_source)?,
        })
    }

    // -- persistence --------------------------------------------------------

    fn serialize(&self) -> Vec<u8> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(VERSION).unwrap();
        buf.push(self.mode.to_byte());
        buf.write_u32::<LittleEndian>(self.m as u32).unwrap();
        buf.write_u32::<LittleEndian>(self.d_e as u32).unwrap();
        buf.write_u16::<LittleEndian>(self.embedder_id.len() as u16)
            .unwrap();
        buf.extend_from_slice(self.embedder_id.as_bytes());
        buf.write_u64::<LittleEndian>(self.records.len() as u64)
            .unwrap();
        for r in &self.records {
            buf.push(r.kind.to_byte());
            buf.write_u64::<LittleEndian>(r.source_id).unwrap();
            for &t in &r.n {
                buf.write_u32::<LittleEndian>(t).unwrap();
            }
            for &t in &r.f {
                buf.write_u32::<LittleEndian>(t).unwrap();
            }
            for &v in &r.key {
                buf.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.write_u32::<LittleEndian>(crc).unwrap();
        buf
    }

    fn vocab_sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_os_string();
        s.push(".vocab.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.serialize())?;
        file.sync_all()?;

        let sidecar = Self::vocab_sidecar(path);
        let json = serde_json::json!({
            "code": self.code_vocab,
            "nl": self.nl_vocab,
        });
        std::fs::write(&sidecar, serde_json::to_string(&json).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Database, DbError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 4 {
            return Err(DbError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(DbError::BadMagic {
                found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            });
        }
        if bytes.len() < 8 {
            return Err(DbError::Truncated);
        }
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(&bytes[..bytes.len() - 4]) != stored_crc {
            return Err(DbError::ChecksumMismatch);
        }

        let mut cur = &bytes[4..bytes.len() - 4];
        let take = |cur: &mut &[u8], n: usize| -> Result<Vec<u8>, DbError> {
            if cur.len() < n {
                return Err(DbError::Truncated);
            }
            let (head, tail) = cur.split_at(n);
            *cur = tail;
            Ok(head.to_vec())
        };

        let version = cur.read_u32::<LittleEndian>().map_err(|_| DbError::Truncated)?;
        if version != VERSION {
            return Err(DbError::BadVersion { found: version });
        }
        let mode = DbMode::from_byte(cur.read_u8().map_err(|_| DbError::Truncated)?)?;
        let m = cur.read_u32::<LittleEndian>().map_err(|_| DbError::Truncated)? as usize;
        let d_e = cur.read_u32::<LittleEndian>().map_err(|_| DbError::Truncated)? as usize;
        let id_len = cur.read_u16::<LittleEndian>().map_err(|_| DbError::Truncated)? as usize;
        let id_bytes = take(&mut cur, id_len)?;
        let embedder_id = String::from_utf8(id_bytes).map_err(|e| DbError::VocabSidecar {
            path: path.to_path_buf(),
            detail: format!("embedder id not UTF-8: {e}"),
        })?;
        let count = cur.read_u64::<LittleEndian>().map_err(|_| DbError::Truncated)? as usize;

        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = KeyKind::from_byte(cur.read_u8().map_err(|_| DbError::Truncated)?)?;
            let source_id = cur.read_u64::<LittleEndian>().map_err(|_| DbError::Truncated)?;
            let mut n = Vec::with_capacity(m);
            for _ in 0..m {
                n.push(cur.read_u32::<LittleEndian>().map_err(|_| DbError::Truncated)?);
            }
            let mut f = Vec::with_capacity(m);
            for _ in 0..m {
                f.push(cur.read_u32::<LittleEndian>().map_err(|_| DbError::Truncated)?);
            }
            let mut key = Vec::with_capacity(d_e);
            for _ in 0..d_e {
                key.push(cur.read_f32::<LittleEndian>().map_err(|_| DbError::Truncated)?);
            }
            records.push(ChunkRecord {
                kind,
                source_id,
                n,
                f,
                key,
            });
        }
        if !cur.is_empty() {
            return Err(DbError::Truncated);
        }

        let sidecar = Self::vocab_sidecar(path);
        let sidecar_text =
            std::fs::read_to_string(&sidecar).map_err(|e| DbError::VocabSidecar {
                path: sidecar.clone(),
                detail: e.to_string(),
            })?;
        #[derive(serde::Deserialize)]
        struct Sidecar {
            code: Vocab,
            nl: Vocab,
        }
        let vocabs: Sidecar =
            serde_json::from_str(&sidecar_text).map_err(|e| DbError::VocabSidecar {
                path: sidecar,
                detail: e.to_string(),
            })?;

        Ok(Database::from_parts(
            mode,
            m,
            d_e,
            &embedder_id,
            records,
            vocabs.code,
            vocabs.nl,
        ))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub sources: usize,
    pub skipped: usize,
    pub entries: usize,
}

pub struct DbBuilder {
    mode: DbMode,
    m: usize,
    normalize: bool,
    embedder: FrozenEmbedder,
    normalizer: Normalizer,
    code_vocab: Vocab,
    nl_vocab: Vocab,
    records: Vec<ChunkRecord>,
    stats: BuildStats,
}

impl DbBuilder {
    pub fn classic(m: usize, embedder: FrozenEmbedder, normalize: bool) -> DbBuilder {
        Self::with_mode(DbMode::Classic, m, embedder, normalize)
    }

    pub fn hybrid(m: usize, embedder: FrozenEmbedder, normalize: bool) -> DbBuilder {
        Self::with_mode(DbMode::Hybrid, m, embedder, normalize)
    }

    fn with_mode(mode: DbMode, m: usize, embedder: FrozenEmbedder, normalize: bool) -> DbBuilder {
        DbBuilder {
            mode,
            m,
            normalize,
            embedder,
            normalizer: Normalizer::new(),
            code_vocab: Vocab::new(),
            nl_vocab: Vocab::new(),
            records: Vec::new(),
            stats: BuildStats::default(),
        }
    }

    pub fn code_vocab_mut(&mut self) -> &mut Vocab {
        &mut self.code_vocab
    }

    pub fn nl_vocab_mut(&mut self) -> &mut Vocab {
        &mut self.nl_vocab
    }

    fn code_ids(&mut self, code: &str) -> Result<Vec<u32>, NormalizeError> {
        let surfaces = if self.normalize {
            self.normalizer.normalize_snippet(code)?.surfaces()
        } else {
            crate::lexer::lex_code(code)?.surfaces()
        };
        Ok(surfaces
            .iter()
            .map(|s| self.code_vocab.add(s))
            .collect())
    }

    fn push_code_chunks(&mut self, source_id: u64, ids: &[u32]) -> Result<(), DbError> {
        for (n, f) in chunk_sequence(ids, self.m)? {
            let key = self.embedder.embed_code(&n)?;
            self.records.push(ChunkRecord {
                kind: KeyKind::Code,
                source_id,
                n,
                f,
                key,
            });
        }
        Ok(())
    }

    /// Adds one snippet's chunks; lexer failures and empty snippets are
    /// skipped and counted, not fatal.
    pub fn add_snippet(&mut self, source_id: u64, code: &str) -> bool {
        self.stats.sources += 1;
        let ids = match self.code_ids(code) {
            Ok(ids) if !ids.is_empty() => ids,
            _ => {
                self.stats.skipped += 1;
                return false;
            }
        };
        match self.push_code_chunks(source_id, &ids) {
            Ok(()) => true,
            Err(_) => {
                self.stats.skipped += 1;
                false
            }
        }
    }

    /// Hybrid entry point: classic chunks for the code plus one intent-keyed
    /// record valued with the code's first two chunks.
    pub fn add_pair(&mut self, source_id: u64, intent: &str, code: &str) -> bool {
        self.stats.sources += 1;
        let (intent_text, ids) = if self.normalize {
            match self.normalizer.normalize_pair(intent, code) {
                Ok(p) => {
                    let ids: Vec<u32> = p
                        .code
                        .surfaces()
                        .iter()
                        .map(|s| self.code_vocab.add(s))
                        .collect();
                    (p.intent, ids)
                }
                Err(_) => {
                    self.stats.skipped += 1;
                    return false;
                }
            }
        } else {
            match crate::lexer::lex_code(code) {
                Ok(lexed) => {
                    let ids: Vec<u32> = lexed
                        .surfaces()
                        .iter()
                        .map(|s| self.code_vocab.add(s))
                        .collect();
                    (intent.to_string(), ids)
                }
                Err(_) => {
                    self.stats.skipped += 1;
                    return false;
                }
            }
        };
        if ids.is_empty() {
            self.stats.skipped += 1;
            return false;
        }
        if self.push_code_chunks(source_id, &ids).is_err() {
            self.stats.skipped += 1;
            return false;
        }

        let intent_ids: Vec<u32> = tokenize_intent(&intent_text)
            .iter()
            .map(|t| self.nl_vocab.add(t))
            .collect();
        let key = match self.embedder.embed_intent(&intent_ids) {
            Ok(k) => k,
            Err(_) => {
                self.stats.skipped += 1;
                return false;
            }
        };
        let pad_to = |slice: &[u32]| {
            let mut v = slice.to_vec();
            v.resize(self.m, PAD);
            v
        };
        let n_end = self.m.min(ids.len());
        let f_end = (2 * self.m).min(ids.len());
        self.records.push(ChunkRecord {
            kind: KeyKind::Intent,
            source_id,
            n: pad_to(&ids[..n_end]),
            f: pad_to(&ids[n_end..f_end]),
            key,
        });
        true
    }

    pub fn stats(&self) -> BuildStats {
        BuildStats {
            entries: self.records.len(),
            ..self.stats
        }
    }

    pub fn finish(self) -> (Database, BuildStats) {
        let stats = BuildStats {
            entries: self.records.len(),
            ..self.stats
        };
        let db = Database::from_parts(
            self.mode,
            self.m,
            self.embedder.dim(),
            self.embedder.id(),
            self.records,
            self.code_vocab,
            self.nl_vocab,
        );
        (db, stats)
    }
}
