//! Python bindings: the datastore, the model, and the pipeline verbs
//! (synth, normalize, train, generate, evaluate, BLEU, overlap) under one
//! `retroseq_py` module.
//!
//! Build with `cargo build -p retroseq-py`, then load the produced
//! `libretroseq_py.so` as module `retroseq_py` (see python/smoke_test.py).

use std::collections::HashMap;
use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use retroseq::datastore::{Database, DbBuilder, DbMode};
use retroseq::embedder::FrozenEmbedder;
use retroseq::lexer::render_surfaces;
use retroseq::model::{checkpoint, Aggregation, ModelConfig, NbEncoderKind, RetroModel};
use retroseq::normalizer::Normalizer;
use retroseq::pipeline as pl;
use retroseq::pipeline::{DecodeParams, RawExample, Retrieval, TrainConfig};

fn err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_raw(pairs: &[(String, String)]) -> Vec<RawExample> {
    pairs
        .iter()
        .map(|(i, s)| RawExample::new(i, s))
        .collect()
}

fn parse_aggregation(s: &str) -> PyResult<Aggregation> {
    match s {
        "none" => Ok(Aggregation::None),
        "sequential" => Ok(Aggregation::Sequential),
        "parallel" => Ok(Aggregation::Parallel),
        other => Err(err(format!(
            "aggregation must be none, sequential, or parallel, got {other:?}"
        ))),
    }
}

fn parse_nb_encoder(s: &str) -> PyResult<NbEncoderKind> {
    match s {
        "classic" => Ok(NbEncoderKind::Classic),
        "conditioned" => Ok(NbEncoderKind::Conditioned),
        other => Err(err(format!(
            "nb_encoder must be classic or conditioned, got {other:?}"
        ))),
    }
}

/// Chunked key-value datastore over code (and optionally intent) chunks.
#[pyclass(name = "Database")]
struct PyDatabase {
    inner: Database,
    skipped: usize,
}

#[pymethods]
impl PyDatabase {
    /// Build from (intent, snippet) pairs; source ids follow list order.
    #[staticmethod]
    #[pyo3(signature = (pairs, chunk_size=8, hybrid=true, normalize=true, embed_dim=64, salt="default"))]
    fn build(
        pairs: Vec<(String, String)>,
        chunk_size: usize,
        hybrid: bool,
        normalize: bool,
        embed_dim: usize,
        salt: &str,
    ) -> PyResult<Self> {
        if chunk_size == 0 || embed_dim == 0 {
            return Err(err("chunk_size and embed_dim must be positive"));
        }
        let embedder = FrozenEmbedder::new(salt, embed_dim);
        let mut b = if hybrid {
            DbBuilder::hybrid(chunk_size, embedder, normalize)
        } else {
            DbBuilder::classic(chunk_size, embedder, normalize)
        };
        for (i, (intent, snippet)) in pairs.iter().enumerate() {
            if hybrid {
                b.add_pair(i as u64, intent, snippet);
            } else {
                b.add_snippet(i as u64, snippet);
            }
        }
        let (inner, stats) = b.finish();
        Ok(PyDatabase {
            inner,
            skipped: stats.skipped,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDatabase {
            inner: Database::load(&path).map_err(err)?,
            skipped: 0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn chunk_size(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode() {
            DbMode::Classic => "classic",
            DbMode::Hybrid => "hybrid",
        }
    }

    #[getter]
    fn skipped(&self) -> usize {
        self.skipped
    }

    #[getter]
    fn embedder(&self) -> (String, usize) {
        (self.inner.embedder_id().to_string(), self.inner.d_e())
    }

    /// Nearest stored chunks for a code fragment; returns
    /// (chunk_tokens, continuation_tokens, distance, source_id) tuples.
    /// `normalize` must match the flag the database was built with.
    #[pyo3(signature = (code, k=2, exclude_source=None, normalize=true))]
    fn query_code(
        &self,
        code: &str,
        k: usize,
        exclude_source: Option<u64>,
        normalize: bool,
    ) -> PyResult<Vec<(Vec<String>, Vec<String>, f32, u64)>> {
        let surfaces = if normalize {
            Normalizer::new().normalize_snippet(code).map_err(err)?.surfaces()
        } else {
            retroseq::lexer::lex_code(code).map_err(err)?.surfaces()
        };
        let ids = self.inner.code_vocab().encode(&surfaces);
        let embedder = FrozenEmbedder::new(self.inner.embedder_id(), self.inner.d_e());
        let set = self
            .inner
            .query_chunk(&embedder, &ids, k, exclude_source)
            .map_err(err)?;
        Ok(self.decode_hits(&set.neighbours))
    }

    /// Nearest intent-keyed entries for a natural-language request.
    /// `normalize` must match the flag the database was built with.
    #[pyo3(signature = (intent, k=2, exclude_source=None, normalize=true))]
    fn query_intent(
        &self,
        intent: &str,
        k: usize,
        exclude_source: Option<u64>,
        normalize: bool,
    ) -> PyResult<Vec<(Vec<String>, Vec<String>, f32, u64)>> {
        let text = if normalize {
            Normalizer::new().normalize_intent(intent).text
        } else {
            intent.to_string()
        };
        let tokens = retroseq::normalizer::tokenize_intent(&text);
        let ids = self.inner.nl_vocab().encode(&tokens);
        let embedder = FrozenEmbedder::new(self.inner.embedder_id(), self.inner.d_e());
        let set = self
            .inner
            .query_intent(&embedder, &ids, k, exclude_source)
            .map_err(err)?;
        Ok(self.decode_hits(&set.neighbours))
    }

    /// Fraction of the snippets' chunks stored verbatim in the database.
    #[pyo3(signature = (pairs, normalize=true))]
    fn overlap(&self, pairs: Vec<(String, String)>, normalize: bool) -> PyResult<f64> {
        let norm = Normalizer::new();
        let mut codes = Vec::new();
        for (intent, snippet) in &pairs {
            let surfaces = if !normalize {
                retroseq::lexer::lex_code(snippet).map_err(err)?.surfaces()
            } else if intent.trim().is_empty() {
                norm.normalize_snippet(snippet).map_err(err)?.surfaces()
            } else {
                norm.normalize_pair(intent, snippet)
                    .map_err(err)?
                    .code
                    .surfaces()
            };
            codes.push(self.inner.code_vocab().encode(&surfaces));
        }
        pl::r_overlap(&self.inner, &codes).map_err(err)
    }
}

impl PyDatabase {
    fn decode_hits(
        &self,
        hits: &[retroseq::datastore::Neighbour],
    ) -> Vec<(Vec<String>, Vec<String>, f32, u64)> {
        hits.iter()
            .map(|h| {
                (
                    self.inner.code_vocab().decode(&h.n),
                    self.inner.code_vocab().decode(&h.f),
                    h.dist,
                    h.source_id,
                )
            })
            .collect()
    }
}

/// Retrieval-augmented encoder-decoder.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: RetroModel<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.inner)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json_string(self.inner.config())
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Decode one intent into code text.
    #[pyo3(signature = (db, intent, beam=15, max_len=None, normalize=true))]
    fn generate(
        &self,
        db: &PyDatabase,
        intent: &str,
        beam: usize,
        max_len: Option<usize>,
        normalize: bool,
    ) -> PyResult<String> {
        let cfg = self.inner.config();
        let norm = Normalizer::new();
        let prep = pl::prepare_intent(
            intent,
            &norm,
            db.inner.code_vocab(),
            db.inner.nl_vocab(),
            normalize,
            cfg.max_nl_len,
        )
        .map_err(err)?;
        let params = DecodeParams {
            width: beam,
            max_len: max_len.unwrap_or(cfg.max_code_len - 1),
        };
        let uses_db = cfg.first_aggregation_layer().is_some();
        let hyp = pl::beam_decode(
            &self.inner,
            uses_db.then_some(&db.inner),
            &prep.x,
            &prep.copy,
            &params,
        )
        .map_err(err)?;
        let surfaces = db.inner.code_vocab().decode(&hyp.tokens);
        let surfaces = if normalize {
            pl::restore_surfaces(&surfaces, &prep.map)
        } else {
            surfaces
        };
        Ok(render_surfaces(&surfaces))
    }

    /// Decode (intent, snippet) pairs and score them; returns
    /// (corpus_bleu, hypothesis_texts).
    #[pyo3(signature = (db, pairs, beam=15, max_len=None, normalize=true))]
    fn evaluate(
        &self,
        db: &PyDatabase,
        pairs: Vec<(String, String)>,
        beam: usize,
        max_len: Option<usize>,
        normalize: bool,
    ) -> PyResult<(f64, Vec<String>)> {
        let cfg = self.inner.config();
        let raw = to_raw(&pairs);
        let norm = Normalizer::new();
        let prep = pl::prepare(
            &raw,
            &norm,
            db.inner.code_vocab(),
            db.inner.nl_vocab(),
            normalize,
            cfg.max_code_len,
            cfg.max_nl_len,
        );
        if prep.examples.is_empty() {
            return Err(err("no usable pairs"));
        }
        let params = DecodeParams {
            width: beam,
            max_len: max_len.unwrap_or(cfg.max_code_len - 1),
        };
        let uses_db = cfg.first_aggregation_layer().is_some();
        let out = pl::evaluate(
            &self.inner,
            uses_db.then_some(&db.inner),
            &prep.examples,
            db.inner.code_vocab(),
            &params,
        )
        .map_err(err)?;
        let texts = prep
            .examples
            .iter()
            .zip(&out.hypotheses)
            .map(|(ex, hyp)| render_surfaces(&pl::restore_surfaces(hyp, &ex.map)))
            .collect();
        Ok((out.bleu, texts))
    }
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

/// Train a model against a database; returns the model and per-epoch
/// (epoch, loss, dev_bleu, wall_seconds) metrics. The database must have
/// been built from `train_pairs` in the same order so that self-matches are
/// excluded from retrieval.
#[pyfunction]
#[pyo3(signature = (
    db, train_pairs, dev_pairs=Vec::new(),
    d_model=64, heads=4, nl_layers=1, nb_layers=1, dec_layers=3,
    k=2, p=3, aggregation="sequential", nb_encoder="classic", dropout=0.1,
    max_code_len=64, max_nl_len=32,
    epochs=5, batch_size=16, lr=1e-3, seed=0, dev_beam=1, max_dev=50,
    normalize=true
))]
#[allow(clippy::too_many_arguments)]
fn train(
    db: &PyDatabase,
    train_pairs: Vec<(String, String)>,
    dev_pairs: Vec<(String, String)>,
    d_model: usize,
    heads: usize,
    nl_layers: usize,
    nb_layers: usize,
    dec_layers: usize,
    k: usize,
    p: usize,
    aggregation: &str,
    nb_encoder: &str,
    dropout: f64,
    max_code_len: usize,
    max_nl_len: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    dev_beam: usize,
    max_dev: usize,
    normalize: bool,
) -> PyResult<(PyModel, Vec<(usize, f64, Option<f64>, f64)>)> {
    let cfg = ModelConfig {
        d_model,
        heads,
        nl_layers,
        nb_layers,
        dec_layers,
        m: db.inner.m(),
        k,
        p,
        aggregation: parse_aggregation(aggregation)?,
        nb_encoder: parse_nb_encoder(nb_encoder)?,
        dropout,
        code_vocab_size: db.inner.code_vocab().len(),
        nl_vocab_size: db.inner.nl_vocab().len(),
        max_code_len,
        max_nl_len,
    };
    cfg.validate().map_err(err)?;
    let norm = Normalizer::new();
    let prep = |pairs: &[(String, String)]| {
        let raw = to_raw(pairs);
        pl::prepare(
            &raw,
            &norm,
            db.inner.code_vocab(),
            db.inner.nl_vocab(),
            normalize,
            max_code_len,
            max_nl_len,
        )
        .examples
    };
    let train_set = prep(&train_pairs);
    let dev_set = prep(&dev_pairs);
    if train_set.is_empty() {
        return Err(err("no usable training pairs"));
    }
    let tcfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        seed,
        dev_beam,
        max_dev,
    };
    let cache;
    let retrieval = if cfg.aggregation == Aggregation::None {
        Retrieval::Off
    } else {
        cache = pl::precompute_neighbours(&train_set, &db.inner, k, true).map_err(err)?;
        Retrieval::Cached(&db.inner, &cache)
    };
    let out = pl::train(
        cfg,
        &tcfg,
        &train_set,
        &dev_set,
        db.inner.code_vocab(),
        retrieval,
    )
    .map_err(err)?;
    let metrics = out
        .metrics
        .iter()
        .map(|m| (m.epoch, m.loss, m.dev_bleu, m.wall_s))
        .collect();
    Ok((PyModel { inner: out.model }, metrics))
}

/// Deterministic synthetic corpus; returns (train, dev, test) lists of
/// (intent, snippet) pairs.
#[pyfunction]
#[pyo3(signature = (seed=0, pairs=2000, dup_rate=0.6))]
#[allow(clippy::type_complexity)]
fn synth(
    seed: u64,
    pairs: usize,
    dup_rate: f64,
) -> PyResult<(
    Vec<(String, String)>,
    Vec<(String, String)>,
    Vec<(String, String)>,
)> {
    if pairs < 30 {
        return Err(err("pairs must be at least 30"));
    }
    if !(0.0..=1.0).contains(&dup_rate) {
        return Err(err("dup_rate must be in [0, 1]"));
    }
    let c = pl::synth_corpus(seed, pairs, dup_rate);
    let flat = |v: &[RawExample]| {
        v.iter()
            .map(|e| (e.intent.clone(), e.snippet.clone()))
            .collect()
    };
    Ok((flat(&c.train), flat(&c.dev), flat(&c.test)))
}

/// Corpus-level 4-gram BLEU in [0, 100].
#[pyfunction]
fn corpus_bleu(hypotheses: Vec<Vec<String>>, references: Vec<Vec<String>>) -> PyResult<f64> {
    pl::corpus_bleu(&hypotheses, &references).map_err(err)
}

/// Intent-driven renaming; returns (intent, code, {placeholder: original}).
#[pyfunction]
fn normalize_pair(intent: &str, code: &str) -> PyResult<(String, String, HashMap<String, String>)> {
    let norm = Normalizer::new();
    let p = norm.normalize_pair(intent, code).map_err(err)?;
    let map = p
        .map
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Ok((p.intent, p.code.render(), map))
}

/// Positional renaming of every unprotected identifier.
#[pyfunction]
fn normalize_snippet(code: &str) -> PyResult<String> {
    let norm = Normalizer::new();
    Ok(norm.normalize_snippet(code).map_err(err)?.code())
}

/// Code token surfaces.
#[pyfunction]
fn lex(code: &str) -> PyResult<Vec<String>> {
    Ok(retroseq::lexer::lex_code(code).map_err(err)?.surfaces())
}

/// Intent word tokens (lowercased, punctuation split).
#[pyfunction]
fn tokenize_intent(intent: &str) -> Vec<String> {
    retroseq::normalizer::tokenize_intent(intent)
}

#[pymodule]
fn retroseq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDatabase>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_pair, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_snippet, m)?)?;
    m.add_function(wrap_pyfunction!(lex, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_intent, m)?)?;
    Ok(())
}
