//! Command-line front end: one subcommand per pipeline stage, every stage
//! deterministic under a single --seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! inconsistent inputs), 3 internal error.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use retroseq::datastore::{Database, DbBuilder, DbMode, IndexChoice, KeyKind};
use retroseq::lexer::render_surfaces;
use retroseq::model::{checkpoint, Aggregation, ModelConfig, NbEncoderKind, RetroModel};
use retroseq::normalizer::Normalizer;
use retroseq::pipeline::{
    beam_decode, evaluate, precompute_neighbours, prepare, prepare_intent, r_overlap, read_jsonl,
    restore_surfaces, synth_corpus, train, write_jsonl, DecodeParams, PipelineError, RawExample,
    Retrieval, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "retroseq",
    version,
    about = "Retrieval-augmented code generation: corpus, datastore, training, decoding"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic intent/code corpus and write train/dev/test JSONL splits
    Synth(SynthArgs),
    /// Normalize a JSONL dataset (placeholder variable and string names)
    Normalize(NormalizeArgs),
    /// Build a chunked key-value datastore from a JSONL dataset
    BuildDb(BuildDbArgs),
    /// Train a model; writes the resolved config, per-epoch metrics, and the best checkpoint
    Train(TrainArgs),
    /// Decode one intent into code with beam search
    Generate(GenerateArgs),
    /// Decode a test set and report corpus BLEU
    Evaluate(EvaluateArgs),
    /// Fraction of test chunks appearing verbatim in the database
    Overlap(OverlapArgs),
    /// Print a database header and its first entries
    InspectDb(InspectDbArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Total pairs across all splits (at least 30) [default: 2000]
    #[arg(long)]
    pairs: Option<usize>,
    /// Fraction of dev/test pairs that paraphrase a training pair, in [0, 1] [default: 0.6]
    #[arg(long)]
    dup_rate: Option<f64>,
    /// Seed for corpus generation [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving train.jsonl, dev.jsonl, test.jsonl
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Input JSONL with intent/snippet fields
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// pair: intent entities drive renaming; snippet: rename all identifiers;
    /// auto: pair when the intent is non-empty [default: auto]
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct BuildDbArgs {
    /// Input JSONL; snippets feed code chunks, intents additionally key
    /// first-chunk entries in hybrid mode
    #[arg(long)]
    input: PathBuf,
    /// Tokens per chunk [default: 8]
    #[arg(long)]
    chunk_size: Option<usize>,
    /// classic: code-keyed chunks only; hybrid: plus intent-keyed beginnings [default: classic]
    #[arg(long)]
    mode: Option<String>,
    /// Normalize identifiers before chunking [default: true]
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    /// Embedding dimension for chunk keys [default: 64]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Embedder identity salt; queries must use the same one [default: "default"]
    #[arg(long)]
    embedder: Option<String>,
    /// auto | exact | approximate [default: auto]
    #[arg(long)]
    index: Option<String>,
    /// Output database path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags override individual fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training JSONL (must be the file the database was built from)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Dev JSONL decoded each epoch to pick the best checkpoint
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Database path; supplies vocabularies, and neighbours unless aggregation=none
    #[arg(long)]
    db: Option<PathBuf>,
    /// Output directory for config.json, metrics.jsonl, model.rsmd
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Model width [default: 256]
    #[arg(long)]
    d_model: Option<usize>,
    /// Attention heads [default: 8]
    #[arg(long)]
    heads: Option<usize>,
    /// Intent encoder layers [default: 6]
    #[arg(long)]
    nl_layers: Option<usize>,
    /// Neighbour encoder layers [default: 6]
    #[arg(long)]
    nb_layers: Option<usize>,
    /// Decoder layers [default: 6]
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Tokens per retrieval chunk; must match the database [default: 8]
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Neighbours per chunk [default: 2]
    #[arg(long)]
    k: Option<usize>,
    /// Aggregate every p-th decoder layer [default: 3]
    #[arg(long)]
    p: Option<usize>,
    /// none | sequential | parallel [default: sequential]
    #[arg(long)]
    aggregation: Option<String>,
    /// classic | conditioned neighbour encoder [default: classic]
    #[arg(long)]
    nb_encoder: Option<String>,
    /// Cross-attention dropout [default: 0.4]
    #[arg(long)]
    dropout: Option<f64>,
    /// Decoder window in tokens [default: 128]
    #[arg(long)]
    max_code_len: Option<usize>,
    /// Intent window in tokens [default: 64]
    #[arg(long)]
    max_nl_len: Option<usize>,
    /// Passes over the training set [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples per optimizer step [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for init, shuffling, and dropout [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Beam width for per-epoch dev decoding [default: 1]
    #[arg(long)]
    dev_beam: Option<usize>,
    /// Dev examples decoded per epoch [default: 200]
    #[arg(long)]
    max_dev: Option<usize>,
    /// Normalize examples; must match how the database was built [default: true]
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    /// Query the database on the fly instead of precomputing neighbours [default: false]
    #[arg(long, value_name = "BOOL")]
    live_retrieval: Option<bool>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Database (vocabularies and, unless aggregation=none, neighbours)
    #[arg(long)]
    db: PathBuf,
    /// Natural-language request
    #[arg(long)]
    intent: String,
    /// Beam width [default: 15]
    #[arg(long)]
    beam: Option<usize>,
    /// Generation cap in tokens [default: model window]
    #[arg(long)]
    max_len: Option<usize>,
    /// Accepted for interface uniformity; decoding is deterministic [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Map intent entities to placeholders, and back in the output;
    /// must match training [default: true]
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Database (vocabularies and, unless aggregation=none, neighbours)
    #[arg(long)]
    db: PathBuf,
    /// Test JSONL
    #[arg(long)]
    test: PathBuf,
    /// Beam width [default: 15]
    #[arg(long)]
    beam: Option<usize>,
    /// Generation cap in tokens [default: model window]
    #[arg(long)]
    max_len: Option<usize>,
    /// Must match training [default: true]
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
    /// Optional JSONL of per-example hypotheses
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverlapArgs {
    /// Database path
    #[arg(long)]
    db: PathBuf,
    /// Test JSONL
    #[arg(long)]
    test: PathBuf,
    /// Normalize test snippets before chunk lookup; must match the database [default: true]
    #[arg(long, value_name = "BOOL")]
    normalize: Option<bool>,
}

#[derive(Args)]
struct InspectDbArgs {
    /// Database path
    #[arg(long)]
    db: PathBuf,
    /// Entries to print [default: 5]
    #[arg(long)]
    entries: Option<usize>,
}

// ---------------------------------------------------------------------------
// Run configuration: canonical JSON with one flag per field.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    train: String,
    dev: String,
    db: String,
    out_dir: String,
    d_model: usize,
    heads: usize,
    nl_layers: usize,
    nb_layers: usize,
    dec_layers: usize,
    chunk_size: usize,
    k: usize,
    p: usize,
    aggregation: Aggregation,
    nb_encoder: NbEncoderKind,
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
    live_retrieval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: String::new(),
            dev: String::new(),
            db: String::new(),
            out_dir: String::new(),
            d_model: 256,
            heads: 8,
            nl_layers: 6,
            nb_layers: 6,
            dec_layers: 6,
            chunk_size: 8,
            k: 2,
            p: 3,
            aggregation: Aggregation::Sequential,
            nb_encoder: NbEncoderKind::Classic,
            dropout: 0.4,
            max_code_len: 128,
            max_nl_len: 64,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            dev_beam: 1,
            max_dev: 200,
            normalize: true,
            live_retrieval: false,
        }
    }
}

// ---------------------------------------------------------------------------

enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn data<E: Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Errors out of the training/decoding machinery: bad inputs are data
/// errors, failures past validation are internal.
fn run_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::BadWidth => CliError::Usage(e.to_string()),
        PipelineError::Tensor(_) | PipelineError::Model(_) | PipelineError::NonFiniteLoss { .. } => {
            CliError::Internal(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    if let Ok(s) = std::env::var("RETROSEQ_THREADS") {
        match s.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("RETROSEQ_THREADS must be a positive integer, got {s:?}");
                return 1;
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Normalize(a) => cmd_normalize(a),
        Cmd::BuildDb(a) => cmd_build_db(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Overlap(a) => cmd_overlap(a),
        Cmd::InspectDb(a) => cmd_inspect_db(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let pairs = a.pairs.unwrap_or(2000);
    let dup = a.dup_rate.unwrap_or(0.6);
    let seed = a.seed.unwrap_or(0);
    if pairs < 30 {
        return Err(usage(format!("--pairs must be at least 30, got {pairs}")));
    }
    if !(0.0..=1.0).contains(&dup) {
        return Err(usage(format!("--dup-rate must be in [0, 1], got {dup}")));
    }
    fs::create_dir_all(&a.out_dir).map_err(data)?;
    let corpus = synth_corpus(seed, pairs, dup);
    for (name, split) in [
        ("train.jsonl", &corpus.train),
        ("dev.jsonl", &corpus.dev),
        ("test.jsonl", &corpus.test),
    ] {
        write_jsonl(&a.out_dir.join(name), split).map_err(run_err)?;
    }
    println!(
        "wrote {} pairs to {} (train {}, dev {}, test {})",
        corpus.len(),
        a.out_dir.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    Ok(())
}

fn cmd_normalize(a: NormalizeArgs) -> Result<(), CliError> {
    let mode = a.mode.as_deref().unwrap_or("auto");
    if !matches!(mode, "auto" | "pair" | "snippet") {
        return Err(usage(format!(
            "--mode must be auto, pair, or snippet, got {mode:?}"
        )));
    }
    let raw = read_jsonl(&a.input).map_err(run_err)?;
    let norm = Normalizer::new();
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = 0usize;
    for ex in &raw {
        let as_pair = mode == "pair" || (mode == "auto" && !ex.best_intent().trim().is_empty());
        let result = if as_pair {
            norm.normalize_pair(ex.best_intent(), &ex.snippet)
                .map(|p| RawExample::new(&p.intent, &p.code.render()))
        } else {
            norm.normalize_snippet(&ex.snippet)
                .map(|s| RawExample::new(&ex.intent, &s.code()))
        };
        match result {
            Ok(ex) => out.push(ex),
            Err(_) => skipped += 1,
        }
    }
    write_jsonl(&a.out, &out).map_err(run_err)?;
    println!(
        "normalized {} of {} pairs into {} ({} skipped)",
        out.len(),
        raw.len(),
        a.out.display(),
        skipped
    );
    Ok(())
}

fn cmd_build_db(a: BuildDbArgs) -> Result<(), CliError> {
    let m = a.chunk_size.unwrap_or(8);
    let mode = a.mode.as_deref().unwrap_or("classic");
    let normalize = a.normalize.unwrap_or(true);
    let dim = a.embed_dim.unwrap_or(64);
    let salt = a.embedder.as_deref().unwrap_or("default");
    let index = parse_index(a.index.as_deref().unwrap_or("auto"))?;
    if m == 0 {
        return Err(usage("--chunk-size must be at least 1".to_string()));
    }
    if dim == 0 {
        return Err(usage("--embed-dim must be at least 1".to_string()));
    }
    let hybrid = match mode {
        "classic" => false,
        "hybrid" => true,
        other => {
            return Err(usage(format!(
                "--mode must be classic or hybrid, got {other:?}"
            )))
        }
    };
    let raw = read_jsonl(&a.input).map_err(run_err)?;
    let embedder = retroseq::embedder::FrozenEmbedder::new(salt, dim);
    let mut builder = if hybrid {
        DbBuilder::hybrid(m, embedder, normalize)
    } else {
        DbBuilder::classic(m, embedder, normalize)
    };
    for (i, ex) in raw.iter().enumerate() {
        if hybrid {
            builder.add_pair(i as u64, ex.best_intent(), &ex.snippet);
        } else {
            builder.add_snippet(i as u64, &ex.snippet);
        }
    }
    let (mut db, stats) = builder.finish();
    db.rebuild_index(index);
    db.save(&a.out).map_err(data)?;
    println!(
        "wrote {}: {} entries from {} sources ({} skipped, index {})",
        a.out.display(),
        stats.entries,
        stats.sources,
        stats.skipped,
        if db.is_approximate() { "approximate" } else { "exact" }
    );
    Ok(())
}

fn parse_index(s: &str) -> Result<IndexChoice, CliError> {
    match s {
        "auto" => Ok(IndexChoice::Auto),
        "exact" => Ok(IndexChoice::Exact),
        "approximate" => Ok(IndexChoice::Approximate),
        other => Err(usage(format!(
            "--index must be auto, exact, or approximate, got {other:?}"
        ))),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation, CliError> {
    match s {
        "none" => Ok(Aggregation::None),
        "sequential" => Ok(Aggregation::Sequential),
        "parallel" => Ok(Aggregation::Parallel),
        other => Err(usage(format!(
            "--aggregation must be none, sequential, or parallel, got {other:?}"
        ))),
    }
}

fn parse_nb_encoder(s: &str) -> Result<NbEncoderKind, CliError> {
    match s {
        "classic" => Ok(NbEncoderKind::Classic),
        "conditioned" => Ok(NbEncoderKind::Conditioned),
        other => Err(usage(format!(
            "--nb-encoder must be classic or conditioned, got {other:?}"
        ))),
    }
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(data)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| data(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
    if let Some(p) = &a.train {
        cfg.train = path_str(p);
    }
    if let Some(p) = &a.dev {
        cfg.dev = path_str(p);
    }
    if let Some(p) = &a.db {
        cfg.db = path_str(p);
    }
    if let Some(p) = &a.out_dir {
        cfg.out_dir = path_str(p);
    }
    if let Some(v) = a.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    if let Some(v) = a.nl_layers {
        cfg.nl_layers = v;
    }
    if let Some(v) = a.nb_layers {
        cfg.nb_layers = v;
    }
    if let Some(v) = a.dec_layers {
        cfg.dec_layers = v;
    }
    if let Some(v) = a.chunk_size {
        cfg.chunk_size = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.p {
        cfg.p = v;
    }
    if let Some(v) = &a.aggregation {
        cfg.aggregation = parse_aggregation(v)?;
    }
    if let Some(v) = &a.nb_encoder {
        cfg.nb_encoder = parse_nb_encoder(v)?;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = a.max_code_len {
        cfg.max_code_len = v;
    }
    if let Some(v) = a.max_nl_len {
        cfg.max_nl_len = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.dev_beam {
        cfg.dev_beam = v;
    }
    if let Some(v) = a.max_dev {
        cfg.max_dev = v;
    }
    if let Some(v) = a.normalize {
        cfg.normalize = v;
    }
    if let Some(v) = a.live_retrieval {
        cfg.live_retrieval = v;
    }
    if cfg.train.is_empty() {
        return Err(usage("--train (or config field \"train\") is required"));
    }
    if cfg.db.is_empty() {
        return Err(usage("--db (or config field \"db\") is required"));
    }
    if cfg.out_dir.is_empty() {
        return Err(usage("--out-dir (or config field \"out_dir\") is required"));
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let rc = resolve_config(&a)?;
    let db = Database::load(Path::new(&rc.db)).map_err(data)?;
    if db.m() != rc.chunk_size && rc.aggregation != Aggregation::None {
        return Err(data(format!(
            "database chunk size {} does not match --chunk-size {}",
            db.m(),
            rc.chunk_size
        )));
    }

    let model_cfg = ModelConfig {
        d_model: rc.d_model,
        heads: rc.heads,
        nl_layers: rc.nl_layers,
        nb_layers: rc.nb_layers,
        dec_layers: rc.dec_layers,
        m: rc.chunk_size,
        k: rc.k,
        p: rc.p,
        aggregation: rc.aggregation,
        nb_encoder: rc.nb_encoder,
        dropout: rc.dropout,
        code_vocab_size: db.code_vocab().len(),
        nl_vocab_size: db.nl_vocab().len(),
        max_code_len: rc.max_code_len,
        max_nl_len: rc.max_nl_len,
    };
    model_cfg.validate().map_err(usage)?;

    let norm = Normalizer::new();
    let load_split = |path: &str| -> Result<_, CliError> {
        let raw = read_jsonl(Path::new(path)).map_err(run_err)?;
        let p = prepare(
            &raw,
            &norm,
            db.code_vocab(),
            db.nl_vocab(),
            rc.normalize,
            rc.max_code_len,
            rc.max_nl_len,
        );
        if p.skipped > 0 {
            eprintln!("{path}: skipped {} of {} pairs", p.skipped, raw.len());
        }
        Ok(p.examples)
    };
    let train_set = load_split(&rc.train)?;
    let dev_set = if rc.dev.is_empty() {
        Vec::new()
    } else {
        load_split(&rc.dev)?
    };
    if train_set.is_empty() {
        return Err(data(format!("{}: no usable training pairs", rc.train)));
    }

    let out_dir = Path::new(&rc.out_dir);
    fs::create_dir_all(out_dir).map_err(data)?;
    let config_json = serde_json::to_string_pretty(&rc).expect("config serializes");
    fs::write(out_dir.join("config.json"), config_json + "\n").map_err(data)?;

    let tcfg = TrainConfig {
        epochs: rc.epochs,
        batch_size: rc.batch_size,
        lr: rc.lr,
        seed: rc.seed,
        dev_beam: rc.dev_beam,
        max_dev: rc.max_dev,
    };
    let cache;
    let retrieval = if rc.aggregation == Aggregation::None {
        Retrieval::Off
    } else if rc.live_retrieval {
        Retrieval::Live(&db)
    } else {
        cache = precompute_neighbours(&train_set, &db, rc.k, true).map_err(run_err)?;
        if cache.empty_sets > 0 {
            eprintln!(
                "warning: {} retrieval queries returned nothing",
                cache.empty_sets
            );
        }
        Retrieval::Cached(&db, &cache)
    };

    let out = train(
        model_cfg,
        &tcfg,
        &train_set,
        &dev_set,
        db.code_vocab(),
        retrieval,
    )
    .map_err(run_err)?;

    let mut metrics = fs::File::create(out_dir.join("metrics.jsonl")).map_err(data)?;
    for mrow in &out.metrics {
        let line = serde_json::json!({
            "epoch": mrow.epoch,
            "loss": mrow.loss,
            "dev_bleu": mrow.dev_bleu,
            "wall_s": mrow.wall_s,
        });
        writeln!(metrics, "{line}").map_err(data)?;
    }
    fs::write(out_dir.join("model.rsmd"), &out.best).map_err(data)?;
    match out.best_dev_bleu {
        Some(b) => println!(
            "best epoch {} (dev BLEU {:.4}) -> {}",
            out.best_epoch,
            b,
            out_dir.join("model.rsmd").display()
        ),
        None => println!(
            "trained {} epochs -> {}",
            out.metrics.len(),
            out_dir.join("model.rsmd").display()
        ),
    }
    Ok(())
}

fn load_model_and_db(model: &Path, db: &Path) -> Result<(RetroModel<f32>, Database), CliError> {
    let model = checkpoint::load(model).map_err(data)?;
    let db = Database::load(db).map_err(data)?;
    let cfg = model.config();
    if cfg.code_vocab_size != db.code_vocab().len() || cfg.nl_vocab_size != db.nl_vocab().len() {
        return Err(data(format!(
            "checkpoint vocabularies ({} code, {} intent) do not match the database ({}, {})",
            cfg.code_vocab_size,
            cfg.nl_vocab_size,
            db.code_vocab().len(),
            db.nl_vocab().len()
        )));
    }
    Ok((model, db))
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let normalize = a.normalize.unwrap_or(true);
    let (model, db) = load_model_and_db(&a.model, &a.db)?;
    let norm = Normalizer::new();
    let prep = prepare_intent(
        &a.intent,
        &norm,
        db.code_vocab(),
        db.nl_vocab(),
        normalize,
        model.config().max_nl_len,
    )
    .map_err(run_err)?;
    let params = DecodeParams {
        width: a.beam.unwrap_or(15),
        max_len: a.max_len.unwrap_or(model.config().max_code_len - 1),
    };
    let uses_db = model.config().first_aggregation_layer().is_some();
    let hyp = beam_decode(
        &model,
        uses_db.then_some(&db),
        &prep.x,
        &prep.copy,
        &params,
    )
    .map_err(run_err)?;
    let surfaces = db.code_vocab().decode(&hyp.tokens);
    let surfaces = if normalize {
        restore_surfaces(&surfaces, &prep.map)
    } else {
        surfaces
    };
    println!("{}", render_surfaces(&surfaces));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let normalize = a.normalize.unwrap_or(true);
    let (model, db) = load_model_and_db(&a.model, &a.db)?;
    let raw = read_jsonl(&a.test).map_err(run_err)?;
    let norm = Normalizer::new();
    let prep = prepare(
        &raw,
        &norm,
        db.code_vocab(),
        db.nl_vocab(),
        normalize,
        model.config().max_code_len,
        model.config().max_nl_len,
    );
    if prep.skipped > 0 {
        eprintln!(
            "{}: skipped {} of {} pairs",
            a.test.display(),
            prep.skipped,
            raw.len()
        );
    }
    if prep.examples.is_empty() {
        return Err(data(format!("{}: no usable pairs", a.test.display())));
    }
    let params = DecodeParams {
        width: a.beam.unwrap_or(15),
        max_len: a.max_len.unwrap_or(model.config().max_code_len - 1),
    };
    let uses_db = model.config().first_aggregation_layer().is_some();
    let out = evaluate(
        &model,
        uses_db.then_some(&db),
        &prep.examples,
        db.code_vocab(),
        &params,
    )
    .map_err(run_err)?;
    if let Some(path) = &a.out {
        let mut file = fs::File::create(path).map_err(data)?;
        for (ex, hyp) in prep.examples.iter().zip(&out.hypotheses) {
            let source = &raw[ex.source_id as usize];
            let restored = restore_surfaces(hyp, &ex.map);
            let line = serde_json::json!({
                "intent": source.best_intent(),
                "reference": source.snippet,
                "hypothesis": render_surfaces(&restored),
            });
            writeln!(file, "{line}").map_err(data)?;
        }
    }
    println!("{:.4}", out.bleu);
    Ok(())
}

fn cmd_overlap(a: OverlapArgs) -> Result<(), CliError> {
    let normalize = a.normalize.unwrap_or(true);
    let db = Database::load(&a.db).map_err(data)?;
    let raw = read_jsonl(&a.test).map_err(run_err)?;
    let norm = Normalizer::new();
    let mut codes: Vec<Vec<u32>> = Vec::new();
    let mut skipped = 0usize;
    for ex in &raw {
        let surfaces = if !normalize {
            retroseq::lexer::lex_code(&ex.snippet)
                .map(|l| l.surfaces())
                .map_err(retroseq::normalizer::NormalizeError::from)
        } else if ex.best_intent().trim().is_empty() {
            norm.normalize_snippet(&ex.snippet).map(|s| s.surfaces())
        } else {
            norm.normalize_pair(ex.best_intent(), &ex.snippet)
                .map(|p| p.code.surfaces())
        };
        match surfaces {
            Ok(s) if !s.is_empty() => codes.push(db.code_vocab().encode(&s)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} of {} snippets", raw.len());
    }
    let r = r_overlap(&db, &codes).map_err(run_err)?;
    println!("{r:.4}");
    Ok(())
}

fn cmd_inspect_db(a: InspectDbArgs) -> Result<(), CliError> {
    let db = Database::load(&a.db).map_err(data)?;
    let n = a.entries.unwrap_or(5);
    println!(
        "mode: {}",
        match db.mode() {
            DbMode::Classic => "classic",
            DbMode::Hybrid => "hybrid",
        }
    );
    println!("chunk size: {}", db.m());
    println!("embedder: {} (dim {})", db.embedder_id(), db.d_e());
    println!("entries: {}", db.len());
    println!(
        "vocabulary: {} code tokens, {} intent tokens",
        db.code_vocab().len(),
        db.nl_vocab().len()
    );
    println!(
        "index: {}",
        if db.is_approximate() { "approximate" } else { "exact" }
    );
    for (i, rec) in db.records().iter().take(n).enumerate() {
        let n_text = render_surfaces(&db.code_vocab().decode(&rec.n));
        let f_text = render_surfaces(&db.code_vocab().decode(&rec.f));
        let kind = match rec.kind {
            KeyKind::Code => "code",
            KeyKind::Intent => "intent",
        };
        println!("[{i}] source {} ({kind}) N: {n_text} | F: {f_text}", rec.source_id);
    }
    Ok(())
}

