//! Training loop: Adam over summed per-example losses, with per-epoch dev
//! decoding to pick the checkpoint that generates best rather than the one
//! with the lowest teacher-forced loss.
//!
//! All randomness (shuffling, dropout) is drawn from one seeded stream, and
//! retrieval never touches that stream, so cached and live retrieval produce
//! bit-identical runs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::PreparedExample;
use super::decode::{evaluate, DecodeParams};
use super::neighbours::{example_neighbours, NeighbourCache};
use super::PipelineError;
use crate::datastore::Database;
use crate::embedder::FrozenEmbedder;
use crate::model::{checkpoint, ModelConfig, NeighbourTokens, RetroModel};
use crate::nn::ForwardCtx;
use crate::tensor::{adam_update, grad, AdamConfig, AdamState, Tensor};
use crate::vocab::Vocab;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Beam width for the per-epoch dev decode.
    pub dev_beam: usize,
    /// Dev examples decoded per epoch; the rest are skipped to bound cost.
    pub max_dev: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            dev_beam: 1,
            max_dev: 200,
        }
    }
}

/// Where neighbour records come from during training.
#[derive(Clone, Copy)]
pub enum Retrieval<'a> {
    /// No database; only valid for models that never aggregate.
    Off,
    /// Precomputed records aligned index-for-index with the training set.
    Cached(&'a Database, &'a NeighbourCache),
    /// Queries issued on the fly each time an example is visited.
    Live(&'a Database),
}

impl<'a> Retrieval<'a> {
    fn database(&self) -> Option<&'a Database> {
        match self {
            Retrieval::Off => None,
            Retrieval::Cached(db, _) => Some(db),
            Retrieval::Live(db) => Some(db),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-example loss over the epoch.
    pub loss: f64,
    /// None when no dev set was given.
    pub dev_bleu: Option<f64>,
    pub wall_s: f64,
}

pub struct TrainOutput {
    pub model: RetroModel<f32>,
    /// Serialized checkpoint of the best epoch.
    pub best: Vec<u8>,
    pub best_epoch: usize,
    pub best_dev_bleu: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train(
    cfg: ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    code_vocab: &Vocab,
    retrieval: Retrieval,
) -> Result<TrainOutput, PipelineError> {
    if train_set.is_empty() {
        return Err(PipelineError::Empty { what: "training set" });
    }
    if tcfg.batch_size == 0 {
        return Err(PipelineError::Empty { what: "batch" });
    }
    let retrieves = cfg.first_aggregation_layer().is_some();
    if retrieves && retrieval.database().is_none() {
        return Err(PipelineError::MissingDatabase);
    }
    if let Some(db) = retrieval.database() {
        if db.m() != cfg.m {
            return Err(PipelineError::ChunkSizeMismatch {
                db: db.m(),
                model: cfg.m,
            });
        }
    }
    if let Retrieval::Cached(_, cache) = retrieval {
        if cache.per_example.len() != train_set.len() {
            return Err(PipelineError::CacheMismatch {
                cache: cache.per_example.len(),
                data: train_set.len(),
            });
        }
    }

    let k = cfg.k;
    let dropout = cfg.dropout;
    let model = RetroModel::<f32>::init(cfg, tcfg.seed)?;
    let params: Vec<Tensor<f32>> = model.params().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: tcfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let live_embedder = retrieval
        .database()
        .map(|db| FrozenEmbedder::new(db.embedder_id(), db.d_e()));
    let no_records = NeighbourTokens::new();

    let mut metrics = Vec::with_capacity(tcfg.epochs);
    let mut best: Vec<u8> = checkpoint::to_bytes(&model);
    let mut best_epoch = 0usize;
    let mut best_dev: Option<f64> = None;

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            // a batch is a set; summing in index order keeps the loss
            // independent of the shuffle's within-batch ordering
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let mut fwd =
                ForwardCtx::train(rng.random(), dropout).map_err(crate::model::ModelError::from)?;
            let mut total: Option<Tensor<f32>> = None;
            for &idx in &batch {
                let ex = &train_set[idx];
                let live; // keeps on-the-fly records alive for the forward
                let records: &NeighbourTokens = match retrieval {
                    Retrieval::Off => &no_records,
                    Retrieval::Cached(_, cache) => &cache.per_example[idx],
                    Retrieval::Live(db) => {
                        let (map, _) = example_neighbours(
                            ex,
                            db,
                            live_embedder.as_ref().unwrap(),
                            k,
                            Some(ex.source_id),
                        )?;
                        live = map;
                        &live
                    }
                };
                let out = model.forward(&ex.x, &ex.y_in, &ex.copy, records, &mut fwd)?;
                let nll = out.dist.nll_rows(&ex.targets)?;
                total = Some(match total {
                    None => nll,
                    Some(t) => t.add(&nll)?,
                });
            }
            let loss = total.unwrap().scale(1.0 / batch.len() as f32)?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    step,
                    loss: value,
                });
            }
            epoch_loss += value * batch.len() as f64;
            let grads = grad(&loss, &params)?;
            adam_update(&params, &grads, &mut adam)?;
        }
        let loss = epoch_loss / train_set.len() as f64;

        let dev_bleu = if dev_set.is_empty() {
            None
        } else {
            let subset = &dev_set[..dev_set.len().min(tcfg.max_dev)];
            let out = evaluate(
                &model,
                retrieval.database(),
                subset,
                code_vocab,
                &DecodeParams {
                    width: tcfg.dev_beam,
                    max_len: model.config().max_code_len - 1,
                },
            )?;
            Some(out.bleu)
        };
        let improved = match (dev_bleu, best_dev) {
            (None, _) => true,
            (Some(b), None) => {
                best_dev = Some(b);
                true
            }
            (Some(b), Some(prev)) => {
                if b > prev {
                    best_dev = Some(b);
                    true
                } else {
                    false
                }
            }
        };
        if improved {
            best = checkpoint::to_bytes(&model);
            best_epoch = epoch;
        }
        metrics.push(EpochMetrics {
            epoch,
            loss,
            dev_bleu,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutput {
        model,
        best,
        best_epoch,
        best_dev_bleu: best_dev,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::DbBuilder;
    use crate::model::Aggregation;
    use crate::normalizer::Normalizer;
    use crate::pipeline::data::{prepare, RawExample};
    use crate::pipeline::neighbours::precompute_neighbours;

    fn corpus(n: usize) -> Vec<RawExample> {
        (0..n)
            .map(|i| {
                RawExample::new(
                    &format!("fold step {i} into the accumulator `acc`"),
                    &format!("phi{i}.fold{i}({i}, acc) + rho{i}[{i}]"),
                )
            })
            .collect()
    }

    struct Fixture {
        db: Database,
        train_set: Vec<PreparedExample>,
    }

    fn fixture(n: usize) -> Fixture {
        let raw = corpus(n);
        let emb = FrozenEmbedder::new("traintest", 16);
        let mut b = DbBuilder::hybrid(4, emb, true);
        for (i, ex) in raw.iter().enumerate() {
            assert!(b.add_pair(i as u64, ex.best_intent(), &ex.snippet));
        }
        let db = b.finish().0;
        let p = prepare(
            &raw,
            &Normalizer::new(),
            db.code_vocab(),
            db.nl_vocab(),
            true,
            32,
            16,
        );
        assert_eq!(p.skipped, 0);
        Fixture {
            db,
            train_set: p.examples,
        }
    }

    fn tiny_cfg(db: &Database, agg: Aggregation) -> ModelConfig {
        let mut cfg =
            ModelConfig::with_defaults(4, db.code_vocab().len(), db.nl_vocab().len());
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.nl_layers = 1;
        cfg.nb_layers = 1;
        cfg.dec_layers = 3;
        cfg.aggregation = agg;
        cfg.dropout = 0.1;
        cfg.max_code_len = 32;
        cfg.max_nl_len = 16;
        cfg
    }

    fn run(
        f: &Fixture,
        cfg: ModelConfig,
        tcfg: &TrainConfig,
        retrieval: Retrieval,
    ) -> TrainOutput {
        train(cfg, tcfg, &f.train_set, &[], f.db.code_vocab(), retrieval).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_the_loss_flat() {
        let f = fixture(6);
        let cache = precompute_neighbours(&f.train_set, &f.db, 2, true).unwrap();
        let cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        let mut tcfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            lr: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        // dropout also off so every epoch computes the identical loss
        let mut cfg0 = cfg;
        cfg0.dropout = 0.0;
        tcfg.dev_beam = 1;
        let out = run(&f, cfg0, &tcfg, Retrieval::Cached(&f.db, &cache));
        let first = out.metrics[0].loss;
        for m in &out.metrics {
            assert_eq!(m.loss.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve_and_different_seed_departs() {
        let f = fixture(6);
        let cache = precompute_neighbours(&f.train_set, &f.db, 2, true).unwrap();
        let cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = run(&f, cfg.clone(), &tcfg, Retrieval::Cached(&f.db, &cache));
        let b = run(&f, cfg.clone(), &tcfg, Retrieval::Cached(&f.db, &cache));
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        let mut other = tcfg.clone();
        other.seed = 12;
        let c = run(&f, cfg, &other, Retrieval::Cached(&f.db, &cache));
        assert_ne!(a.metrics[0].loss.to_bits(), c.metrics[0].loss.to_bits());
    }

    #[test]
    fn cached_and_live_retrieval_train_bit_identically() {
        let f = fixture(6);
        let cache = precompute_neighbours(&f.train_set, &f.db, 2, true).unwrap();
        let cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let cached = run(&f, cfg.clone(), &tcfg, Retrieval::Cached(&f.db, &cache));
        let live = run(&f, cfg, &tcfg, Retrieval::Live(&f.db));
        for (x, y) in cached.metrics.iter().zip(&live.metrics) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(cached.best, live.best);
    }

    #[test]
    fn a_small_set_is_overfit() {
        let f = fixture(8);
        let cache = precompute_neighbours(&f.train_set, &f.db, 2, true).unwrap();
        let mut cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        cfg.dropout = 0.0;
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 3e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = run(&f, cfg, &tcfg, Retrieval::Cached(&f.db, &cache));
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(
            last < first * 0.2,
            "loss only fell from {first} to {last} over {} epochs",
            out.metrics.len()
        );
    }

    #[test]
    fn aggregation_without_a_database_is_rejected() {
        let f = fixture(4);
        let cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        let err = train(
            cfg,
            &TrainConfig::default(),
            &f.train_set,
            &[],
            f.db.code_vocab(),
            Retrieval::Off,
        )
        .err().unwrap();
        assert!(matches!(err, PipelineError::MissingDatabase));
    }

    #[test]
    fn misaligned_cache_is_rejected() {
        let f = fixture(5);
        let cache = precompute_neighbours(&f.train_set[..3], &f.db, 2, true).unwrap();
        let cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        let err = train(
            cfg,
            &TrainConfig::default(),
            &f.train_set,
            &[],
            f.db.code_vocab(),
            Retrieval::Cached(&f.db, &cache),
        )
        .err().unwrap();
        assert!(matches!(
            err,
            PipelineError::CacheMismatch { cache: 3, data: 5 }
        ));
    }

    #[test]
    fn baseline_trains_without_any_retrieval() {
        let f = fixture(6);
        let cfg = tiny_cfg(&f.db, Aggregation::None);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = run(&f, cfg, &tcfg, Retrieval::Off);
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].loss.is_finite());
    }

    #[test]
    fn dev_decode_tracks_the_best_epoch() {
        let f = fixture(8);
        let cache = precompute_neighbours(&f.train_set, &f.db, 2, true).unwrap();
        let mut cfg = tiny_cfg(&f.db, Aggregation::Sequential);
        cfg.dropout = 0.0;
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            seed: 9,
            dev_beam: 1,
            max_dev: 4,
        };
        let out = train(
            cfg,
            &tcfg,
            &f.train_set,
            &f.train_set[..4],
            f.db.code_vocab(),
            Retrieval::Cached(&f.db, &cache),
        )
        .unwrap();
        assert!(out.best_dev_bleu.is_some());
        assert!(out.best_epoch >= 1 && out.best_epoch <= 3);
        for m in &out.metrics {
            let b = m.dev_bleu.expect("dev scored every epoch");
            assert!((0.0..=100.0).contains(&b));
        }
        // the stored checkpoint must parse back into a model
        let restored = checkpoint::from_bytes(&out.best).unwrap();
        assert_eq!(restored.config(), out.model.config());
    }
}
