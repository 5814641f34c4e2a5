//! Beam search with per-hypothesis live retrieval.
//!
//! Hypotheses are ranked by length-normalized log-probability. Each time a
//! hypothesis completes a chunk of m tokens it queries the database with
//! that chunk, feeding the chunked cross-attention for the chunk it is about
//! to generate; in hybrid mode the first chunk's records come from the
//! intent before any token exists. A width-1 trajectory is always tracked
//! alongside wider beams, so widening the beam can never return a worse
//! hypothesis than greedy under the same scoring.

use super::data::PreparedExample;
use super::neighbours::as_records;
use super::PipelineError;
use crate::datastore::{Database, DbMode};
use crate::embedder::FrozenEmbedder;
use crate::model::{NeighbourTokens, RetroModel};
use crate::nn::ForwardCtx;
use crate::vocab::{Vocab, BOS, EOS, PAD};

#[derive(Debug, Clone)]
pub struct DecodeParams {
    pub width: usize,
    /// Cap on generated tokens (excluding EOS); clamped to the model's
    /// decoder window.
    pub max_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            width: 15,
            max_len: 128,
        }
    }
}

/// The winning hypothesis: generated code ids (no BOS/EOS), its summed
/// token log-probability, and the number of emissions scored (EOS included
/// when the hypothesis finished).
#[derive(Debug, Clone)]
pub struct DecodedHyp {
    pub tokens: Vec<u32>,
    pub logp: f64,
    pub emitted: usize,
}

impl DecodedHyp {
    pub fn normalized(&self) -> f64 {
        self.logp / self.emitted.max(1) as f64
    }
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    nbs: NeighbourTokens,
    logp: f64,
}

pub fn beam_decode(
    model: &RetroModel<f32>,
    db: Option<&Database>,
    x: &[u32],
    copy: &[u32],
    params: &DecodeParams,
) -> Result<DecodedHyp, PipelineError> {
    if params.width == 0 {
        return Err(PipelineError::BadWidth);
    }
    if x.is_empty() {
        return Err(PipelineError::Empty { what: "intent" });
    }
    let cfg = model.config();
    let retrieves = cfg.first_aggregation_layer().is_some();
    let db = if retrieves {
        let db = db.ok_or(PipelineError::MissingDatabase)?;
        if db.m() != cfg.m {
            return Err(PipelineError::ChunkSizeMismatch {
                db: db.m(),
                model: cfg.m,
            });
        }
        Some(db)
    } else {
        None
    };
    let max_len = params.max_len.min(cfg.max_code_len - 1);

    let best_wide = run_beam(model, db, x, copy, params.width, max_len)?;
    if params.width == 1 {
        return Ok(best_wide);
    }
    // greedy shadow: guarantees beam dominance over width 1
    let best_greedy = run_beam(model, db, x, copy, 1, max_len)?;
    if best_greedy.normalized() > best_wide.normalized() {
        Ok(best_greedy)
    } else {
        Ok(best_wide)
    }
}

fn run_beam(
    model: &RetroModel<f32>,
    db: Option<&Database>,
    x: &[u32],
    copy: &[u32],
    width: usize,
    max_len: usize,
) -> Result<DecodedHyp, PipelineError> {
    let cfg = model.config();
    let m = cfg.m;
    let k = cfg.k;
    let embedder = db.map(|db| FrozenEmbedder::new(db.embedder_id(), db.d_e()));

    let mut first = Hyp {
        tokens: Vec::new(),
        nbs: NeighbourTokens::new(),
        logp: 0.0,
    };
    if let Some(db) = db {
        if db.mode() == DbMode::Hybrid {
            let set = db.query_intent(embedder.as_ref().unwrap(), x, k, None)?;
            first.nbs.insert(0, as_records(&set.neighbours));
        }
    }

    let mut live = vec![first];
    let mut done: Vec<DecodedHyp> = Vec::new();
    let mut fwd = ForwardCtx::eval();
    while !live.is_empty() && live[0].tokens.len() < max_len {
        // (candidate logp, parent, token) for every feasible extension
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (pi, hyp) in live.iter_mut().enumerate() {
            if let Some(db) = db {
                let len = hyp.tokens.len();
                if len > 0 && len % m == 0 {
                    let u = len / m;
                    if !hyp.nbs.contains_key(&u) {
                        let set = db.query_chunk(
                            embedder.as_ref().unwrap(),
                            &hyp.tokens[len - m..],
                            k,
                            None,
                        )?;
                        hyp.nbs.insert(u, as_records(&set.neighbours));
                    }
                }
            }
            let mut y_in = Vec::with_capacity(hyp.tokens.len() + 1);
            y_in.push(BOS);
            y_in.extend_from_slice(&hyp.tokens);
            let out = model.forward(x, &y_in, copy, &hyp.nbs, &mut fwd)?;
            let dist = out.dist.to_vec();
            let v = cfg.code_vocab_size;
            let row = &dist[(y_in.len() - 1) * v..y_in.len() * v];
            let mut scored: Vec<(f64, u32)> = row
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != PAD as usize && t != BOS as usize)
                .map(|(t, &p)| ((p as f64).max(f64::MIN_POSITIVE).ln(), t as u32))
                .collect();
            scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(lp, t) in scored.iter().take(width) {
                cands.push((hyp.logp + lp, pi, t));
            }
        }
        // all live hypotheses share a length, so raw logp ranks like the
        // normalized score; ties break toward earlier parents, lower ids
        cands.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next: Vec<Hyp> = Vec::with_capacity(width);
        for &(logp, pi, t) in cands.iter().take(width) {
            let parent = &live[pi];
            let emitted = parent.tokens.len() + 1;
            if t == EOS {
                done.push(DecodedHyp {
                    tokens: parent.tokens.clone(),
                    logp,
                    emitted,
                });
            } else {
                let mut h = parent.clone();
                h.tokens.push(t);
                h.logp = logp;
                next.push(h);
            }
        }
        live = next;
    }
    for h in live {
        let emitted = h.tokens.len();
        done.push(DecodedHyp {
            tokens: h.tokens,
            logp: h.logp,
            emitted,
        });
    }
    done.into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap()
                .then(b.emitted.cmp(&a.emitted))
        })
        .ok_or(PipelineError::Empty { what: "beam" })
}

pub struct EvalOutput {
    pub bleu: f64,
    /// Decoded token surfaces per example, aligned with the input order.
    pub hypotheses: Vec<Vec<String>>,
}

/// Decodes every example and scores the corpus against the prepared
/// references.
pub fn evaluate(
    model: &RetroModel<f32>,
    db: Option<&Database>,
    examples: &[PreparedExample],
    code_vocab: &Vocab,
    params: &DecodeParams,
) -> Result<EvalOutput, PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::Empty { what: "evaluation set" });
    }
    let mut hypotheses = Vec::with_capacity(examples.len());
    for ex in examples {
        let hyp = beam_decode(model, db, &ex.x, &ex.copy, params)?;
        hypotheses.push(code_vocab.decode(&hyp.tokens));
    }
    let references: Vec<Vec<String>> = examples.iter().map(|e| e.code_tokens.clone()).collect();
    let bleu = super::bleu::corpus_bleu(&hypotheses, &references)?;
    Ok(EvalOutput { bleu, hypotheses })
}
