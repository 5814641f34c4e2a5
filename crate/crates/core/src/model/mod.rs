//! The retrieval-augmented seq2seq network.
//!
//! Three stacks share one width `d_model`: an intent encoder (self-attention
//! + feed-forward), a neighbour encoder over retrieved `[N, F]` records
//! (optionally cross-conditioned on the retrieving chunk's hidden states),
//! and a decoder whose layers follow the baseline form — self-attention,
//! cross-attention over the encoded intent, feed-forward — except every p-th
//! layer, which also folds in the neighbour encodings through chunked
//! cross-attention, either sequentially (between the intent cross-attention
//! and the feed-forward) or in parallel (both cross paths read the same
//! post-self-attention stream and a 2d→d linear map merges them).
//!
//! The output head mixes a vocabulary softmax with a copy distribution over
//! intent positions, gated per position by a sigmoid of the top state.

pub mod checkpoint;
pub mod config;

pub use checkpoint::CheckpointError;
pub use config::{Aggregation, ConfigError, ModelConfig, NbEncoderKind};

use crate::nn::{
    gain_param, xavier_param, AttnFlags, Attention, ChunkEncodings, ChunkedCrossAttn,
    FeedForward, FirstChunkMode, ForwardCtx, NnError, Sublayer, SublayerCtx,
};
use crate::tensor::{concat_cols, embedding, Scalar, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("empty {what}")]
    EmptyInput { what: &'static str },
    #[error("{what} length {len} exceeds configured maximum {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("token id {id} outside the {vocab} vocabulary of size {size}")]
    OovId {
        id: u32,
        vocab: &'static str,
        size: usize,
    },
    #[error("decoder layer index {ell} outside 1..={layers}")]
    LayerIndex { ell: usize, layers: usize },
    #[error("aggregation layer {ell} ran without neighbour encodings")]
    MissingEnb { ell: usize },
    #[error("schedule requires neighbours for chunk {chunk} but none were supplied")]
    MissingNeighbours { chunk: usize },
    #[error("neighbour record must hold {expected} token ids (N and F), got {found}")]
    RecordLength { expected: usize, found: usize },
    #[error("copy targets cover {found} positions, intent has {expected}")]
    CopyTargets { expected: usize, found: usize },
}

/// Per-chunk retrieved records: attending chunk index → up to k records,
/// each the 2m token ids of `[N, F]`. Key 0 present means the first chunk is
/// intent-guided rather than identity.
pub type NeighbourTokens = BTreeMap<usize, Vec<Vec<u32>>>;

struct EncLayer<T: Scalar> {
    sa: Sublayer<T>,
    ffw: Sublayer<T>,
}

struct NbLayer<T: Scalar> {
    sa: Sublayer<T>,
    ca: Option<Sublayer<T>>,
    ffw: Sublayer<T>,
}

enum DecAgg<T: Scalar> {
    Sequential {
        cca: Sublayer<T>,
    },
    Parallel {
        cca: Sublayer<T>,
        merge_w: Tensor<T>,
        merge_b: Tensor<T>,
    },
}

struct DecLayer<T: Scalar> {
    sa: Sublayer<T>,
    ca: Sublayer<T>,
    agg: Option<DecAgg<T>>,
    ffw: Sublayer<T>,
}

pub struct ForwardOutput<T: Scalar> {
    /// `[|Y|, code vocab]` rows of next-token probabilities; each row sums
    /// to one.
    pub dist: Tensor<T>,
    /// `[|Y|, 1]` vocabulary-vs-copy gate.
    pub gate: Tensor<T>,
    /// `[|Y|, |X|]` final intent cross-attention weights.
    pub nl_weights: Tensor<T>,
}

pub struct RetroModel<T: Scalar> {
    cfg: ModelConfig,
    code_embed: Tensor<T>,
    nl_embed: Tensor<T>,
    nl_enc: Vec<EncLayer<T>>,
    nb_enc: Vec<NbLayer<T>>,
    dec: Vec<DecLayer<T>>,
    out_w: Tensor<T>,
    out_b: Tensor<T>,
    gate_w: Tensor<T>,
    gate_b: Tensor<T>,
}

const SA_FLAGS: AttnFlags = AttnFlags {
    causal: false,
    rotary: true,
    dropout: false,
};
const DEC_SA_FLAGS: AttnFlags = AttnFlags {
    causal: true,
    rotary: true,
    dropout: false,
};
const CROSS_FLAGS: AttnFlags = AttnFlags {
    causal: false,
    rotary: false,
    dropout: true,
};

impl<T: Scalar> RetroModel<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<RetroModel<T>, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let h = cfg.heads;
        let ffw_hidden = 4 * d;

        let code_embed = xavier_param(&[cfg.code_vocab_size, d], &mut rng);
        let nl_embed = xavier_param(&[cfg.nl_vocab_size, d], &mut rng);

        let sa = |rng: &mut ChaCha8Rng, flags| -> Result<Sublayer<T>, ModelError> {
            Ok(Sublayer::SelfAttn {
                attn: Attention::init(d, h, flags, rng)?,
                gain: gain_param(d),
            })
        };
        let ca = |rng: &mut ChaCha8Rng| -> Result<Sublayer<T>, ModelError> {
            Ok(Sublayer::CrossAttn {
                attn: Attention::init(d, h, CROSS_FLAGS, rng)?,
                gain: gain_param(d),
            })
        };
        let cca = |rng: &mut ChaCha8Rng| -> Result<Sublayer<T>, ModelError> {
            Ok(Sublayer::ChunkedCross {
                cca: ChunkedCrossAttn {
                    attn: Attention::init(d, h, CROSS_FLAGS, rng)?,
                },
                gain: gain_param(d),
            })
        };
        let ffw = |rng: &mut ChaCha8Rng| Sublayer::Ffw {
            ffw: FeedForward::init(d, ffw_hidden, rng),
            gain: gain_param(d),
        };

        let mut nl_enc = Vec::with_capacity(cfg.nl_layers);
        for _ in 0..cfg.nl_layers {
            nl_enc.push(EncLayer {
                sa: sa(&mut rng, SA_FLAGS)?,
                ffw: ffw(&mut rng),
            });
        }

        let mut nb_enc = Vec::with_capacity(cfg.nb_layers);
        for _ in 0..cfg.nb_layers {
            nb_enc.push(NbLayer {
                sa: sa(&mut rng, SA_FLAGS)?,
                ca: match cfg.nb_encoder {
                    NbEncoderKind::Classic => None,
                    NbEncoderKind::Conditioned => Some(ca(&mut rng)?),
                },
                ffw: ffw(&mut rng),
            });
        }

        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for ell in 1..=cfg.dec_layers {
            let agg = if cfg.is_aggregation_layer(ell) {
                Some(match cfg.aggregation {
                    Aggregation::Sequential => DecAgg::Sequential { cca: cca(&mut rng)? },
                    Aggregation::Parallel => DecAgg::Parallel {
                        cca: cca(&mut rng)?,
                        merge_w: xavier_param(&[2 * d, d], &mut rng),
                        merge_b: Tensor::param(&[1, d], vec![T::zero(); d])
                            .expect("merge bias shape"),
                    },
                    Aggregation::None => unreachable!("schedule excludes none"),
                })
            } else {
                None
            };
            dec.push(DecLayer {
                sa: sa(&mut rng, DEC_SA_FLAGS)?,
                ca: ca(&mut rng)?,
                agg,
                ffw: ffw(&mut rng),
            });
        }

        let out_w = xavier_param(&[d, cfg.code_vocab_size], &mut rng);
        let out_b = Tensor::param(&[1, cfg.code_vocab_size], vec![T::zero(); cfg.code_vocab_size])
            .expect("out bias shape");
        let gate_w = xavier_param(&[d, 1], &mut rng);
        let gate_b = Tensor::param(&[1, 1], vec![T::zero()]).expect("gate bias shape");

        Ok(RetroModel {
            cfg,
            code_embed,
            nl_embed,
            nl_enc,
            nb_enc,
            dec,
            out_w,
            out_b,
            gate_w,
            gate_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Named parameters in declaration order. Checkpoints and the optimizer
    /// both key off this order, so it must never depend on runtime state.
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("code_embed".to_string(), self.code_embed.clone()));
        out.push(("nl_embed".to_string(), self.nl_embed.clone()));
        for (i, layer) in self.nl_enc.iter().enumerate() {
            layer.sa.params(&format!("nl.{i}.sa"), &mut out);
            layer.ffw.params(&format!("nl.{i}.ffw"), &mut out);
        }
        for (i, layer) in self.nb_enc.iter().enumerate() {
            layer.sa.params(&format!("nb.{i}.sa"), &mut out);
            if let Some(ca) = &layer.ca {
                ca.params(&format!("nb.{i}.ca"), &mut out);
            }
            layer.ffw.params(&format!("nb.{i}.ffw"), &mut out);
        }
        for (i, layer) in self.dec.iter().enumerate() {
            layer.sa.params(&format!("dec.{i}.sa"), &mut out);
            layer.ca.params(&format!("dec.{i}.ca"), &mut out);
            match &layer.agg {
                Some(DecAgg::Sequential { cca }) => cca.params(&format!("dec.{i}.cca"), &mut out),
                Some(DecAgg::Parallel {
                    cca,
                    merge_w,
                    merge_b,
                }) => {
                    cca.params(&format!("dec.{i}.cca"), &mut out);
                    out.push((format!("dec.{i}.merge_w"), merge_w.clone()));
                    out.push((format!("dec.{i}.merge_b"), merge_b.clone()));
                }
                None => {}
            }
            layer.ffw.params(&format!("dec.{i}.ffw"), &mut out);
        }
        out.push(("out.w".to_string(), self.out_w.clone()));
        out.push(("out.b".to_string(), self.out_b.clone()));
        out.push(("gate.w".to_string(), self.gate_w.clone()));
        out.push(("gate.b".to_string(), self.gate_b.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_ids(&self, ids: &[u32], size: usize, vocab: &'static str) -> Result<(), ModelError> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
            return Err(ModelError::OovId { id, vocab, size });
        }
        Ok(())
    }

    pub fn encode_nl(&self, x_ids: &[u32], fwd: &mut ForwardCtx) -> Result<Tensor<T>, ModelError> {
        if x_ids.is_empty() {
            return Err(ModelError::EmptyInput { what: "intent" });
        }
        if x_ids.len() > self.cfg.max_nl_len {
            return Err(ModelError::TooLong {
                what: "intent",
                len: x_ids.len(),
                max: self.cfg.max_nl_len,
            });
        }
        self.check_ids(x_ids, self.cfg.nl_vocab_size, "natural-language")?;
        let mut h = embedding(&self.nl_embed, x_ids)?;
        for layer in &self.nl_enc {
            h = layer.sa.forward(&h, SublayerCtx::None, fwd)?;
            h = layer.ffw.forward(&h, SublayerCtx::None, fwd)?;
        }
        Ok(h)
    }

    /// Encodes one chunk's retrieved records into a `[k·2m, d]` block. The
    /// classic kind ignores `conditioning`; the conditioned kind
    /// cross-attends each record to it when present.
    pub fn encode_neighbours(
        &self,
        records: &[Vec<u32>],
        conditioning: Option<&Tensor<T>>,
        fwd: &mut ForwardCtx,
    ) -> Result<Tensor<T>, ModelError> {
        let want = 2 * self.cfg.m;
        if records.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.d_model]));
        }
        let mut parts = Vec::with_capacity(records.len());
        for rec in records {
            if rec.len() != want {
                return Err(ModelError::RecordLength {
                    expected: want,
                    found: rec.len(),
                });
            }
            self.check_ids(rec, self.cfg.code_vocab_size, "code")?;
            let mut h = embedding(&self.code_embed, rec)?;
            for layer in &self.nb_enc {
                h = layer.sa.forward(&h, SublayerCtx::None, fwd)?;
                if let (Some(ca), NbEncoderKind::Conditioned) = (&layer.ca, self.cfg.nb_encoder) {
                    if let Some(cond) = conditioning {
                        h = ca.forward(&h, SublayerCtx::Cross(cond), fwd)?;
                    }
                }
                h = layer.ffw.forward(&h, SublayerCtx::None, fwd)?;
            }
            parts.push(h);
        }
        Ok(crate::tensor::concat_rows(&parts)?)
    }

    /// One decoder layer, 1-based index. Non-aggregation layers never touch
    /// `enc`; aggregation layers require it.
    pub fn decode_layer(
        &self,
        ell: usize,
        stream: &Tensor<T>,
        e_nl: &Tensor<T>,
        enc: Option<&ChunkEncodings<T>>,
        first: FirstChunkMode,
        fwd: &mut ForwardCtx,
    ) -> Result<Tensor<T>, ModelError> {
        self.decode_layer_with_weights(ell, stream, e_nl, enc, first, fwd)
            .map(|(t, _)| t)
    }

    fn decode_layer_with_weights(
        &self,
        ell: usize,
        stream: &Tensor<T>,
        e_nl: &Tensor<T>,
        enc: Option<&ChunkEncodings<T>>,
        first: FirstChunkMode,
        fwd: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>), ModelError> {
        if ell == 0 || ell > self.dec.len() {
            return Err(ModelError::LayerIndex {
                ell,
                layers: self.dec.len(),
            });
        }
        let layer = &self.dec[ell - 1];
        let s = layer.sa.forward(stream, SublayerCtx::None, fwd)?;
        match &layer.agg {
            None => {
                let (c, w) = layer
                    .ca
                    .forward_with_weights(&s, SublayerCtx::Cross(e_nl), fwd)?;
                let out = layer.ffw.forward(&c, SublayerCtx::None, fwd)?;
                Ok((out, w))
            }
            Some(DecAgg::Sequential { cca }) => {
                let enc = enc.ok_or(ModelError::MissingEnb { ell })?;
                let (c_nl, w) = layer
                    .ca
                    .forward_with_weights(&s, SublayerCtx::Cross(e_nl), fwd)?;
                let c_nb = cca.forward(
                    &c_nl,
                    SublayerCtx::Chunked {
                        enc,
                        m: self.cfg.m,
                        first,
                    },
                    fwd,
                )?;
                let out = layer.ffw.forward(&c_nb, SublayerCtx::None, fwd)?;
                Ok((out, w))
            }
            Some(DecAgg::Parallel {
                cca,
                merge_w,
                merge_b,
            }) => {
                let enc = enc.ok_or(ModelError::MissingEnb { ell })?;
                let (c_nl, w) = layer
                    .ca
                    .forward_with_weights(&s, SublayerCtx::Cross(e_nl), fwd)?;
                let c_nb = cca.forward(
                    &s,
                    SublayerCtx::Chunked {
                        enc,
                        m: self.cfg.m,
                        first,
                    },
                    fwd,
                )?;
                let merged = concat_cols(&[c_nl, c_nb])?
                    .matmul(merge_w)?
                    .bcast_add_row(merge_b)?;
                let out = layer.ffw.forward(&merged, SublayerCtx::None, fwd)?;
                Ok((out, w))
            }
        }
    }

    /// Mixture output head: `p = g · softmax(vocab) + (1−g) · copy`, where
    /// copy mass follows the final intent cross-attention weights, summed
    /// into each source position's code-vocab id.
    pub fn output_distribution(
        &self,
        states: &Tensor<T>,
        nl_weights: &Tensor<T>,
        copy_targets: &[u32],
    ) -> Result<ForwardOutput<T>, ModelError> {
        let (ly, _) = states.expect_rank2("output_distribution")?;
        let (wr, wc) = nl_weights.expect_rank2("output_distribution")?;
        if wr != ly || wc != copy_targets.len() {
            return Err(ModelError::CopyTargets {
                expected: wc,
                found: copy_targets.len(),
            });
        }
        self.check_ids(copy_targets, self.cfg.code_vocab_size, "code")?;

        let vocab_probs = states
            .matmul(&self.out_w)?
            .bcast_add_row(&self.out_b)?
            .row_softmax()?;
        let gate = states
            .matmul(&self.gate_w)?
            .bcast_add_row(&self.gate_b)?
            .sigmoid()?;

        // constant one-hot scatter: copy mass at source position i lands on
        // the code-vocab id of that intent token
        let v = self.cfg.code_vocab_size;
        let mut scatter = vec![T::zero(); copy_targets.len() * v];
        for (i, &t) in copy_targets.iter().enumerate() {
            scatter[i * v + t as usize] = T::one();
        }
        let scatter = Tensor::from_vec(&[copy_targets.len(), v], scatter)?;
        let copy_probs = nl_weights.matmul(&scatter)?;

        let dist = vocab_probs
            .bcast_mul_col(&gate)?
            .add(&copy_probs.bcast_mul_col(&gate.one_minus()?)?)?;
        Ok(ForwardOutput {
            dist,
            gate,
            nl_weights: nl_weights.clone(),
        })
    }

    fn first_chunk_mode(neighbours: &NeighbourTokens) -> FirstChunkMode {
        if neighbours.contains_key(&0) {
            FirstChunkMode::Guided
        } else {
            FirstChunkMode::Identity
        }
    }

    /// Builds per-chunk encodings. `hidden` supplies conditioning for the
    /// conditioned encoder kind: chunk u's records condition on the decoder
    /// rows of chunk u−1 (the chunk that retrieved them); chunk 0 has no
    /// generated code to condition on, so its records encode classically.
    fn build_encodings(
        &self,
        neighbours: &NeighbourTokens,
        n_chunks: usize,
        y_len: usize,
        hidden: Option<&Tensor<T>>,
        fwd: &mut ForwardCtx,
    ) -> Result<ChunkEncodings<T>, ModelError> {
        let m = self.cfg.m;
        let mut enc = ChunkEncodings::new();
        if let Some(records) = neighbours.get(&0) {
            enc.insert(0, self.encode_neighbours(records, None, fwd)?);
        }
        for u in 1..n_chunks {
            let records = neighbours
                .get(&u)
                .ok_or(ModelError::MissingNeighbours { chunk: u })?;
            let cond = match hidden {
                Some(h) => {
                    let start = (u - 1) * m;
                    let len = m.min(y_len - start);
                    Some(h.slice_rows(start, len)?)
                }
                None => None,
            };
            enc.insert(u, self.encode_neighbours(records, cond.as_ref(), fwd)?);
        }
        Ok(enc)
    }

    /// Teacher-forced pass: `y_ids` is the decoder input (starts with BOS);
    /// row t of the output distributes the token at position t+1.
    pub fn forward(
        &self,
        x_ids: &[u32],
        y_ids: &[u32],
        copy_targets: &[u32],
        neighbours: &NeighbourTokens,
        fwd: &mut ForwardCtx,
    ) -> Result<ForwardOutput<T>, ModelError> {
        if y_ids.is_empty() {
            return Err(ModelError::EmptyInput { what: "decoder input" });
        }
        if y_ids.len() > self.cfg.max_code_len {
            return Err(ModelError::TooLong {
                what: "decoder input",
                len: y_ids.len(),
                max: self.cfg.max_code_len,
            });
        }
        self.check_ids(y_ids, self.cfg.code_vocab_size, "code")?;
        if copy_targets.len() != x_ids.len() {
            return Err(ModelError::CopyTargets {
                expected: x_ids.len(),
                found: copy_targets.len(),
            });
        }

        let e_nl = self.encode_nl(x_ids, fwd)?;
        let mut stream = embedding(&self.code_embed, y_ids)?;

        let uses_retrieval = self.cfg.first_aggregation_layer().is_some();
        let n_chunks = y_ids.len().div_ceil(self.cfg.m);
        let first = Self::first_chunk_mode(neighbours);

        let mut enc: Option<ChunkEncodings<T>> = None;
        if uses_retrieval && matches!(self.cfg.nb_encoder, NbEncoderKind::Classic) {
            enc = Some(self.build_encodings(neighbours, n_chunks, y_ids.len(), None, fwd)?);
        }

        let first_agg = self.cfg.first_aggregation_layer().unwrap_or(usize::MAX);
        let mut last_weights: Option<Tensor<T>> = None;
        for ell in 1..=self.cfg.dec_layers {
            // conditioned encodings are built once, on the hidden states
            // entering the first aggregation layer
            if uses_retrieval && ell == first_agg && enc.is_none() {
                enc = Some(self.build_encodings(
                    neighbours,
                    n_chunks,
                    y_ids.len(),
                    Some(&stream),
                    fwd,
                )?);
            }
            let (next, w) =
                self.decode_layer_with_weights(ell, &stream, &e_nl, enc.as_ref(), first, fwd)?;
            stream = next;
            if let Some(w) = w {
                last_weights = Some(w);
            }
        }
        let weights = last_weights.expect("decoder has at least one cross-attention");
        self.output_distribution(&stream, &weights, copy_targets)
    }
}
