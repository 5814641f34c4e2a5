//! Transformer building blocks: RMS normalisation, rotary position mixing,
//! multi-head attention, residual sublayers, and chunked cross-attention over
//! retrieved neighbour encodings.
//!
//! All blocks are generic over the scalar type so gradient checks can run at
//! f64 while training runs at f32.

use crate::tensor::{concat_cols, concat_rows, Scalar, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const RMS_EPS: f64 = 1e-6;
pub const ROTARY_BASE: f64 = 10000.0;
/// Large negative used to mask attention scores. After max-subtraction the
/// exponential underflows to exactly 0.0, so masked positions get weight 0
/// rather than merely a small value.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model width {d} is not divisible by {heads} heads")]
    HeadSplit { d: usize, heads: usize },
    #[error("rotary positions need an even per-head width, got {dim}")]
    OddRotaryDim { dim: usize },
    #[error("{kind} sublayer needs a context tensor")]
    MissingContext { kind: &'static str },
    #[error("no neighbour encoding provided for chunk {chunk}")]
    MissingChunkEncoding { chunk: usize },
    #[error("chunk size must be at least 1")]
    ChunkSize,
    #[error("dropout rate {rate} outside [0, 1)")]
    DropoutRate { rate: f64 },
    #[error("causal attention requires square scores, got {lq} queries and {lk} keys")]
    CausalShape { lq: usize, lk: usize },
}

/// Per-forward state: evaluation is pure; training carries the RNG that
/// drives attention dropout, so one seed reproduces every mask.
pub struct ForwardCtx {
    mode: Mode,
}

enum Mode {
    Eval,
    Train { rng: ChaCha8Rng, rate: f64 },
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { mode: Mode::Eval }
    }

    pub fn train(seed: u64, attn_dropout: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&attn_dropout) {
            return Err(NnError::DropoutRate { rate: attn_dropout });
        }
        Ok(ForwardCtx {
            mode: Mode::Train {
                rng: ChaCha8Rng::seed_from_u64(seed),
                rate: attn_dropout,
            },
        })
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Inverted dropout on attention weights. Identity in eval mode and at
    /// rate 0; in training the kept entries are scaled by 1/(1-rate) so the
    /// expected row mass stays 1.
    fn attn_dropout<T: Scalar>(&mut self, w: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let Mode::Train { rng, rate } = &mut self.mode else {
            return Ok(w.clone());
        };
        if *rate == 0.0 {
            return Ok(w.clone());
        }
        let keep = 1.0 - *rate;
        let inv = T::of_f64(1.0 / keep);
        let mask: Vec<bool> = (0..w.len()).map(|_| rng.random::<f64>() < *rate).collect();
        let out: Vec<T> = w
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &drop)| if drop { T::zero() } else { v * inv })
            .collect();
        let shape = w.shape().to_vec();
        Ok(Tensor::from_op(shape, out, vec![w.clone()], move |ctx| {
            let da: Vec<T> = ctx
                .out_grad
                .iter()
                .zip(&mask)
                .map(|(&g, &drop)| if drop { T::zero() } else { g * inv })
                .collect();
            ctx.add_grad(0, &da);
        })?)
    }
}

use rand::SeedableRng;

/// x · gain / rms(x), row-wise. Scale-invariant in x up to the epsilon guard.
pub fn rms_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, NnError> {
    let ms = x.mul(x)?.row_mean()?;
    let inv = ms.rsqrt_add(T::of_f64(eps))?;
    Ok(x.bcast_mul_col(&inv)?.bcast_mul_row(gain)?)
}

/// Rotates adjacent value pairs of each row by position-dependent angles
/// θ_j = pos · base^(−2j/d). Dot products between rotated queries and keys
/// then depend only on relative offsets. `positions[i]` is row i's position.
pub fn rotary<T: Scalar>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>, NnError> {
    let (rows, d) = x.expect_rank2("rotary")?;
    if d % 2 != 0 {
        return Err(NnError::OddRotaryDim { dim: d });
    }
    debug_assert_eq!(positions.len(), rows);
    let half = d / 2;
    let mut cos = vec![T::zero(); rows * half];
    let mut sin = vec![T::zero(); rows * half];
    for (i, &pos) in positions.iter().enumerate() {
        for j in 0..half {
            let theta = pos as f64 * ROTARY_BASE.powf(-2.0 * j as f64 / d as f64);
            cos[i * half + j] = T::of_f64(theta.cos());
            sin[i * half + j] = T::of_f64(theta.sin());
        }
    }
    let src = x.data();
    let mut out = vec![T::zero(); rows * d];
    for i in 0..rows {
        for j in 0..half {
            let (c, s) = (cos[i * half + j], sin[i * half + j]);
            let a = src[i * d + 2 * j];
            let b = src[i * d + 2 * j + 1];
            out[i * d + 2 * j] = a * c - b * s;
            out[i * d + 2 * j + 1] = a * s + b * c;
        }
    }
    drop(src);
    Ok(Tensor::from_op(
        vec![rows, d],
        out,
        vec![x.clone()],
        move |ctx| {
            // rotation is orthogonal: backward rotates the gradient by −θ
            let mut da = vec![T::zero(); rows * d];
            for i in 0..rows {
                for j in 0..half {
                    let (c, s) = (cos[i * half + j], sin[i * half + j]);
                    let ga = ctx.out_grad[i * d + 2 * j];
                    let gb = ctx.out_grad[i * d + 2 * j + 1];
                    da[i * d + 2 * j] = ga * c + gb * s;
                    da[i * d + 2 * j + 1] = -ga * s + gb * c;
                }
            }
            ctx.add_grad(0, &da);
        },
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct AttnFlags {
    pub causal: bool,
    pub rotary: bool,
    /// Apply attention-weight dropout when the forward context is training.
    pub dropout: bool,
}

pub struct Attention<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
    pub flags: AttnFlags,
}

pub struct AttnOut<T: Scalar> {
    pub out: Tensor<T>,
    /// Head-averaged attention weights before dropout, `[lq, lk]`. Rows sum
    /// to one; the pointer head reads these off the last decoder layer.
    pub weights: Tensor<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init<R: Rng>(
        d: usize,
        heads: usize,
        flags: AttnFlags,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadSplit { d, heads });
        }
        if flags.rotary && (d / heads) % 2 != 0 {
            return Err(NnError::OddRotaryDim { dim: d / heads });
        }
        let mut mk = || xavier_param::<T, R>(&[d, d], rng);
        Ok(Attention {
            wq: mk(),
            wk: mk(),
            wv: mk(),
            wo: mk(),
            heads,
            flags,
        })
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }

    /// Queries come from `q_src`, keys and values from `kv_src`.
    pub fn forward(
        &self,
        q_src: &Tensor<T>,
        kv_src: &Tensor<T>,
        fwd: &mut ForwardCtx,
    ) -> Result<AttnOut<T>, NnError> {
        let (lq, d) = q_src.expect_rank2("attention")?;
        let (lk, dk) = kv_src.expect_rank2("attention")?;
        if d != self.d() || dk != self.d() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: q_src.shape().to_vec(),
                rhs: self.wq.shape().to_vec(),
            }
            .into());
        }
        if self.flags.causal && lq != lk {
            return Err(NnError::CausalShape { lq, lk });
        }
        let q_all = q_src.matmul(&self.wq)?;
        let k_all = kv_src.matmul(&self.wk)?;
        let v_all = kv_src.matmul(&self.wv)?;
        let dh = d / self.heads;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mask = self.flags.causal.then(|| causal_mask(lq));
        let qpos: Vec<usize> = (0..lq).collect();
        let kpos: Vec<usize> = (0..lk).collect();

        let mut outs = Vec::with_capacity(self.heads);
        let mut wsum: Option<Tensor<T>> = None;
        for h in 0..self.heads {
            let mut qh = q_all.slice_cols(h * dh, dh)?;
            let mut kh = k_all.slice_cols(h * dh, dh)?;
            let vh = v_all.slice_cols(h * dh, dh)?;
            if self.flags.rotary {
                qh = rotary(&qh, &qpos)?;
                kh = rotary(&kh, &kpos)?;
            }
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
            if let Some(mask) = &mask {
                scores = scores.masked_fill(mask, T::of_f64(MASK_VALUE))?;
            }
            let w = scores.row_softmax()?;
            wsum = Some(match wsum {
                Some(acc) => acc.add(&w)?,
                None => w.clone(),
            });
            let w_used = if self.flags.dropout {
                fwd.attn_dropout(&w)?
            } else {
                w
            };
            outs.push(w_used.matmul(&vh)?);
        }
        let out = concat_cols(&outs)?.matmul(&self.wo)?;
        let weights = wsum
            .expect("at least one head")
            .scale(T::of_f64(1.0 / self.heads as f64))?;
        Ok(AttnOut { out, weights })
    }
}

/// Mask for square scores: true (blocked) where the key index exceeds the
/// query index.
pub fn causal_mask(l: usize) -> Vec<bool> {
    let mut mask = vec![false; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            mask[i * l + j] = true;
        }
    }
    mask
}

pub struct FeedForward<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            w1: xavier_param(&[d, hidden], rng),
            b1: Tensor::param(&[hidden], vec![T::zero(); hidden]).expect("bias shape"),
            w2: xavier_param(&[hidden, d], rng),
            b2: Tensor::param(&[d], vec![T::zero(); d]).expect("bias shape"),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(x.matmul(&self.w1)?
            .bcast_add_row(&self.b1)?
            .relu()?
            .matmul(&self.w2)?
            .bcast_add_row(&self.b2)?)
    }
}

/// Neighbour encodings for chunked cross-attention, keyed by the index of the
/// chunk that attends to them (0-based). The caller is responsible for the
/// causal alignment: the encoding stored at chunk `u` must be derived from
/// tokens of chunks strictly before `u`. An encoding with zero rows means
/// retrieval returned nothing; those chunks pass through unchanged.
#[derive(Default)]
pub struct ChunkEncodings<T: Scalar> {
    per_chunk: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> ChunkEncodings<T> {
    pub fn new() -> Self {
        ChunkEncodings {
            per_chunk: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, chunk: usize, encoding: Tensor<T>) {
        self.per_chunk.insert(chunk, encoding);
    }

    pub fn get(&self, chunk: usize) -> Option<&Tensor<T>> {
        self.per_chunk.get(&chunk)
    }

    pub fn len(&self) -> usize {
        self.per_chunk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_chunk.is_empty()
    }
}

/// How the first chunk is treated: `Identity` passes its rows through
/// untouched (nothing precedes them to retrieve with); `Guided` attends to an
/// encoding retrieved by other means, e.g. the natural-language intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstChunkMode {
    Identity,
    Guided,
}

pub struct ChunkedCrossAttn<T: Scalar> {
    pub attn: Attention<T>,
}

impl<T: Scalar> ChunkedCrossAttn<T> {
    /// Splits the sequence into chunks of `m` rows (last chunk may be short)
    /// and lets each chunk attend to its neighbour encoding. Identity rows
    /// keep their exact input values, so positions with no retrieval context
    /// are bitwise untouched.
    pub fn forward(
        &self,
        c: &Tensor<T>,
        enc: &ChunkEncodings<T>,
        m: usize,
        first: FirstChunkMode,
        fwd: &mut ForwardCtx,
    ) -> Result<Tensor<T>, NnError> {
        if m == 0 {
            return Err(NnError::ChunkSize);
        }
        let (l, _) = c.expect_rank2("chunked_cross_attn")?;
        let n_chunks = l.div_ceil(m);
        let mut parts = Vec::with_capacity(n_chunks);
        for u in 0..n_chunks {
            let rows = c.slice_rows(u * m, m.min(l - u * m))?;
            if u == 0 && first == FirstChunkMode::Identity {
                parts.push(rows);
                continue;
            }
            let e = enc
                .get(u)
                .ok_or(NnError::MissingChunkEncoding { chunk: u })?;
            if e.rows() == 0 {
                parts.push(rows);
            } else {
                parts.push(self.attn.forward(&rows, e, fwd)?.out);
            }
        }
        Ok(concat_rows(&parts)?)
    }
}

/// Residual sublayers. Uniformly: out = RMSNorm(stream + inner(stream)).
/// For cross-attention the residual comes from the query stream and the
/// context supplies keys and values.
pub enum Sublayer<T: Scalar> {
    SelfAttn { attn: Attention<T>, gain: Tensor<T> },
    CrossAttn { attn: Attention<T>, gain: Tensor<T> },
    ChunkedCross { cca: ChunkedCrossAttn<T>, gain: Tensor<T> },
    Ffw { ffw: FeedForward<T>, gain: Tensor<T> },
}

/// Extra inputs a sublayer may need beyond its own stream.
pub enum SublayerCtx<'a, T: Scalar> {
    None,
    Cross(&'a Tensor<T>),
    Chunked {
        enc: &'a ChunkEncodings<T>,
        m: usize,
        first: FirstChunkMode,
    },
}

impl<T: Scalar> Sublayer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Sublayer::SelfAttn { .. } => "self-attention",
            Sublayer::CrossAttn { .. } => "cross-attention",
            Sublayer::ChunkedCross { .. } => "chunked cross-attention",
            Sublayer::Ffw { .. } => "feed-forward",
        }
    }

    pub fn gain(&self) -> &Tensor<T> {
        match self {
            Sublayer::SelfAttn { gain, .. }
            | Sublayer::CrossAttn { gain, .. }
            | Sublayer::ChunkedCross { gain, .. }
            | Sublayer::Ffw { gain, .. } => gain,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        match self {
            Sublayer::SelfAttn { attn, .. } | Sublayer::CrossAttn { attn, .. } => {
                attn.params(prefix, out)
            }
            Sublayer::ChunkedCross { cca, .. } => cca.attn.params(prefix, out),
            Sublayer::Ffw { ffw, .. } => ffw.params(prefix, out),
        }
        out.push((format!("{prefix}.gain"), self.gain().clone()));
    }

    pub fn forward(
        &self,
        stream: &Tensor<T>,
        ctx: SublayerCtx<'_, T>,
        fwd: &mut ForwardCtx,
    ) -> Result<Tensor<T>, NnError> {
        self.forward_with_weights(stream, ctx, fwd).map(|(t, _)| t)
    }

    /// Same as `forward` but also exposes the inner attention weights where
    /// the sublayer has them (self- and cross-attention).
    pub fn forward_with_weights(
        &self,
        stream: &Tensor<T>,
        ctx: SublayerCtx<'_, T>,
        fwd: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>), NnError> {
        let (inner, weights) = match (self, ctx) {
            (Sublayer::SelfAttn { attn, .. }, SublayerCtx::None) => {
                let o = attn.forward(stream, stream, fwd)?;
                (o.out, Some(o.weights))
            }
            (Sublayer::CrossAttn { attn, .. }, SublayerCtx::Cross(context)) => {
                let o = attn.forward(stream, context, fwd)?;
                (o.out, Some(o.weights))
            }
            (Sublayer::ChunkedCross { cca, .. }, SublayerCtx::Chunked { enc, m, first }) => {
                (cca.forward(stream, enc, m, first, fwd)?, None)
            }
            (Sublayer::Ffw { ffw, .. }, SublayerCtx::None) => (ffw.forward(stream)?, None),
            (layer, _) => {
                return Err(NnError::MissingContext { kind: layer.kind() });
            }
        };
        let out = rms_norm(&stream.add(&inner)?, self.gain(), RMS_EPS)?;
        Ok((out, weights))
    }
}

pub fn gain_param<T: Scalar>(d: usize) -> Tensor<T> {
    Tensor::param(&[d], vec![T::one(); d]).expect("gain shape")
}

/// Scaled-uniform init, ±√(6/(fan_in+fan_out)) for a `[fan_in, fan_out]`
/// matrix.
pub fn xavier_param<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in = shape.first().copied().unwrap_or(1);
    let fan_out = shape.get(1).copied().unwrap_or(1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::param(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdcheck::{coordinate_check, directional_check, random_param, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn rms_norm_is_scale_invariant() {
        let mut r = rng(1);
        let x: Tensor<f64> = random_param(&[3, 8], 1.0, &mut r);
        let gain = gain_param::<f64>(8);
        let y1 = rms_norm(&x, &gain, RMS_EPS).unwrap().to_vec();
        let scaled = x.scale(37.5).unwrap();
        // the epsilon guard perturbs the two scales differently by O(eps)
        let y2 = rms_norm(&scaled, &gain, RMS_EPS).unwrap().to_vec();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn rms_norm_unit_rms_output() {
        let mut r = rng(2);
        let x: Tensor<f64> = random_param(&[4, 16], 2.0, &mut r);
        let gain = gain_param::<f64>(16);
        let y = rms_norm(&x, &gain, RMS_EPS).unwrap();
        let d = y.to_vec();
        for i in 0..4 {
            let ms: f64 = d[i * 16..(i + 1) * 16].iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-5, "row {i} rms {}", ms.sqrt());
        }
    }

    #[test]
    fn rotary_preserves_norm_and_relative_offsets() {
        let mut r = rng(3);
        let d = 8;
        let q: Tensor<f64> = random_param(&[1, d], 1.0, &mut r);
        let k: Tensor<f64> = random_param(&[1, d], 1.0, &mut r);

        let n0: f64 = q.to_vec().iter().map(|v| v * v).sum();
        let nr: f64 = rotary(&q, &[11]).unwrap().to_vec().iter().map(|v| v * v).sum();
        assert!((n0 - nr).abs() < 1e-10);

        // ⟨rot(q,i), rot(k,j)⟩ depends only on i−j
        let dot = |qi: usize, kj: usize| -> f64 {
            let a = rotary(&q, &[qi]).unwrap().to_vec();
            let b = rotary(&k, &[kj]).unwrap().to_vec();
            a.iter().zip(&b).map(|(x, y)| x * y).sum()
        };
        let d1 = dot(5, 2);
        let d2 = dot(9, 6);
        let d3 = dot(105, 102);
        assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
        assert!((d1 - d3).abs() < 1e-9, "{d1} vs {d3}");
    }

    #[test]
    fn causal_attention_weights_are_exactly_zero_above_diagonal() {
        let mut r = rng(4);
        let d = 16;
        let attn: Attention<f64> = Attention::init(
            d,
            2,
            AttnFlags {
                causal: true,
                rotary: true,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let x: Tensor<f64> = random_param(&[5, d], 1.0, &mut r);
        let out = attn.forward(&x, &x, &mut ForwardCtx::eval()).unwrap();
        let w = out.weights.to_vec();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_eq!(w[i * 5 + j], 0.0, "weight ({i},{j}) must be exactly zero");
            }
            let row: f64 = w[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let mut r = rng(5);
        let attn: Attention<f64> = Attention::init(
            8,
            2,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let x: Tensor<f64> = random_param(&[3, 6], 1.0, &mut r);
        assert!(attn.forward(&x, &x, &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(6);
        let d = 8;
        let attn: Attention<f64> = Attention::init(
            d,
            2,
            AttnFlags {
                causal: true,
                rotary: true,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let x: Tensor<f64> = random_param(&[4, d], 0.7, &mut r);
        let mut params = vec![x.clone()];
        params.extend([attn.wq.clone(), attn.wk.clone(), attn.wv.clone(), attn.wo.clone()]);
        let loss_fn = || -> Result<Tensor<f64>, NnError> {
            let o = attn.forward(&x, &x, &mut ForwardCtx::eval())?;
            Ok(o.out.mul(&o.out)?.sum_all()?)
        };
        for _ in 0..3 {
            let e = directional_check(&params, loss_fn, &mut r, FD_STEP).unwrap();
            assert!(e < 1e-6, "directional err {e}");
        }
        let e = coordinate_check(&params, loss_fn, 25, &mut r, FD_STEP).unwrap();
        assert!(e < 1e-6, "coordinate err {e}");
    }

    #[test]
    fn dropout_identity_in_eval_and_at_rate_zero() {
        let mut r = rng(7);
        let w: Tensor<f64> = random_param(&[3, 3], 1.0, &mut r);
        let mut eval = ForwardCtx::eval();
        assert_eq!(eval.attn_dropout(&w).unwrap().to_vec(), w.to_vec());
        let mut zero = ForwardCtx::train(1, 0.0).unwrap();
        assert_eq!(zero.attn_dropout(&w).unwrap().to_vec(), w.to_vec());
    }

    #[test]
    fn dropout_is_seed_deterministic_and_unbiased() {
        let w: Tensor<f64> = Tensor::from_vec(&[1, 1000], vec![1.0; 1000]).unwrap();
        let a = ForwardCtx::train(42, 0.4).unwrap().attn_dropout(&w).unwrap();
        let b = ForwardCtx::train(42, 0.4).unwrap().attn_dropout(&w).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let c = ForwardCtx::train(43, 0.4).unwrap().attn_dropout(&w).unwrap();
        assert_ne!(a.to_vec(), c.to_vec());
        // inverted scaling keeps the mean near 1
        let mean: f64 = a.to_vec().iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
        // kept entries are scaled by 1/(1-rate)
        for v in a.to_vec() {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        assert!(ForwardCtx::train(1, 1.0).is_err());
        assert!(ForwardCtx::train(1, -0.1).is_err());
    }

    #[test]
    fn cross_sublayer_takes_residual_from_query_stream() {
        let mut r = rng(8);
        let d = 8;
        let attn: Attention<f64> = Attention::init(
            d,
            2,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let gain = gain_param::<f64>(d);
        let y: Tensor<f64> = random_param(&[3, d], 1.0, &mut r);
        let x: Tensor<f64> = random_param(&[5, d], 1.0, &mut r);

        let expected = {
            let inner = attn.forward(&y, &x, &mut ForwardCtx::eval()).unwrap().out;
            rms_norm(&y.add(&inner).unwrap(), &gain, RMS_EPS).unwrap().to_vec()
        };
        let layer = Sublayer::CrossAttn { attn, gain };
        let got = layer
            .forward(&y, SublayerCtx::Cross(&x), &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(got.shape(), &[3, d]);
        assert_eq!(got.to_vec(), expected);
    }

    #[test]
    fn sublayer_missing_context_is_an_error() {
        let mut r = rng(9);
        let attn: Attention<f64> = Attention::init(
            8,
            2,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let layer = Sublayer::CrossAttn {
            attn,
            gain: gain_param(8),
        };
        let y: Tensor<f64> = random_param(&[3, 8], 1.0, &mut r);
        let err = layer
            .forward(&y, SublayerCtx::None, &mut ForwardCtx::eval())
            .unwrap_err();
        assert!(matches!(err, NnError::MissingContext { .. }));
    }

    fn cca_fixture(seed: u64) -> (ChunkedCrossAttn<f64>, Tensor<f64>, ChunkEncodings<f64>) {
        let mut r = rng(seed);
        let d = 8;
        let attn = Attention::init(
            d,
            2,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let c: Tensor<f64> = random_param(&[7, d], 1.0, &mut r); // m=3 → chunks of 3,3,1
        let mut enc = ChunkEncodings::new();
        enc.insert(1, random_param(&[4, d], 1.0, &mut r));
        enc.insert(2, random_param(&[4, d], 1.0, &mut r));
        (ChunkedCrossAttn { attn }, c, enc)
    }

    #[test]
    fn cca_first_chunk_rows_pass_through_bitwise() {
        let (cca, c, enc) = cca_fixture(10);
        let out = cca
            .forward(&c, &enc, 3, FirstChunkMode::Identity, &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(out.shape(), c.shape());
        let (ov, cv) = (out.to_vec(), c.to_vec());
        assert_eq!(&ov[..3 * 8], &cv[..3 * 8], "first chunk must be untouched");
        assert_ne!(&ov[3 * 8..], &cv[3 * 8..]);
    }

    #[test]
    fn cca_matches_per_chunk_attention_oracle() {
        let (cca, c, enc) = cca_fixture(11);
        let out = cca
            .forward(&c, &enc, 3, FirstChunkMode::Identity, &mut ForwardCtx::eval())
            .unwrap()
            .to_vec();
        // oracle: assemble chunk by chunk with standalone attention calls
        let mut expect = c.to_vec()[..3 * 8].to_vec();
        for u in 1..3usize {
            let rows = c.slice_rows(u * 3, 3.min(7 - u * 3)).unwrap();
            let o = cca
                .attn
                .forward(&rows, enc.get(u).unwrap(), &mut ForwardCtx::eval())
                .unwrap();
            expect.extend(o.out.to_vec());
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn cca_missing_encoding_is_an_error() {
        let (cca, c, _) = cca_fixture(12);
        let err = cca
            .forward(
                &c,
                &ChunkEncodings::new(),
                3,
                FirstChunkMode::Identity,
                &mut ForwardCtx::eval(),
            )
            .unwrap_err();
        assert!(matches!(err, NnError::MissingChunkEncoding { chunk: 1 }));
    }

    #[test]
    fn cca_empty_encoding_passes_rows_through() {
        let (cca, c, mut enc) = cca_fixture(13);
        enc.insert(1, Tensor::zeros(&[0, 8]));
        let out = cca
            .forward(&c, &enc, 3, FirstChunkMode::Identity, &mut ForwardCtx::eval())
            .unwrap()
            .to_vec();
        assert_eq!(&out[3 * 8..6 * 8], &c.to_vec()[3 * 8..6 * 8]);
    }

    #[test]
    fn cca_guided_mode_attends_in_first_chunk() {
        let (cca, c, mut enc) = cca_fixture(14);
        let mut r = rng(15);
        enc.insert(0, random_param(&[4, 8], 1.0, &mut r));
        let out = cca
            .forward(&c, &enc, 3, FirstChunkMode::Guided, &mut ForwardCtx::eval())
            .unwrap()
            .to_vec();
        assert_ne!(&out[..3 * 8], &c.to_vec()[..3 * 8]);
        // and guided mode without a chunk-0 encoding is an error
        let (cca2, c2, enc2) = cca_fixture(14);
        let err = cca2
            .forward(&c2, &enc2, 3, FirstChunkMode::Guided, &mut ForwardCtx::eval())
            .unwrap_err();
        assert!(matches!(err, NnError::MissingChunkEncoding { chunk: 0 }));
    }

    #[test]
    fn sublayer_gradients_match_finite_differences() {
        let mut r = rng(16);
        let d = 8;
        for which in 0..4 {
            let layer: Sublayer<f64> = match which {
                0 => Sublayer::SelfAttn {
                    attn: Attention::init(
                        d,
                        2,
                        AttnFlags {
                            causal: true,
                            rotary: true,
                            dropout: false,
                        },
                        &mut r,
                    )
                    .unwrap(),
                    gain: gain_param(d),
                },
                1 => Sublayer::CrossAttn {
                    attn: Attention::init(
                        d,
                        2,
                        AttnFlags {
                            causal: false,
                            rotary: false,
                            dropout: false,
                        },
                        &mut r,
                    )
                    .unwrap(),
                    gain: gain_param(d),
                },
                2 => Sublayer::ChunkedCross {
                    cca: ChunkedCrossAttn {
                        attn: Attention::init(
                            d,
                            2,
                            AttnFlags {
                                causal: false,
                                rotary: false,
                                dropout: false,
                            },
                            &mut r,
                        )
                        .unwrap(),
                    },
                    gain: gain_param(d),
                },
                _ => Sublayer::Ffw {
                    ffw: FeedForward::init(d, 2 * d, &mut r),
                    gain: gain_param(d),
                },
            };
            let stream: Tensor<f64> = random_param(&[5, d], 0.8, &mut r);
            let context: Tensor<f64> = random_param(&[4, d], 0.8, &mut r);
            let mut enc = ChunkEncodings::new();
            enc.insert(1, random_param(&[4, d], 0.8, &mut r));
            enc.insert(2, random_param(&[4, d], 0.8, &mut r));

            let mut named = Vec::new();
            layer.params("l", &mut named);
            let mut params = vec![stream.clone(), context.clone()];
            params.extend(named.into_iter().map(|(_, t)| t));
            let loss_fn = || -> Result<Tensor<f64>, NnError> {
                let ctx = match &layer {
                    Sublayer::CrossAttn { .. } => SublayerCtx::Cross(&context),
                    Sublayer::ChunkedCross { .. } => SublayerCtx::Chunked {
                        enc: &enc,
                        m: 2,
                        first: FirstChunkMode::Identity,
                    },
                    _ => SublayerCtx::None,
                };
                let out = layer.forward(&stream, ctx, &mut ForwardCtx::eval())?;
                Ok(out.mul(&out)?.sum_all()?)
            };
            let e = directional_check(&params, loss_fn, &mut r, FD_STEP).unwrap();
            assert!(e < 1e-6, "sublayer {which}: directional err {e}");
        }
    }

    /// All-zero keys/values: softmax is uniform but values are zero, so the
    /// inner function contributes nothing on retrieval chunks; the sublayer
    /// degenerates to rms_norm of its input everywhere (the identity chunk
    /// too, since rms_norm(x + x) ≈ rms_norm(x) by scale invariance).
    #[test]
    fn cca_sublayer_with_zero_encodings_degrades_to_residual_norm() {
        let (cca, c, _) = cca_fixture(20);
        let mut enc = ChunkEncodings::new();
        enc.insert(1, Tensor::zeros(&[4, 8]));
        enc.insert(2, Tensor::zeros(&[4, 8]));
        let gain = gain_param::<f64>(8);
        let layer = Sublayer::ChunkedCross { cca, gain: gain.clone() };
        let got = layer
            .forward(
                &c,
                SublayerCtx::Chunked {
                    enc: &enc,
                    m: 3,
                    first: FirstChunkMode::Identity,
                },
                &mut ForwardCtx::eval(),
            )
            .unwrap()
            .to_vec();
        let oracle = rms_norm(&c, &gain, RMS_EPS).unwrap().to_vec();
        for (i, (a, b)) in got.iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() < 1e-5, "pos {i}: {a} vs {b}");
        }
    }

    /// Naive per-position oracle: scalar loops, one query row at a time,
    /// nothing shared with the tensor implementation.
    #[test]
    fn attention_matches_per_position_loop_oracle() {
        let mut r = rng(21);
        let d = 8;
        let heads = 2;
        let attn: Attention<f64> = Attention::init(
            d,
            heads,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let q: Tensor<f64> = random_param(&[3, d], 1.0, &mut r);
        let kv: Tensor<f64> = random_param(&[5, d], 1.0, &mut r);
        let got = attn.forward(&q, &kv, &mut ForwardCtx::eval()).unwrap().out.to_vec();

        let (wq, wk, wv, wo) = (attn.wq.to_vec(), attn.wk.to_vec(), attn.wv.to_vec(), attn.wo.to_vec());
        let (qv, kvv) = (q.to_vec(), kv.to_vec());
        let dh = d / heads;
        let matvec = |m: &[f64], x: &[f64], row: usize| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| x[row * d + i] * m[i * d + j]).sum()).collect()
        };
        for t in 0..3 {
            let qp = matvec(&wq, &qv, t);
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let mut scores = Vec::new();
                for s in 0..5 {
                    let kp = matvec(&wk, &kvv, s);
                    let dot: f64 = (0..dh).map(|j| qp[h * dh + j] * kp[h * dh + j]).sum();
                    scores.push(dot / (dh as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for s in 0..5 {
                    let vp = matvec(&wv, &kvv, s);
                    for j in 0..dh {
                        concat[h * dh + j] += exps[s] / z * vp[h * dh + j];
                    }
                }
            }
            for j in 0..d {
                let expect: f64 = (0..d).map(|i| concat[i] * wo[i * d + j]).sum();
                assert!(
                    (got[t * d + j] - expect).abs() < 1e-5,
                    "pos {t} dim {j}: {} vs {expect}",
                    got[t * d + j]
                );
            }
        }
    }

    /// One key/value row: softmax over a single element is 1, so the output
    /// is that value row pushed through the output projection, whatever the
    /// query.
    #[test]
    fn attention_single_kv_row_ignores_query() {
        let mut r = rng(22);
        let d = 8;
        let attn: Attention<f64> = Attention::init(
            d,
            2,
            AttnFlags {
                causal: false,
                rotary: false,
                dropout: false,
            },
            &mut r,
        )
        .unwrap();
        let kv: Tensor<f64> = random_param(&[1, d], 1.0, &mut r);
        let q1: Tensor<f64> = random_param(&[2, d], 1.0, &mut r);
        let q2: Tensor<f64> = random_param(&[2, d], 1.0, &mut r);
        let o1 = attn.forward(&q1, &kv, &mut ForwardCtx::eval()).unwrap().out.to_vec();
        let o2 = attn.forward(&q2, &kv, &mut ForwardCtx::eval()).unwrap().out.to_vec();
        let expect = kv.matmul(&attn.wv).unwrap().matmul(&attn.wo).unwrap().to_vec();
        for row in 0..2 {
            for j in 0..d {
                assert!((o1[row * d + j] - expect[j]).abs() < 1e-9);
                assert!((o2[row * d + j] - expect[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dropout_gradient_matches_finite_differences() {
        // dropout mask must be frozen across the FD evaluations, so draw the
        // mask once by replaying the same seed inside the loss closure
        let mut r = rng(17);
        let x: Tensor<f64> = random_param(&[4, 6], 1.0, &mut r);
        let params = [x.clone()];
        let loss_fn = || -> Result<Tensor<f64>, NnError> {
            let mut fwd = ForwardCtx::train(99, 0.4)?;
            let y = fwd.attn_dropout(&x)?;
            Ok(y.mul(&y)?.sum_all()?)
        };
        let e = directional_check(&params, loss_fn, &mut r, FD_STEP).unwrap();
        assert!(e < 1e-6, "dropout err {e}");
    }
}
