//! Cross-attention term scorer: single-layer multi-head attention from
//! term tokens over speech frames, masked token-level pooling, residual
//! connection, linear head, sigmoid presence probability.
//!
//! Direction convention: queries are the term tokens, keys/values are
//! the speech frames, so the attention output is L x d and can be
//! pooled along the term-length dimension. Forward and backward are
//! hand-derived for this fixed graph; both are generic over [`Scalar`]
//! so the finite-difference checker can run the identical math at f64.

use crate::corpus::{SpeechFeatures, TermFeatures};
use crate::error::{EngineError, Result};
use crate::numerics::{
    dot, masked_softmax_backward, masked_softmax_rows, matmul, matmul_at_b, sigmoid, Scalar,
    Tensor2, TensorG,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// All learnable tensors of the scorer.
#[derive(Debug, Clone)]
pub struct RetrieverParamsG<T: Scalar = f32> {
    pub d: usize,
    pub heads: usize,
    pub dropout_p: f32,
    pub wq: TensorG<T>,
    pub wk: TensorG<T>,
    pub wv: TensorG<T>,
    pub wo: TensorG<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    pub bo: Vec<T>,
    pub head_w: Vec<T>,
    /// Scalar bias kept as a 1-element slice so it shares the named
    /// tensor plumbing.
    pub head_b: Vec<T>,
}

pub type RetrieverParams = RetrieverParamsG<f32>;

pub const TENSOR_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "head_w", "head_b",
];

impl<T: Scalar> RetrieverParamsG<T> {
    /// Projections start near a scaled identity (0.15·I plus uniform
    /// noise in (-1/sqrt(d), 1/sqrt(d))) so query/key dot products carry
    /// a weak token/frame alignment signal that training can amplify;
    /// head weights and all biases zero, so an untrained scorer outputs
    /// prob 0.5 and the batch loss starts at the clean 2 ln 2 baseline.
    pub fn init(d: usize, heads: usize, dropout_p: f32, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(EngineError::Config(format!(
                "embed dim {d} not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = || {
            let data: Vec<T> = (0..d * d)
                .enumerate()
                .map(|(i, _)| {
                    let eye = if i % (d + 1) == 0 { 0.15 } else { 0.0 };
                    T::from_f64(eye + rng.gen_range(-bound..bound))
                })
                .collect();
            TensorG::from_vec(d, d, data)
        };
        Ok(RetrieverParamsG {
            d,
            heads,
            dropout_p,
            wq: mat(),
            wk: mat(),
            wv: mat(),
            wo: mat(),
            bq: vec![T::ZERO; d],
            bk: vec![T::ZERO; d],
            bv: vec![T::ZERO; d],
            bo: vec![T::ZERO; d],
            head_w: vec![T::ZERO; d],
            head_b: vec![T::ZERO; 1],
        })
    }

    pub fn zeros(d: usize, heads: usize) -> Self {
        RetrieverParamsG {
            d,
            heads,
            dropout_p: 0.0,
            wq: TensorG::zeros(d, d),
            wk: TensorG::zeros(d, d),
            wv: TensorG::zeros(d, d),
            wo: TensorG::zeros(d, d),
            bq: vec![T::ZERO; d],
            bk: vec![T::ZERO; d],
            bv: vec![T::ZERO; d],
            bo: vec![T::ZERO; d],
            head_w: vec![T::ZERO; d],
            head_b: vec![T::ZERO; 1],
        }
    }

    pub fn tensor(&self, i: usize) -> &[T] {
        match i {
            0 => &self.wq.data,
            1 => &self.wk.data,
            2 => &self.wv.data,
            3 => &self.wo.data,
            4 => &self.bq,
            5 => &self.bk,
            6 => &self.bv,
            7 => &self.bo,
            8 => &self.head_w,
            9 => &self.head_b,
            _ => panic!("tensor index {i} out of range"),
        }
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [T] {
        match i {
            0 => &mut self.wq.data,
            1 => &mut self.wk.data,
            2 => &mut self.wv.data,
            3 => &mut self.wo.data,
            4 => &mut self.bq,
            5 => &mut self.bk,
            6 => &mut self.bv,
            7 => &mut self.bo,
            8 => &mut self.head_w,
            9 => &mut self.head_b,
            _ => panic!("tensor index {i} out of range"),
        }
    }

    pub fn param_count(&self) -> usize {
        (0..TENSOR_NAMES.len()).map(|i| self.tensor(i).len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..TENSOR_NAMES.len() {
            out.extend_from_slice(self.tensor(i));
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for i in 0..TENSOR_NAMES.len() {
            let t = self.tensor_mut(i);
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        (0..TENSOR_NAMES.len()).all(|i| self.tensor(i).iter().all(|v| v.finite()))
    }

    pub fn cast<U: Scalar>(&self) -> RetrieverParamsG<U> {
        let cv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64(x.to_f64())).collect() };
        RetrieverParamsG {
            d: self.d,
            heads: self.heads,
            dropout_p: self.dropout_p,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            bq: cv(&self.bq),
            bk: cv(&self.bk),
            bv: cv(&self.bv),
            bo: cv(&self.bo),
            head_w: cv(&self.head_w),
            head_b: cv(&self.head_b),
        }
    }
}

/// How token-level attention outputs collapse into a term logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMode {
    /// Masked sum over valid term tokens, normalized by (count + eps),
    /// plus the mean-pooled term embedding residual.
    TokenPooled,
    /// Ablation arm: raw unmasked, unnormalized sum of token rows fed
    /// straight to the head; no residual.
    Bypassed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// x·W + b, row-wise bias.
pub fn linear<T: Scalar>(x: &TensorG<T>, w: &TensorG<T>, b: &[T]) -> Result<TensorG<T>> {
    let mut out = matmul(x, w)?;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Keys and values from speech frames; shared across every term scored
/// against the same utterance.
pub fn project_speech<T: Scalar>(
    p: &RetrieverParamsG<T>,
    frames: &TensorG<T>,
) -> Result<(TensorG<T>, TensorG<T>)> {
    Ok((
        linear(frames, &p.wk, &p.bk)?,
        linear(frames, &p.wv, &p.bv)?,
    ))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Cache<T: Scalar> {
    pub q: TensorG<T>,
    /// Post-softmax attention weights per head (L x T).
    pub weights: Vec<TensorG<T>>,
    /// Inverted-dropout multipliers per head (0 or 1/(1-p)); None when
    /// dropout is inactive.
    pub dropscale: Option<Vec<TensorG<T>>>,
    /// Concatenated head outputs before the output projection (L x d).
    pub attn_cat: TensorG<T>,
    pub s_attn: TensorG<T>,
    pub s_final: Vec<T>,
    pub m_sum: usize,
    pub logit: T,
    pub prob: T,
}

/// Full scoring forward for one (speech, term) pair.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    p: &RetrieverParamsG<T>,
    eps: f64,
    pooling: PoolingMode,
    k: &TensorG<T>,
    v: &TensorG<T>,
    frame_mask: &[bool],
    h_t: &TensorG<T>,
    token_mask: &[bool],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Cache<T>> {
    let d = p.d;
    let heads = p.heads;
    let dh = d / heads;
    let t_frames = k.rows;
    let l_tokens = h_t.rows;
    assert_eq!(frame_mask.len(), t_frames);
    assert_eq!(token_mask.len(), l_tokens);
    if !frame_mask.iter().any(|m| *m) {
        return Err(EngineError::DegenerateInput(
            "all speech frames masked".into(),
        ));
    }
    if !token_mask.iter().any(|m| *m) {
        return Err(EngineError::DegenerateInput("all term tokens masked".into()));
    }
    if h_t.cols != d || k.cols != d {
        return Err(EngineError::DimMismatch {
            ctx: "forward",
            left_rows: h_t.rows,
            left_cols: h_t.cols,
            right_rows: k.rows,
            right_cols: k.cols,
        });
    }

    let q = linear(h_t, &p.wq, &p.bq)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let use_dropout = p.dropout_p > 0.0 && dropout_rng.is_some();

    let mut weights = Vec::with_capacity(heads);
    let mut dropscale = if use_dropout {
        Some(Vec::with_capacity(heads))
    } else {
        None
    };
    let mut attn_cat = TensorG::zeros(l_tokens, d);

    for h in 0..heads {
        let off = h * dh;
        // attention logits for this head, scaled by 1/sqrt(d/H)
        let mut logits = TensorG::zeros(l_tokens, t_frames);
        for i in 0..l_tokens {
            let qrow = &q.row(i)[off..off + dh];
            let lrow = logits.row_mut(i);
            for (t, l) in lrow.iter_mut().enumerate() {
                let krow = &k.row(t)[off..off + dh];
                *l = T::from_f64(dot(qrow, krow).to_f64() * scale);
            }
        }
        let w = masked_softmax_rows(&logits, frame_mask)?;

        let effective: std::borrow::Cow<TensorG<T>> = if use_dropout {
            let rng = dropout_rng.as_deref_mut().unwrap();
            let keep = 1.0 / (1.0 - p.dropout_p as f64);
            let mut scale_m = TensorG::zeros(l_tokens, t_frames);
            for i in 0..l_tokens {
                let srow = scale_m.row_mut(i);
                for (t, &m) in frame_mask.iter().enumerate() {
                    if m {
                        srow[t] = if rng.gen::<f32>() < p.dropout_p {
                            T::ZERO
                        } else {
                            T::from_f64(keep)
                        };
                    }
                }
            }
            let mut dropped = w.clone();
            for (x, s) in dropped.data.iter_mut().zip(&scale_m.data) {
                *x = *x * *s;
            }
            dropscale.as_mut().unwrap().push(scale_m);
            std::borrow::Cow::Owned(dropped)
        } else {
            std::borrow::Cow::Borrowed(&w)
        };

        // head output rows into the concatenated buffer
        for i in 0..l_tokens {
            let wrow = effective.row(i);
            let orow = &mut attn_cat.row_mut(i)[off..off + dh];
            for (t, &wv) in wrow.iter().enumerate() {
                if wv != T::ZERO {
                    let vrow = &v.row(t)[off..off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += wv * vv;
                    }
                }
            }
        }
        weights.push(w);
    }

    let s_attn = linear(&attn_cat, &p.wo, &p.bo)?;

    let m_sum = token_mask.iter().filter(|m| **m).count();
    let mut s_final = vec![T::ZERO; d];
    match pooling {
        PoolingMode::TokenPooled => {
            for j in 0..d {
                let mut sum = 0.0f64;
                let mut resid = 0.0f64;
                for i in 0..l_tokens {
                    if token_mask[i] {
                        sum += s_attn.get(i, j).to_f64();
                        resid += h_t.get(i, j).to_f64();
                    }
                }
                let pooled = sum / (m_sum as f64 + eps);
                s_final[j] = T::from_f64(resid / m_sum as f64 + pooled);
            }
        }
        PoolingMode::Bypassed => {
            for j in 0..d {
                let mut sum = 0.0f64;
                for i in 0..l_tokens {
                    sum += s_attn.get(i, j).to_f64();
                }
                s_final[j] = T::from_f64(sum);
            }
        }
    }

    let logit = T::from_f64(dot(&p.head_w, &s_final).to_f64() + p.head_b[0].to_f64());
    let prob = sigmoid(logit);
    Ok(Cache {
        q,
        weights,
        dropscale,
        attn_cat,
        s_attn,
        s_final,
        m_sum,
        logit,
        prob,
    })
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn add_col_sums<T: Scalar>(dst: &mut [T], src: &TensorG<T>) {
    for r in 0..src.rows {
        add_into(dst, src.row(r));
    }
}

/// Backward for one pair. Accumulates parameter gradients into `grads`
/// and key/value input gradients into `d_k`/`d_v` (the caller folds
/// those into wk/wv once per utterance via [`accumulate_speech_grads`]).
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    p: &RetrieverParamsG<T>,
    eps: f64,
    pooling: PoolingMode,
    cache: &Cache<T>,
    k: &TensorG<T>,
    v: &TensorG<T>,
    frame_mask: &[bool],
    h_t: &TensorG<T>,
    token_mask: &[bool],
    d_logit: T,
    grads: &mut RetrieverParamsG<T>,
    d_k: &mut TensorG<T>,
    d_v: &mut TensorG<T>,
) -> Result<()> {
    let d = p.d;
    let heads = p.heads;
    let dh = d / heads;
    let l_tokens = h_t.rows;
    let t_frames = k.rows;

    // head
    for (g, &s) in grads.head_w.iter_mut().zip(&cache.s_final) {
        *g += d_logit * s;
    }
    grads.head_b[0] += d_logit;

    // d s_attn
    let mut d_s_attn = TensorG::zeros(l_tokens, d);
    match pooling {
        PoolingMode::TokenPooled => {
            let inv = 1.0 / (cache.m_sum as f64 + eps);
            for i in 0..l_tokens {
                if token_mask[i] {
                    let row = d_s_attn.row_mut(i);
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = T::from_f64(d_logit.to_f64() * p.head_w[j].to_f64() * inv);
                    }
                }
            }
        }
        PoolingMode::Bypassed => {
            for i in 0..l_tokens {
                let row = d_s_attn.row_mut(i);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = T::from_f64(d_logit.to_f64() * p.head_w[j].to_f64());
                }
            }
        }
    }

    // output projection
    let d_attn_cat = crate::numerics::matmul_a_bt(&d_s_attn, &p.wo)?;
    let d_wo = matmul_at_b(&cache.attn_cat, &d_s_attn)?;
    add_into(&mut grads.wo.data, &d_wo.data);
    add_col_sums(&mut grads.bo, &d_s_attn);

    // per-head attention backward
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = TensorG::zeros(l_tokens, d);
    for h in 0..heads {
        let off = h * dh;
        let w = &cache.weights[h];
        let drop = cache.dropscale.as_ref().map(|ds| &ds[h]);

        // d(dropped weights) and dV
        let mut d_dropped = TensorG::<T>::zeros(l_tokens, t_frames);
        for i in 0..l_tokens {
            let d_out = &d_attn_cat.row(i)[off..off + dh];
            let drow = d_dropped.row_mut(i);
            let wrow = w.row(i);
            for t in 0..t_frames {
                if !frame_mask[t] {
                    continue;
                }
                let vrow = &v.row(t)[off..off + dh];
                drow[t] = dot(d_out, vrow);
                // dropped weight actually used in forward
                let used = match drop {
                    Some(ds) => wrow[t] * ds.get(i, t),
                    None => wrow[t],
                };
                if used != T::ZERO {
                    let dv_row = &mut d_v.row_mut(t)[off..off + dh];
                    for (dv, &g) in dv_row.iter_mut().zip(d_out) {
                        *dv += used * g;
                    }
                }
            }
        }
        // dropout backward
        if let Some(ds) = drop {
            for (x, s) in d_dropped.data.iter_mut().zip(&ds.data) {
                *x = *x * *s;
            }
        }

        let d_logits = masked_softmax_backward(w, &d_dropped, frame_mask);

        // dQ and dK for this head slice
        for i in 0..l_tokens {
            let lrow = d_logits.row(i);
            let qrow = &cache.q.row(i)[off..off + dh];
            for t in 0..t_frames {
                let g = lrow[t].to_f64() * scale;
                if g == 0.0 {
                    continue;
                }
                let krow = &k.row(t)[off..off + dh];
                let dq_row = &mut d_q.row_mut(i)[off..off + dh];
                for (j, dq) in dq_row.iter_mut().enumerate() {
                    *dq += T::from_f64(g * krow[j].to_f64());
                }
                let dk_row = &mut d_k.row_mut(t)[off..off + dh];
                for (j, dk) in dk_row.iter_mut().enumerate() {
                    *dk += T::from_f64(g * qrow[j].to_f64());
                }
            }
        }
    }

    // query projection
    let d_wq = matmul_at_b(h_t, &d_q)?;
    add_into(&mut grads.wq.data, &d_wq.data);
    add_col_sums(&mut grads.bq, &d_q);
    Ok(())
}

/// Folds accumulated dK/dV for one utterance into the key/value
/// projection gradients.
pub fn accumulate_speech_grads<T: Scalar>(
    frames: &TensorG<T>,
    d_k: &TensorG<T>,
    d_v: &TensorG<T>,
    grads: &mut RetrieverParamsG<T>,
) -> Result<()> {
    let d_wk = matmul_at_b(frames, d_k)?;
    add_into(&mut grads.wk.data, &d_wk.data);
    add_col_sums(&mut grads.bk, d_k);
    let d_wv = matmul_at_b(frames, d_v)?;
    add_into(&mut grads.wv.data, &d_wv.data);
    add_col_sums(&mut grads.bv, d_v);
    Ok(())
}

/// All intermediates of one scoring pass, f32, for inspection and tests.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    pub s_attn: Tensor2,
    pub s_masked: Tensor2,
    pub s_sum: Vec<f32>,
    pub m_sum: usize,
    pub s_pooled: Vec<f32>,
    pub s_final: Vec<f32>,
    pub logit: f32,
    pub prob: f32,
    /// Post-softmax attention weights per head; inspection only, the
    /// scoring path consumes attention outputs.
    pub attn_weights: Vec<Tensor2>,
}

/// Score one term against one utterance.
pub fn score_term(
    p: &RetrieverParams,
    eps: f32,
    speech: &SpeechFeatures,
    term: &TermFeatures,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ScoreTrace> {
    if mode == Mode::Train && rng.is_none() {
        return Err(EngineError::Config(
            "train-mode scoring requires an rng for dropout".into(),
        ));
    }
    let (k, v) = project_speech(p, &speech.frames)?;
    let dropout_rng = if mode == Mode::Train { rng } else { None };
    let cache = forward(
        p,
        eps as f64,
        PoolingMode::TokenPooled,
        &k,
        &v,
        &speech.frame_mask,
        &term.tokens,
        &term.token_mask,
        dropout_rng,
    )?;
    let mut s_masked = cache.s_attn.clone();
    for i in 0..s_masked.rows {
        if !term.token_mask[i] {
            s_masked.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let d = p.d;
    let mut s_sum = vec![0.0f32; d];
    for i in 0..s_masked.rows {
        if term.token_mask[i] {
            add_into(&mut s_sum, s_masked.row(i));
        }
    }
    let s_pooled: Vec<f32> = s_sum
        .iter()
        .map(|&x| (x as f64 / (cache.m_sum as f64 + eps as f64)) as f32)
        .collect();
    Ok(ScoreTrace {
        s_attn: cache.s_attn,
        s_masked,
        s_sum,
        m_sum: cache.m_sum,
        s_pooled,
        s_final: cache.s_final.clone(),
        logit: cache.logit,
        prob: cache.prob,
        attn_weights: cache.weights,
    })
}

/// Score every bank term against one utterance. Terms are processed in
/// chunks of `batch`; within a chunk, terms of unequal length are padded
/// to the chunk maximum and masked. Keys/values are projected once.
pub fn score_bank(
    p: &RetrieverParams,
    eps: f32,
    speech: &SpeechFeatures,
    terms: &[TermFeatures],
    batch: usize,
) -> Result<Vec<f32>> {
    score_bank_pooling(p, eps, speech, terms, batch, PoolingMode::TokenPooled)
}

/// `score_bank` with an explicit pooling mode (the ablation arm scores
/// with pooling bypassed).
pub fn score_bank_pooling(
    p: &RetrieverParams,
    eps: f32,
    speech: &SpeechFeatures,
    terms: &[TermFeatures],
    batch: usize,
    pooling: PoolingMode,
) -> Result<Vec<f32>> {
    let (k, v) = project_speech(p, &speech.frames)?;
    score_bank_kv(p, eps, &k, &v, &speech.frame_mask, terms, batch, pooling)
}

/// `score_bank` core over precomputed keys/values; the serving path uses
/// this to time projection and scoring separately.
#[allow(clippy::too_many_arguments)]
pub fn score_bank_kv(
    p: &RetrieverParams,
    eps: f32,
    k: &Tensor2,
    v: &Tensor2,
    frame_mask: &[bool],
    terms: &[TermFeatures],
    batch: usize,
    pooling: PoolingMode,
) -> Result<Vec<f32>> {
    if terms.is_empty() {
        return Err(EngineError::DegenerateInput("empty term bank".into()));
    }
    let batch = batch.max(1);
    let d = p.d;
    let mut probs = Vec::with_capacity(terms.len());
    for chunk in terms.chunks(batch) {
        let l_max = chunk.iter().map(|t| t.tokens.rows).max().unwrap();
        for term in chunk {
            let mut h_t = Tensor2::zeros(l_max, d);
            let mut mask = vec![false; l_max];
            for i in 0..term.tokens.rows {
                h_t.row_mut(i).copy_from_slice(term.tokens.row(i));
                mask[i] = term.token_mask[i];
            }
            let cache = forward(
                p,
                eps as f64,
                pooling,
                k,
                v,
                frame_mask,
                &h_t,
                &mask,
                None,
            )
            .map_err(|e| EngineError::TermScoring {
                term_id: term.term_id,
                source: Box::new(e),
            })?;
            probs.push(cache.prob);
        }
    }
    Ok(probs)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"A2CK";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    version: u16,
    d: usize,
    heads: usize,
    dropout_p: f32,
    tensors: Vec<CkptTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    len: usize,
}

/// Named-tensor container: magic | version u16 | header-len u32 |
/// JSON header | f32 LE payloads in header order. Round-trips bit-exact.
pub fn save_checkpoint(path: &Path, p: &RetrieverParams) -> Result<()> {
    let tensors: Vec<CkptTensor> = TENSOR_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| CkptTensor {
            name: name.to_string(),
            len: p.tensor(i).len(),
        })
        .collect();
    let header = serde_json::to_vec(&CkptHeader {
        version: CKPT_VERSION,
        d: p.d,
        heads: p.heads,
        dropout_p: p.dropout_p,
        tensors,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for i in 0..TENSOR_NAMES.len() {
        for x in p.tensor(i) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RetrieverParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let ferr = |msg: String, off: usize| EngineError::Format {
        msg,
        offset: off as u64,
    };
    if buf.len() < 10 || &buf[0..4] != CKPT_MAGIC {
        return Err(ferr("bad checkpoint magic (expected A2CK)".into(), 0));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != CKPT_VERSION {
        return Err(ferr(format!("unknown checkpoint version {version}"), 4));
    }
    let hlen = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    if buf.len() < 10 + hlen {
        return Err(ferr("truncated checkpoint header".into(), buf.len()));
    }
    let header: CkptHeader = serde_json::from_slice(&buf[10..10 + hlen])?;
    if header.heads == 0 || header.d % header.heads != 0 {
        return Err(EngineError::Config(format!(
            "checkpoint d {} not divisible by heads {}",
            header.d, header.heads
        )));
    }
    let mut p = RetrieverParams::zeros(header.d, header.heads);
    p.dropout_p = header.dropout_p;
    let mut off = 10 + hlen;
    for (i, t) in header.tensors.iter().enumerate() {
        if i >= TENSOR_NAMES.len() || t.name != TENSOR_NAMES[i] {
            return Err(ferr(format!("unexpected tensor {:?}", t.name), off));
        }
        let dst = p.tensor_mut(i);
        if t.len != dst.len() {
            return Err(ferr(
                format!(
                    "tensor {:?} has length {} in file, expected {}",
                    t.name,
                    t.len,
                    dst.len()
                ),
                off,
            ));
        }
        let need = off + 4 * t.len;
        if buf.len() < need {
            return Err(ferr(
                format!("tensor {:?} payload truncated", t.name),
                buf.len(),
            ));
        }
        for (j, x) in dst.iter_mut().enumerate() {
            let o = off + 4 * j;
            *x = f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        }
        off = need;
    }
    if off != buf.len() {
        return Err(ferr("trailing bytes after tensor payloads".into(), off));
    }
    if !p.is_finite() {
        return Err(EngineError::Numeric(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Builds a random tiny scorer plus a two-pair dual-objective loss (one
/// positive, one negative) and compares the analytic parameter gradient
/// with central finite differences at f64. Returns the max relative
/// error over every parameter.
pub fn gradcheck(
    d: usize,
    heads: usize,
    t_frames: usize,
    l_tokens: usize,
    eps_pool: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p32 = RetrieverParams::init(d, heads, 0.0, &mut rng)?;
    // the spec init zeroes the head, which would make every attention
    // gradient trivially zero; randomize it for a meaningful check
    let bound = 1.0 / (d as f64).sqrt();
    for w in p32.head_w.iter_mut() {
        *w = rng.gen_range(-bound..bound) as f32;
    }
    p32.head_b[0] = rng.gen_range(-0.1..0.1);
    let params: RetrieverParamsG<f64> = p32.cast();

    let frames = TensorG::<f64>::from_vec(
        t_frames,
        d,
        (0..t_frames * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let frame_mask = vec![true; t_frames];
    let mk_term = |rng: &mut ChaCha8Rng, l: usize| {
        TensorG::<f64>::from_vec(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let l_pos = 1 + (l_tokens - 1) / 2;
    let pos = mk_term(&mut rng, l_pos);
    let neg = mk_term(&mut rng, l_tokens);
    let pairs: Vec<(TensorG<f64>, f64)> = vec![(pos, 1.0), (neg, 0.0)];

    let eval = |p: &RetrieverParamsG<f64>| -> Result<(f64, Vec<f64>)> {
        let (k, v) = project_speech(p, &frames)?;
        let mut loss = 0.0;
        let mut grads = RetrieverParamsG::<f64>::zeros(d, heads);
        let mut d_k = k.zeros_like();
        let mut d_v = v.zeros_like();
        for (h_t, y) in &pairs {
            let mask = vec![true; h_t.rows];
            let cache = forward(
                p,
                eps_pool,
                PoolingMode::TokenPooled,
                &k,
                &v,
                &frame_mask,
                h_t,
                &mask,
                None,
            )?;
            let prob = cache.prob.clamp(1e-12, 1.0 - 1e-12);
            loss += if *y > 0.5 { -prob.ln() } else { -(1.0 - prob).ln() };
            let d_logit = cache.prob - y;
            backward(
                p,
                eps_pool,
                PoolingMode::TokenPooled,
                &cache,
                &k,
                &v,
                &frame_mask,
                h_t,
                &mask,
                d_logit,
                &mut grads,
                &mut d_k,
                &mut d_v,
            )?;
        }
        accumulate_speech_grads(&frames, &d_k, &d_v, &mut grads)?;
        Ok((loss, grads.flatten()))
    };

    let (_, analytic) = eval(&params)?;
    let mut flat = params.flatten();
    let template = params.clone();
    let loss_fn = |flat: &[f64]| -> Result<f64> {
        let mut p = template.clone();
        p.load_flat(flat);
        Ok(eval(&p)?.0)
    };
    crate::numerics::finite_diff_check(loss_fn, &mut flat, &analytic, 1e-4)
}
