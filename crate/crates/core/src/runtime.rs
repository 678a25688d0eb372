//! Forward pass and greedy generation.
//!
//! Blocks are post-norm: `m = LayerNorm(h + Attn(h))`, then
//! `h' = LayerNorm(m + FFN(m))`. Attention is causal multi-head
//! softmax(QK^T / sqrt(head_dim)) over cached keys; there is no positional
//! encoding. Decoding is greedy with ties broken toward the lowest token id.
//!
//! The per-row attention helper is shared between this module and the
//! dual-track path in `inject`, which is what makes the two bit-identical on
//! the rows they both compute.

use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::inject::{self, Injection};
use crate::model::Model;
use crate::tensor::{self, matmul, Tensor};
use crate::trace::TraceRecorder;

/// Looks up embedding rows for a prompt. The first id must be the
/// caller-declared BOS id; ids are otherwise opaque.
pub fn embed(model: &Model, tokens: &[u32], bos_id: u32) -> Result<Tensor> {
    match tokens.first() {
        None => return Err(Error::MissingBos {
            expected: bos_id,
            found: None,
        }),
        Some(&first) if first != bos_id => {
            return Err(Error::MissingBos {
                expected: bos_id,
                found: Some(first),
            })
        }
        Some(_) => {}
    }
    let d = model.config().d_model;
    let vocab = model.config().vocab_size;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &id in tokens {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        data.extend_from_slice(model.weights().embedding.row(id as usize));
    }
    Tensor::from_vec(&[tokens.len(), d], data)
}

// --- attention --------------------------------------------------------------

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Projects `h` through Q, K and V and appends the new K/V rows to the cache
/// at `layer`. Returns (q, start position of the new rows). Capacity is
/// checked up front so a failure leaves the cache untouched.
pub(crate) fn project_and_cache(
    model: &Model,
    h: &Tensor,
    layer: usize,
    cache: &mut KvCache,
) -> Result<(Tensor, usize)> {
    let lw = model.layer(layer);
    let n = h.rows();
    let p0 = cache.layer_len(layer);
    if p0 + n > cache.max_seq() {
        return Err(Error::CacheFull {
            max_seq: cache.max_seq(),
        });
    }
    let q = matmul(h, &lw.w_q)?;
    let k = matmul(h, &lw.w_k)?;
    let v = matmul(h, &lw.w_v)?;
    for i in 0..n {
        cache.append_row(layer, k.row(i), v.row(i))?;
    }
    Ok((q, p0))
}

/// Attends query rows `first..n` over cached positions `0..=p0+i` and writes
/// the head-concatenated outputs into the matching rows of `out`. One weight
/// row per (query, head) goes to the recorder.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_rows(
    model: &Model,
    layer: usize,
    q: &Tensor,
    p0: usize,
    first: usize,
    cache: &KvCache,
    mut recorder: Option<&mut TraceRecorder>,
    step: usize,
    out: &mut Tensor,
) -> Result<()> {
    let n_heads = model.config().n_heads;
    let dh = model.config().head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    for i in first..q.rows() {
        let qpos = p0 + i;
        for head in 0..n_heads {
            let qh = KvCache::head_slice(q.row(i), head, dh);
            let mut weights = Vec::with_capacity(qpos + 1);
            for j in 0..=qpos {
                let kh = KvCache::head_slice(cache.k_row(layer, j), head, dh);
                weights.push(dot(qh, kh) * scale);
            }
            tensor::softmax_in_place(&mut weights);
            if let Some(rec) = recorder.as_deref_mut() {
                let qk = rec.wants_qk().then(|| {
                    let keys = (0..=qpos)
                        .map(|j| KvCache::head_slice(cache.k_row(layer, j), head, dh).to_vec())
                        .collect();
                    (qh.to_vec(), keys)
                });
                rec.record_attention(step, layer, head, qpos, &weights, qk)?;
            }
            let orow = out.row_mut(i);
            let ohead = &mut orow[head * dh..(head + 1) * dh];
            for (j, &w) in weights.iter().enumerate() {
                let vh = KvCache::head_slice(cache.v_row(layer, j), head, dh);
                for (o, &v) in ohead.iter_mut().zip(vh) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(())
}

/// Standard causal self-attention for `n` new rows starting at the cache's
/// current position. Returns the post-W_O outputs, `n x d`.
pub fn causal_self_attention(
    model: &Model,
    h: &Tensor,
    layer: usize,
    cache: &mut KvCache,
    recorder: Option<&mut TraceRecorder>,
    step: usize,
) -> Result<Tensor> {
    let (q, p0) = project_and_cache(model, h, layer, cache)?;
    let mut out = Tensor::zeros(&[h.rows(), model.config().d_model]);
    attend_rows(model, layer, &q, p0, 0, cache, recorder, step, &mut out)?;
    matmul(&out, &model.layer(layer).w_o)
}

/// Cross-attention head outputs for a single query against projections of
/// the info rows: per head softmax(q K_info^T / sqrt(dh)) V_info, heads
/// concatenated, before the output projection. Shared by the standalone BOS
/// cross-attention op and the dual-track layer.
pub(crate) fn cross_head_outputs(
    model: &Model,
    layer: usize,
    q0: &[f32],
    info_rows: &Tensor,
) -> Result<Vec<f32>> {
    let lw = model.layer(layer);
    let k_info = matmul(info_rows, &lw.w_k)?;
    let v_info = matmul(info_rows, &lw.w_v)?;
    let n_heads = model.config().n_heads;
    let dh = model.config().head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let m = info_rows.rows();
    let mut out = vec![0.0f32; model.config().d_model];
    for head in 0..n_heads {
        let qh = KvCache::head_slice(q0, head, dh);
        let mut weights = Vec::with_capacity(m);
        for j in 0..m {
            let kh = KvCache::head_slice(k_info.row(j), head, dh);
            weights.push(dot(qh, kh) * scale);
        }
        tensor::softmax_in_place(&mut weights);
        let ohead = &mut out[head * dh..(head + 1) * dh];
        for (j, &w) in weights.iter().enumerate() {
            let vh = KvCache::head_slice(v_info.row(j), head, dh);
            for (o, &v) in ohead.iter_mut().zip(vh) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

// --- block ------------------------------------------------------------------

fn gelu(x: f32) -> f32 {
    #[allow(clippy::excessive_precision)]
    const SQRT_2_OVER_PI: f32 = 0.79788456;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn add_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// Residual add, norm, FFN, residual add, norm: the block tail that follows
/// any attention variant.
pub(crate) fn block_from_attention(
    model: &Model,
    h: &Tensor,
    layer: usize,
    attn: &Tensor,
) -> Result<Tensor> {
    let lw = model.layer(layer);
    let eps = model.config().ln_eps;
    let resid1 = add_rows(h, attn);
    let m = tensor::layernorm(&resid1, &lw.ln1_gain, &lw.ln1_bias, eps)?;

    let mut inner = matmul(&m, &lw.ffn_w1)?;
    for i in 0..inner.rows() {
        let row = inner.row_mut(i);
        for (x, &b) in row.iter_mut().zip(lw.ffn_b1.data()) {
            *x = gelu(*x + b);
        }
    }
    let mut ffn = matmul(&inner, &lw.ffn_w2)?;
    for i in 0..ffn.rows() {
        let row = ffn.row_mut(i);
        for (x, &b) in row.iter_mut().zip(lw.ffn_b2.data()) {
            *x += b;
        }
    }

    let resid2 = add_rows(&m, &ffn);
    tensor::layernorm(&resid2, &lw.ln2_gain, &lw.ln2_bias, eps)
}

/// One standard decoder block over `n` new rows.
pub fn decoder_block(
    model: &Model,
    h: &Tensor,
    layer: usize,
    cache: &mut KvCache,
    recorder: Option<&mut TraceRecorder>,
    step: usize,
) -> Result<Tensor> {
    let attn = causal_self_attention(model, h, layer, cache, recorder, step)?;
    block_from_attention(model, h, layer, &attn)
}

// --- generation -------------------------------------------------------------

pub struct PrefillOutput {
    pub cache: KvCache,
    /// Final hidden row of the prompt; feeds the first logits.
    pub last_hidden: Vec<f32>,
}

/// Runs the whole prompt through all layers, populating a fresh cache. With
/// an injection attached, scheduled layers are rewritten by the engine;
/// without one, this path never touches the injection module.
pub fn prefill(
    model: &Model,
    tokens: &[u32],
    bos_id: u32,
    injection: Option<&Injection>,
    mut recorder: Option<&mut TraceRecorder>,
) -> Result<PrefillOutput> {
    let mut h = embed(model, tokens, bos_id)?;
    let mut cache = KvCache::new(model.config());
    if let Some(inj) = injection {
        inj.check_against(model)?;
        for layer in 0..model.config().n_layers {
            h = inject::apply_plan_at_layer(
                model,
                &h,
                layer,
                inj,
                &mut cache,
                recorder.as_deref_mut(),
                0,
            )?;
        }
    } else {
        for layer in 0..model.config().n_layers {
            h = decoder_block(model, &h, layer, &mut cache, recorder.as_deref_mut(), 0)?;
        }
    }
    if let Some(rec) = recorder {
        rec.set_bos_values(cache.bos_value_rows()?);
    }
    let last_hidden = h.row(h.rows() - 1).to_vec();
    Ok(PrefillOutput { cache, last_hidden })
}

/// Logits for one hidden row.
pub fn logits_for(model: &Model, hidden: &[f32]) -> Result<Vec<f32>> {
    let h = Tensor::from_vec(&[hidden.len()], hidden.to_vec())?;
    Ok(matmul(&h, &model.weights().unembedding)?.data().to_vec())
}

/// Greedy argmax; equal scores resolve to the lowest token id.
pub fn argmax_token(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub struct DecodeOutput {
    pub token: u32,
    pub logits: Vec<f32>,
    pub last_hidden: Vec<f32>,
}

/// One autoregressive step: picks the next token from `last_hidden`'s logits,
/// then feeds it through all layers, appending one cache position. The same
/// standard path runs regardless of how the cache was prepared.
pub fn decode_step(
    model: &Model,
    cache: &mut KvCache,
    last_hidden: &[f32],
    mut recorder: Option<&mut TraceRecorder>,
    step: usize,
) -> Result<DecodeOutput> {
    cache.len()?; // reject a half-written cache
    let logits = logits_for(model, last_hidden)?;
    let token = argmax_token(&logits);
    let mut h = Tensor::from_vec(
        &[1, model.config().d_model],
        model.weights().embedding.row(token as usize).to_vec(),
    )?;
    for layer in 0..model.config().n_layers {
        h = decoder_block(model, &h, layer, cache, recorder.as_deref_mut(), step)?;
    }
    Ok(DecodeOutput {
        token,
        logits,
        last_hidden: h.row(0).to_vec(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub max_new_tokens: usize,
    /// Keep the logits behind each emitted token.
    pub record_logits: bool,
}

pub struct GenerationOutput {
    pub tokens: Vec<u32>,
    pub step_logits: Option<Vec<Vec<f32>>>,
    pub cache: KvCache,
    pub last_hidden: Vec<f32>,
}

/// Prefill followed by `max_new_tokens` greedy decode steps. Trace steps
/// number 0 for the prefill and g for the step that emitted token g.
pub fn generate(
    model: &Model,
    prompt: &[u32],
    bos_id: u32,
    injection: Option<&Injection>,
    opts: &GenOptions,
    mut recorder: Option<&mut TraceRecorder>,
) -> Result<GenerationOutput> {
    let prefill_out = prefill(model, prompt, bos_id, injection, recorder.as_deref_mut())?;
    let mut cache = prefill_out.cache;
    let mut last_hidden = prefill_out.last_hidden;
    let mut tokens = Vec::with_capacity(opts.max_new_tokens);
    let mut step_logits = opts.record_logits.then(Vec::new);
    for g in 1..=opts.max_new_tokens {
        let out = decode_step(model, &mut cache, &last_hidden, recorder.as_deref_mut(), g)?;
        tokens.push(out.token);
        if let Some(sl) = step_logits.as_mut() {
            sl.push(out.logits);
        }
        last_hidden = out.last_hidden;
    }
    Ok(GenerationOutput {
        tokens,
        step_logits,
        cache,
        last_hidden,
    })
}
